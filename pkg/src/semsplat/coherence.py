"""Cross-view coherence regularization.

Two constraints derived from the model's own renders: (1) pseudo-labels from
majority voting over corresponding regions in the current and adjacent views,
trained with cross entropy; (2) a KL attraction pulling the semantics of the
Gaussians that dominate one object's pixels in all views toward their pooled
(detached) probability anchor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Scene
from .rasterizer import RenderOutput
from .sac import RegionMaskSet, UNLABELED, cross_entropy


@dataclass
class VoteResult:
    """Consensus class for one tracked object plus the per-view evidence."""

    track_id: int
    consensus: int
    histograms: list  # (view position, C-vector of pixel counts) per view seen

    def total_histogram(self):
        return np.sum([h for _, h in self.histograms], axis=0)


@dataclass
class MatchSet:
    """Gaussians that dominate the same object's pixels in every view that
    sees the object. Empty sets are skipped downstream."""

    track_id: int
    gaussian_indices: np.ndarray      # sorted, possibly empty
    cluster_feature: np.ndarray | None  # (d,) probability vector or None

    def __bool__(self):
        return self.gaussian_indices.size > 0


def majority_vote(logits_by_view, masks_by_view, track_id) -> VoteResult:
    """Consensus class of a tracked region across up to three views.

    Args:
        logits_by_view: decoded (H, W, C) logit maps of the adjacent and
            current views, in view order.
        masks_by_view: matching RegionMaskSets; views whose sets do not
            contain the track are skipped.
        track_id: the shared object id.

    Per pixel of each corresponding region the predicted class is the logit
    argmax; the consensus is the class with the largest total pixel count
    over the union, ties to the lowest class index.
    """
    if len(logits_by_view) != len(masks_by_view):
        raise ValueError("one mask set per logit map required")
    histograms = []
    c = None
    for pos, (logits, masks) in enumerate(zip(logits_by_view, masks_by_view)):
        region = masks.find_track(track_id)
        if region is None:
            continue
        logits = np.asarray(logits, dtype=np.float64)
        c = logits.shape[-1]
        pred = np.argmax(logits[region.mask], axis=-1)
        histograms.append((pos, np.bincount(pred, minlength=c).astype(np.int64)))
    if not histograms:
        raise ValueError(f"track {track_id} absent from all views")
    totals = np.sum([h for _, h in histograms], axis=0)
    return VoteResult(track_id, int(np.argmax(totals)), histograms)


def vote_pseudo_labels(logits_by_view, masks_by_view, current):
    """Pseudo-label map for one view: every region of the current view gets
    its majority-vote consensus class; pixels outside all regions stay
    unlabeled. Returns ((H, W) int map, {track_id: VoteResult})."""
    cur_masks = masks_by_view[current]
    labels = np.full(cur_masks.shape, UNLABELED, dtype=np.int64)
    votes = {}
    for region in cur_masks.regions:
        vote = majority_vote(logits_by_view, masks_by_view, region.track_id)
        votes[region.track_id] = vote
        labels[region.mask] = vote.consensus
    return labels, votes


def consistency_loss_2d(logits, pseudo_labels):
    """Cross entropy against vote-consensus pseudo-labels; same contract as
    the phase-one semantic loss."""
    return cross_entropy(logits, pseudo_labels)


def softmax_vec(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def match_gaussians(outputs_by_view, masks_by_view, track_id,
                    scene: Scene) -> MatchSet:
    """Intersect, across views seeing the track, the sets of Gaussians that
    are the max contributor of at least one region pixel.

    The cluster feature is the mean of the members' softmaxed semantics;
    an empty intersection yields an empty MatchSet.
    """
    if len(outputs_by_view) != len(masks_by_view):
        raise ValueError("one mask set per render output required")
    member_sets = []
    for out, masks in zip(outputs_by_view, masks_by_view):
        region = masks.find_track(track_id)
        if region is None:
            continue
        ids = np.unique(out.max_contributor[region.mask])
        member_sets.append(set(int(i) for i in ids if i >= 0))
    if not member_sets:
        raise ValueError(f"track {track_id} absent from all views")
    common = set.intersection(*member_sets)
    if not common:
        return MatchSet(track_id, np.zeros(0, dtype=np.int64), None)
    indices = np.array(sorted(common), dtype=np.int64)
    probs = softmax_vec(scene.semantics[indices])
    return MatchSet(track_id, indices, probs.mean(axis=0))


def consistency_loss_3d(match: MatchSet, scene: Scene):
    """KL(M || softmax(f_i)) summed over the matched members.

    The cluster feature M is a fixed target (no gradient flows into it);
    the gradient with respect to each member's raw semantic vector is
    softmax(f_i) - M. Returns (loss, member indices, gradient rows).
    """
    if not match:
        raise ValueError("empty match set")
    m = match.cluster_feature
    probs = softmax_vec(scene.semantics[match.gaussian_indices])
    # sum_i sum_j M_j * (log M_j - log p_ij); M is strictly positive by
    # construction (mean of softmaxes)
    log_m = np.log(m)
    log_p = np.log(probs)
    loss = float(np.sum(m * (log_m[None, :] - log_p)))
    grad = probs - m[None, :]
    return loss, match.gaussian_indices, grad
