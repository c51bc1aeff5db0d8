"""Semantic attribute compactness: region-pooled features, index assignment
by cosine matching against a text bank, and the per-pixel decoder.

High-dimensional per-pixel features are collapsed to one representative
vector per object region, matched against class embeddings, and the winning
class index is broadcast over the region. The renderer only ever carries the
low-dimensional per-Gaussian embedding; a 1x1 decoder maps its rendered map
to class logits for cross-entropy supervision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNLABELED = -1


@dataclass
class FeatureMap:
    """Per-pixel feature tensor for one view, shape (D, H, W)."""

    data: np.ndarray
    view_id: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise ValueError("feature map must have shape (D, H, W) with D >= 1")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite values")


@dataclass
class Region:
    region_id: int
    track_id: int
    mask: np.ndarray  # (H, W) bool


@dataclass
class RegionMaskSet:
    """Disjoint object masks of one view; track_id links the same physical
    object across views."""

    view_id: int
    regions: list

    def __post_init__(self):
        occupied = None
        for r in self.regions:
            r.mask = np.asarray(r.mask, dtype=bool)
            if not r.mask.any():
                raise ValueError(f"region {r.region_id} has no pixels")
            if occupied is None:
                occupied = r.mask.copy()
            else:
                if (occupied & r.mask).any():
                    raise ValueError("region masks overlap")
                occupied |= r.mask
        self.shape = occupied.shape if occupied is not None else None

    def __len__(self):
        return len(self.regions)

    def find_track(self, track_id):
        for r in self.regions:
            if r.track_id == track_id:
                return r
        return None

    def track_ids(self):
        return [r.track_id for r in self.regions]


@dataclass
class TextBank:
    """One embedding per class label, shape (C, D)."""

    vectors: np.ndarray
    labels: list

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if len(self.labels) != self.vectors.shape[0]:
            raise ValueError("label count does not match embedding rows")
        if np.any(np.linalg.norm(self.vectors, axis=1) == 0.0):
            raise ValueError("text bank contains a zero embedding")


@dataclass
class SemanticIndexMap:
    """Per-pixel class indices in [0, C), UNLABELED outside all masks."""

    data: np.ndarray
    class_count: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        labeled = self.data[self.data != UNLABELED]
        if labeled.size and (labeled.min() < 0 or labeled.max() >= self.class_count):
            raise ValueError("class index out of range")

    @property
    def labeled_mask(self):
        return self.data != UNLABELED


@dataclass
class Decoder:
    """1x1 convolution: per-pixel affine map from d features to C logits."""

    weight: np.ndarray  # (C, d)
    bias: np.ndarray    # (C,)

    def __post_init__(self):
        self.weight = np.atleast_2d(np.asarray(self.weight, dtype=np.float64))
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ValueError("bias length does not match weight rows")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("decoder parameters must be finite")

    @classmethod
    def initialized(cls, class_count, feature_dim, rng, scale=0.1):
        w = rng.normal(0.0, scale, (class_count, feature_dim))
        return cls(w, np.zeros(class_count))


def representative_features(features: FeatureMap, masks: RegionMaskSet):
    """One pooled feature column per region: the mean over mask pixels,
    L2-normalized. Returns a (D, M) matrix in region order."""
    if masks.view_id != features.view_id:
        raise ValueError("feature map and masks come from different views")
    d = features.data.shape[0]
    out = np.empty((d, len(masks)))
    flat = features.data.reshape(d, -1)
    for q, region in enumerate(masks.regions):
        idx = np.flatnonzero(region.mask.ravel())
        if idx.size == 0:
            raise ValueError(f"region {region.region_id} has no pixels")
        mean = flat[:, idx].mean(axis=1)
        norm = np.linalg.norm(mean)
        out[:, q] = mean / norm if norm > 0 else mean
    return out


def assign_indices(rep, bank: TextBank, masks: RegionMaskSet) -> SemanticIndexMap:
    """Give every pixel of region q the class argmax_c cos(rep_q, T_c);
    pixels outside all masks stay unlabeled. Ties break to the lowest class."""
    rep = np.asarray(rep, dtype=np.float64)
    if rep.shape[0] != bank.vectors.shape[1]:
        raise ValueError("feature dimension does not match text bank")
    if rep.shape[1] != len(masks):
        raise ValueError("one representative column per region required")
    norms = np.linalg.norm(rep, axis=0)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm representative vector")
    bank_unit = bank.vectors / np.linalg.norm(bank.vectors, axis=1, keepdims=True)
    sims = bank_unit @ (rep / norms)  # (C, M)
    winners = np.argmax(sims, axis=0)
    data = np.full(masks.shape, UNLABELED, dtype=np.int64)
    for q, region in enumerate(masks.regions):
        data[region.mask] = winners[q]
    return SemanticIndexMap(data, bank.vectors.shape[0])


def decode(feature, decoder: Decoder):
    """Per-pixel affine map (H, W, d) -> (H, W, C); no nonlinearity."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape[-1] != decoder.weight.shape[1]:
        raise ValueError("feature dimension does not match decoder")
    return feature @ decoder.weight.T + decoder.bias


def softmax_logits(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, target, class_count=None):
    """Mean softmax cross entropy over labeled pixels.

    Args:
        logits: (H, W, C).
        target: (H, W) int map with UNLABELED outside supervision.

    Returns:
        (loss, grad) where grad is (softmax - onehot) / n_labeled at labeled
        pixels and zero elsewhere.

    Raises:
        ValueError("empty supervision") when no pixel is labeled.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    if logits.shape[:2] != target.shape:
        raise ValueError(f"logits {logits.shape} do not match target {target.shape}")
    labeled = target != UNLABELED
    n = int(labeled.sum())
    if n == 0:
        raise ValueError("empty supervision")
    lab_logits = logits[labeled]
    lab_target = target[labeled]
    shifted = lab_logits - lab_logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(n), lab_target] - logz
    loss = float(-logp.mean())
    grad_lab = np.exp(shifted - logz[:, None])
    grad_lab[np.arange(n), lab_target] -= 1.0
    grad = np.zeros_like(logits)
    grad[labeled] = grad_lab / n
    return loss, grad


def semantic_loss(logits, target: SemanticIndexMap):
    """Cross entropy of decoded logits against a semantic index map."""
    return cross_entropy(logits, target.data)


def per_pixel_indices(features: FeatureMap, masks: RegionMaskSet,
                      bank: TextBank) -> SemanticIndexMap:
    """Per-pixel cosine argmax inside masks, bypassing region pooling.

    This is the supervision the engine falls back to when compact region
    semantics are disabled; it inherits all the per-pixel feature noise.
    """
    d, h, w = features.data.shape
    bank_unit = bank.vectors / np.linalg.norm(bank.vectors, axis=1, keepdims=True)
    data = np.full((h, w), UNLABELED, dtype=np.int64)
    for region in masks.regions:
        vecs = features.data[:, region.mask]  # (D, n)
        norms = np.linalg.norm(vecs, axis=0)
        norms[norms == 0.0] = 1.0
        sims = bank_unit @ (vecs / norms)
        data[region.mask] = np.argmax(sims, axis=0)
    return SemanticIndexMap(data, bank.vectors.shape[0])


# ---------------------------------------------------------------------------
# FTS1 tensor files: text header "FTS1 <ndims> <dim0> <dim1> ...", then
# little-endian float32 in row-major order.
# MSK1 mask files: "MSK1 <M> <H> <W>", then per region one line
# "<region_id> <track_id>" followed by H*W 0/1 characters row-major.
# ---------------------------------------------------------------------------

def save_tensor(array, path):
    array = np.asarray(array, dtype=np.float32)
    with open(path, "wb") as f:
        dims = " ".join(str(s) for s in array.shape)
        f.write(f"FTS1 {array.ndim} {dims}\n".encode("ascii"))
        f.write(array.astype("<f4").tobytes(order="C"))


def load_tensor(path):
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if not header or header[0] != "FTS1":
            raise ValueError(f"{path}: not an FTS1 file")
        ndims = int(header[1])
        shape = tuple(int(v) for v in header[2:2 + ndims])
        count = int(np.prod(shape)) if shape else 1
        raw = f.read()
    data = np.frombuffer(raw, dtype="<f4", count=count)
    if data.size != count:
        raise ValueError(f"{path}: truncated tensor payload")
    return data.reshape(shape).astype(np.float64)


def save_masks(masks: RegionMaskSet, path):
    h, w = masks.shape
    with open(path, "w") as f:
        f.write(f"MSK1 {len(masks)} {h} {w}\n")
        for r in masks.regions:
            f.write(f"{r.region_id} {r.track_id}\n")
            bits = np.where(r.mask, "1", "0")
            for row in bits:
                f.write("".join(row) + "\n")


def load_masks(path, view_id=0) -> RegionMaskSet:
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 4 or header[0] != "MSK1":
            raise ValueError(f"{path}: not an MSK1 file")
        m, h, w = int(header[1]), int(header[2]), int(header[3])
        regions = []
        for _ in range(m):
            region_id, track_id = (int(v) for v in f.readline().split())
            chars = []
            while len(chars) < h * w:
                line = f.readline()
                if not line:
                    raise ValueError(f"{path}: truncated mask data")
                chars.extend(ch for ch in line.strip())
            mask = (np.array(chars, dtype="U1") == "1").reshape(h, w)
            regions.append(Region(region_id, track_id, mask))
    return RegionMaskSet(view_id, regions)
