"""Two-phase end-to-end optimization with progressive densification.

Phase one trains reconstruction plus the compact semantic loss; after the
switch iteration the coherence losses take over semantic supervision.
Densification clones small / splits large high-gradient Gaussians and prunes
transparent ones, on a schedule that starts sparse at reduced resolution and
anneals to the usual defaults.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.ndimage import convolve1d

from .coherence import (consistency_loss_3d, match_gaussians,
                        vote_pseudo_labels)
from .core import Camera, Scene, quat_to_rotmat, save_scene, sigmoid
from .optim import Adam, exponential_decay
from .rasterizer import RenderGradients, rasterize, rasterize_backward
from .sac import (Decoder, FeatureMap, Region, RegionMaskSet, TextBank,
                  UNLABELED, assign_indices, cross_entropy, decode,
                  per_pixel_indices, representative_features)


@dataclass
class TrainConfig:
    total_iterations: int = 30000
    phase_switch: int = 15000
    lambda_dssim: float = 0.2
    # learning rates per attribute group
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_semantic: float = 2.5e-3
    lr_decoder: float = 5e-4
    # progressive densification regulation
    initial_resolution_scale: float = 0.5
    resolution_ramp_end: int = 7000
    initial_densify_interval: int = 200
    final_densify_interval: int = 100
    initial_threshold_scale: float = 1.5
    schedule_end: int = 4000
    # densification
    grad_threshold: float = 2e-4
    opacity_prune: float = 5e-3
    densify_from: int = 500
    densify_until: int = 15000
    percent_dense: float = 0.01
    # ablation toggles and weights
    enable_sac: bool = True
    enable_3dcr_2d: bool = True
    enable_3dcr_3d: bool = True
    enable_pdr: bool = True
    weight_3d: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.phase_switch < self.total_iterations:
            raise ValueError("need 0 < phase_switch < total_iterations")
        for f in fields(self):
            if f.name.startswith("lr_") and getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if not 0.0 < self.initial_resolution_scale <= 1.0:
            raise ValueError("initial_resolution_scale must lie in (0, 1]")


_BOOL_FIELDS = {"enable_sac", "enable_3dcr_2d", "enable_3dcr_3d", "enable_pdr"}


def parse_config_file(path):
    """Flat key=value text file; # starts a comment."""
    values = {}
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
    return values


def config_from_file(path=None, overrides=None):
    values = parse_config_file(path) if path else {}
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    kwargs = {}
    by_name = {f.name: f for f in fields(TrainConfig)}
    for key, raw in values.items():
        if key not in by_name:
            raise ValueError(f"unknown config key: {key}")
        if key in _BOOL_FIELDS:
            kwargs[key] = str(raw).strip().lower() in ("1", "true", "yes", "on")
        elif by_name[key].type == "int":
            kwargs[key] = int(float(raw))
        else:
            kwargs[key] = float(raw)
    return TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# reconstruction loss: (1 - lambda) L1 + lambda (1 - SSIM) / 2
# ---------------------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_g = np.exp(-0.5 * ((np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2) / SSIM_SIGMA) ** 2)
SSIM_KERNEL = _g / _g.sum()
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _blur(x):
    out = convolve1d(x, SSIM_KERNEL, axis=0, mode="constant", cval=0.0)
    return convolve1d(out, SSIM_KERNEL, axis=1, mode="constant", cval=0.0)


def ssim(img_a, img_b):
    """Mean SSIM with an 11x11 gaussian window (sigma 1.5), zero-padded to
    keep the map the same size; unit dynamic range."""
    return ssim_with_grad(img_a, img_b)[0]


def ssim_with_grad(img_a, img_b):
    """Returns (mean SSIM, gradient of the mean w.r.t. img_a)."""
    x = np.asarray(img_a, dtype=np.float64)
    y = np.asarray(img_b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    mu_x = _blur(x)
    mu_y = _blur(y)
    sxx = _blur(x * x) - mu_x * mu_x
    syy = _blur(y * y) - mu_y * mu_y
    sxy = _blur(x * y) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * sxy + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    denom = b1 * b2
    s = (a1 * a2) / denom
    value = float(s.mean())
    # partials of the per-pixel map with respect to its window statistics
    d_mu = (2.0 * mu_y * a2 - 2.0 * mu_x * s * b2) / denom
    d_sxx = -s / b2
    d_sxy = 2.0 * a1 / denom
    total = d_mu - 2.0 * mu_x * d_sxx - mu_y * d_sxy
    grad = (_blur(total) + 2.0 * x * _blur(d_sxx) + y * _blur(d_sxy)) / x.size
    return value, grad


def reconstruction_loss(rendered, target, lambda_dssim=0.2):
    """(1 - lambda) mean-abs + lambda structural dissimilarity.

    Returns (loss, gradient w.r.t. rendered)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    l1 = float(np.abs(diff).mean())
    ssim_value, ssim_grad = ssim_with_grad(rendered, target)
    loss = (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - ssim_value) / 2.0
    grad = (1.0 - lambda_dssim) * np.sign(diff) / diff.size \
        - lambda_dssim * 0.5 * ssim_grad
    return loss, grad


# ---------------------------------------------------------------------------
# resampling between the full-resolution inputs and the PDR training scale
# ---------------------------------------------------------------------------

_AREA_WEIGHTS = {}


def _area_weights(src, dst):
    key = (src, dst)
    if key not in _AREA_WEIGHTS:
        w = np.zeros((dst, src))
        ratio = src / dst
        for i in range(dst):
            lo = i * ratio
            hi = (i + 1) * ratio
            j0 = int(math.floor(lo))
            j1 = int(math.ceil(hi))
            for j in range(j0, min(j1, src)):
                w[i, j] = min(hi, j + 1) - max(lo, j)
        w /= w.sum(axis=1, keepdims=True)
        _AREA_WEIGHTS[key] = w
    return _AREA_WEIGHTS[key]


def resize_area(image, new_h, new_w):
    """Exact box-overlap average, separable; used for float images."""
    h, w = image.shape[:2]
    if (h, w) == (new_h, new_w):
        return image
    rows = _area_weights(h, new_h)
    cols = _area_weights(w, new_w)
    out = np.tensordot(rows, image, axes=(1, 0))
    out = np.tensordot(cols, out, axes=(1, 1))
    return np.swapaxes(out, 0, 1)


def _nearest_indices(src, dst):
    return np.minimum((np.arange(dst) + 0.5) * (src / dst), src - 1).astype(np.int64)


def resize_nearest(labels, new_h, new_w):
    h, w = labels.shape[:2]
    if (h, w) == (new_h, new_w):
        return labels
    ri = _nearest_indices(h, new_h)
    ci = _nearest_indices(w, new_w)
    return labels[np.ix_(ri, ci)]


def resize_maskset(masks: RegionMaskSet, new_h, new_w):
    """Nearest-neighbor resampled masks; regions that vanish are dropped."""
    h, w = masks.shape
    if (h, w) == (new_h, new_w):
        return masks
    regions = []
    for r in masks.regions:
        m = resize_nearest(r.mask, new_h, new_w)
        if m.any():
            regions.append(Region(r.region_id, r.track_id, m))
    return RegionMaskSet(masks.view_id, regions)


# ---------------------------------------------------------------------------
# progressive densification regulation
# ---------------------------------------------------------------------------

@dataclass
class PdrState:
    resolution_scale: float
    densify_interval: int
    threshold_multiplier: float


def pdr_schedule(iteration, config: TrainConfig) -> PdrState:
    """Pure function of the iteration: the resolution scale ramps linearly
    to 1, while interval and threshold follow a half cosine to defaults."""
    if not config.enable_pdr:
        return PdrState(1.0, config.final_densify_interval, 1.0)
    ramp = min(iteration / config.resolution_ramp_end, 1.0) \
        if config.resolution_ramp_end > 0 else 1.0
    scale = config.initial_resolution_scale \
        + (1.0 - config.initial_resolution_scale) * ramp
    frac = min(iteration / config.schedule_end, 1.0) if config.schedule_end > 0 else 1.0
    cos_w = 0.5 * (1.0 + math.cos(math.pi * frac))
    interval = config.final_densify_interval + \
        (config.initial_densify_interval - config.final_densify_interval) * cos_w
    multiplier = 1.0 + (config.initial_threshold_scale - 1.0) * cos_w
    return PdrState(scale, int(round(interval)), multiplier)


# ---------------------------------------------------------------------------
# adaptive density control
# ---------------------------------------------------------------------------

class DensifyStats:
    """Accumulated screen-gradient norms and hit counts since the last
    densify event."""

    def __init__(self, n):
        self.grad_accum = np.zeros(n)
        self.denom = np.zeros(n)

    def add(self, grads: RenderGradients):
        self.grad_accum += grads.grad2d_norm
        self.denom += grads.hit_count

    def mean(self):
        return np.where(self.denom > 0, self.grad_accum / np.maximum(self.denom, 1), 0.0)

    def reset(self, n):
        self.grad_accum = np.zeros(n)
        self.denom = np.zeros(n)


def densify_and_prune(scene: Scene, stats: DensifyStats, config: TrainConfig,
                      pdr: PdrState, extent, rng, optimizer: Adam = None):
    """Clone / split over-threshold Gaussians, prune transparent ones.

    Over-threshold Gaussians are cloned when their largest activated scale
    is below percent_dense * extent and otherwise split into two samples
    drawn from the Gaussian with scales divided by 1.6. Statistics reset
    afterwards. Returns a report dict with the mutation counts.
    """
    n = len(scene)
    mean_grad = stats.mean()
    selected = mean_grad > config.grad_threshold * pdr.threshold_multiplier
    prune = scene.opacities < config.opacity_prune
    selected &= ~prune
    smax = scene.scales.max(axis=1)
    clone_mask = selected & (smax < config.percent_dense * extent)
    split_mask = selected & ~clone_mask

    keep_idx = np.flatnonzero(~(split_mask | prune))
    parts = {name: [getattr(scene, name)[keep_idx]] for name in
             ("positions", "log_scales", "rotations", "opacity_logits",
              "colors", "semantics")}

    n_clone = int(clone_mask.sum())
    if n_clone:
        for name in parts:
            parts[name].append(getattr(scene, name)[clone_mask])

    n_split = int(split_mask.sum())
    if n_split:
        parents = np.flatnonzero(split_mask)
        rep = np.repeat(parents, 2)
        samples = rng.standard_normal((rep.size, 3)) * scene.scales[rep]
        rot = quat_to_rotmat(scene.rotations[rep])
        offsets = np.einsum("nij,nj->ni", rot, samples)
        parts["positions"].append(scene.positions[rep] + offsets)
        parts["log_scales"].append(scene.log_scales[rep] - np.log(1.6))
        for name in ("rotations", "opacity_logits", "colors", "semantics"):
            parts[name].append(getattr(scene, name)[rep])

    for name in parts:
        setattr(scene, name, np.concatenate(parts[name], axis=0))
    scene.validate()
    if optimizer is not None:
        optimizer.reindex(("position", "log_scale", "rotation", "opacity",
                           "color", "semantic"), keep_idx,
                          len(scene) - keep_idx.size)
    stats.reset(len(scene))
    return {"cloned": n_clone, "split": n_split, "pruned": int(prune.sum()),
            "total": len(scene)}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainView:
    camera: Camera
    image: np.ndarray            # (H, W, 3) target in [0, 1]
    masks: RegionMaskSet
    features: FeatureMap


@dataclass
class TrainData:
    views: list
    bank: TextBank


@dataclass
class TrainLog:
    iterations: list = field(default_factory=list)
    loss_total: list = field(default_factory=list)
    loss_rgb: list = field(default_factory=list)
    loss_sem: list = field(default_factory=list)
    loss_2d: list = field(default_factory=list)
    loss_3d: list = field(default_factory=list)
    gaussian_count: list = field(default_factory=list)
    densify_events: list = field(default_factory=list)

    def append(self, it, total, rgb, sem, l2d, l3d, count):
        self.iterations.append(it)
        self.loss_total.append(total)
        self.loss_rgb.append(rgb)
        self.loss_sem.append(sem)
        self.loss_2d.append(l2d)
        self.loss_3d.append(l3d)
        self.gaussian_count.append(count)

    def count_at(self, iteration):
        i = min(iteration, len(self.gaussian_count) - 1)
        return self.gaussian_count[i]

    def save(self, path):
        with open(path, "w") as f:
            f.write("# iter total rgb sem cons2d cons3d gaussians\n")
            for row in zip(self.iterations, self.loss_total, self.loss_rgb,
                           self.loss_sem, self.loss_2d, self.loss_3d,
                           self.gaussian_count):
                f.write("%d %.6g %.6g %.6g %.6g %.6g %d\n" % row)


class ProviderError(RuntimeError):
    """Raised when a view's supervision cannot be built or consumed."""

    def __init__(self, view_index, message):
        super().__init__(f"view {view_index}: {message}")
        self.view_index = view_index


def scene_extent_from_cameras(cameras):
    centers = np.array([c.center for c in cameras])
    if len(centers) < 2:
        return 1.0
    radius = np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()
    return float(radius) if radius > 0 else 1.0


def build_supervision(data: TrainData, use_sac):
    """Offline index-map construction, one map per training view."""
    maps = []
    for k, view in enumerate(data.views):
        try:
            if use_sac:
                rep = representative_features(view.features, view.masks)
                maps.append(assign_indices(rep, data.bank, view.masks))
            else:
                maps.append(per_pixel_indices(view.features, view.masks, data.bank))
        except ValueError as exc:
            raise ProviderError(k, str(exc))
    return maps


def train(scene: Scene, data: TrainData, config: TrainConfig):
    """Optimize the scene end to end; returns (scene, decoder, log).

    Iterations below phase_switch use reconstruction + semantic index
    supervision; later iterations swap the semantic term for the coherence
    losses (pseudo-labels recomputed every iteration for one round-robin
    view). With both coherence toggles off the semantic term simply
    continues, mirroring the compact-supervision-only ablation.
    """
    rng = np.random.default_rng(config.seed)
    n_views = len(data.views)
    if n_views == 0:
        raise ValueError("no training views")
    class_count = len(data.bank.labels)
    scene.class_count = class_count
    decoder = Decoder.initialized(class_count, scene.semantic_dim, rng)
    index_maps = build_supervision(data, config.enable_sac)

    opt = Adam()
    for name, lr in (("position", config.lr_position), ("log_scale", config.lr_scale),
                     ("rotation", config.lr_rotation), ("opacity", config.lr_opacity),
                     ("color", config.lr_color), ("semantic", config.lr_semantic)):
        opt.register(name, (len(scene),) + _GROUP_SHAPES[name](scene), lr)
    opt.register("decoder_w", decoder.weight.shape, config.lr_decoder)
    opt.register("decoder_b", decoder.bias.shape, config.lr_decoder)

    stats = DensifyStats(len(scene))
    extent = scene_extent_from_cameras([v.camera for v in data.views])
    log = TrainLog()

    for step in range(config.total_iterations):
        pdr = pdr_schedule(step, config)
        k = step % n_views
        view = data.views[k]
        cam = view.camera if pdr.resolution_scale >= 1.0 \
            else view.camera.scaled(pdr.resolution_scale)
        target = resize_area(view.image, cam.height, cam.width)

        forward = rasterize(scene, cam)
        loss_rgb, grad_color = reconstruction_loss(forward.color, target,
                                                   config.lambda_dssim)
        grad_feat = np.zeros_like(forward.feature)
        grad_w = np.zeros_like(decoder.weight)
        grad_b = np.zeros_like(decoder.bias)
        sem_direct = np.zeros_like(scene.semantics)
        loss_sem = loss_2d = loss_3d = 0.0

        phase_one = step < config.phase_switch
        coherent = config.enable_3dcr_2d or config.enable_3dcr_3d

        if phase_one or not coherent:
            logits = decode(forward.feature, decoder)
            target_map = resize_nearest(index_maps[k].data, cam.height, cam.width)
            try:
                loss_sem, grad_logits = cross_entropy(logits, target_map)
            except ValueError as exc:
                raise ProviderError(k, str(exc))
            grad_feat += grad_logits @ decoder.weight
            grad_w += np.einsum("hwc,hwd->cd", grad_logits, forward.feature)
            grad_b += grad_logits.sum(axis=(0, 1))
        else:
            neighbors = [i for i in (k - 1, k, k + 1) if 0 <= i < n_views]
            outs, masksets, logit_maps = [], [], []
            for i in neighbors:
                out_i = forward if i == k else rasterize(
                    scene, data.views[i].camera if pdr.resolution_scale >= 1.0
                    else data.views[i].camera.scaled(pdr.resolution_scale))
                outs.append(out_i)
                masksets.append(resize_maskset(data.views[i].masks,
                                               out_i.color.shape[0],
                                               out_i.color.shape[1]))
                logit_maps.append(decode(out_i.feature, decoder))
            current = neighbors.index(k)
            logits = logit_maps[current]
            if config.enable_3dcr_2d and len(masksets[current]) > 0:
                pseudo, _ = vote_pseudo_labels(logit_maps, masksets, current)
                loss_2d, grad_logits = cross_entropy(logits, pseudo)
                grad_feat += grad_logits @ decoder.weight
                grad_w += np.einsum("hwc,hwd->cd", grad_logits, forward.feature)
                grad_b += grad_logits.sum(axis=(0, 1))
            if config.enable_3dcr_3d:
                matched = []
                for region in masksets[current].regions:
                    match = match_gaussians(outs, masksets, region.track_id, scene)
                    if match:
                        matched.append(consistency_loss_3d(match, scene))
                if matched:
                    inv = config.weight_3d / len(matched)
                    for l3, idx, g3 in matched:
                        loss_3d += l3 / len(matched)
                        sem_direct[idx] += inv * g3

        grads = rasterize_backward(scene, cam, forward, grad_color, grad_feat)
        stats.add(grads)

        opt.set_lr("position", exponential_decay(
            config.lr_position, config.lr_position_final,
            step / config.total_iterations))
        params = {"position": scene.positions, "log_scale": scene.log_scales,
                  "rotation": scene.rotations, "opacity": scene.opacity_logits,
                  "color": scene.colors, "semantic": scene.semantics,
                  "decoder_w": decoder.weight, "decoder_b": decoder.bias}
        gmap = {"position": grads.position, "log_scale": grads.log_scale,
                "rotation": grads.rotation, "opacity": grads.opacity_logit,
                "color": grads.color,
                "semantic": grads.semantic + sem_direct,
                "decoder_w": grad_w, "decoder_b": grad_b}
        opt.step(params, gmap)

        total = loss_rgb + loss_sem + loss_2d + config.weight_3d * loss_3d
        log.append(step, total, loss_rgb, loss_sem, loss_2d, loss_3d, len(scene))

        if (config.densify_from <= step < config.densify_until
                and step % pdr.densify_interval == 0 and step > 0):
            report = densify_and_prune(scene, stats, config, pdr, extent, rng, opt)
            log.densify_events.append((step, report))

    return scene, decoder, log


_GROUP_SHAPES = {
    "position": lambda s: (3,),
    "log_scale": lambda s: (3,),
    "rotation": lambda s: (4,),
    "opacity": lambda s: (),
    "color": lambda s: (3,),
    "semantic": lambda s: (s.semantic_dim,),
}


# ---------------------------------------------------------------------------
# checkpoints: SGS1 scene plus a DEC1 decoder sidecar
# ---------------------------------------------------------------------------

def save_decoder(decoder: Decoder, path):
    c, d = decoder.weight.shape
    with open(path, "w") as f:
        f.write(f"DEC1 {c} {d}\n")
        for row in decoder.weight:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")
        f.write(" ".join(repr(float(v)) for v in decoder.bias) + "\n")


def load_decoder(path) -> Decoder:
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 3 or header[0] != "DEC1":
            raise ValueError(f"{path}: not a DEC1 file")
        c, d = int(header[1]), int(header[2])
        values = f.read().split()
    if len(values) != c * d + c:
        raise ValueError(f"{path}: expected {c * d + c} values, got {len(values)}")
    data = np.array(values, dtype=np.float64)
    return Decoder(data[:c * d].reshape(c, d), data[c * d:])


def save_checkpoint(dirpath, scene: Scene, decoder: Decoder, log: TrainLog = None):
    import os
    os.makedirs(dirpath, exist_ok=True)
    save_scene(scene, os.path.join(dirpath, "scene.sgs1"))
    save_decoder(decoder, os.path.join(dirpath, "decoder.dec1"))
    if log is not None:
        log.save(os.path.join(dirpath, "train_log.txt"))


def load_checkpoint(dirpath):
    import os
    from .core import load_scene
    scene = load_scene(os.path.join(dirpath, "scene.sgs1"))
    decoder = load_decoder(os.path.join(dirpath, "decoder.dec1"))
    return scene, decoder
