"""Procedural ground-truth scenes with exact masks, correspondences, and
class-prototype features.

Objects are axis-aligned Gaussian blob clusters on a table-top layout,
observed from a camera ring. Targets are rendered by this package's own
rasterizer, masks are exact dominance silhouettes, per-pixel features are
class prototypes plus optional iid noise, and track ids are object ids, so
every quantity a provider would normally estimate has known ground truth.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (Camera, Scene, inverse_sigmoid, load_scene,
                   look_at_camera, save_scene)
from .rasterizer import rasterize
from .sac import (FeatureMap, Region, RegionMaskSet, TextBank, UNLABELED,
                  load_masks, load_tensor, save_masks, save_tensor)
from .trainer import TrainData, TrainView

# Feature noise at which roughly a quarter of the pixels misclassify under
# per-pixel cosine matching while region averages still classify every
# region correctly (see test_synthdata for the derivation sweep).
NOISY_SIGMA = 1.0


@dataclass
class SceneSpec:
    seed: int = 0
    object_count: int = 5
    class_labels: tuple = ("chair", "table", "plant", "lamp", "sofa")
    feature_dim: int = 8     # provider feature dimension D
    semantic_dim: int = 3    # per-Gaussian embedding dimension d
    noise_sigma: float = 0.0
    image_width: int = 128
    image_height: int = 128
    camera_count: int = 8
    eval_every: int = 4          # every n-th camera is held out
    ring_radius: float = 4.0
    ring_height: float = 1.6
    layout_radius: float = 1.1
    gaussians_per_object: int = 60
    init_points_per_object: int = 25
    focal_factor: float = 0.9    # focal = factor * image width
    min_prototype_angle_deg: float = 10.0

    def __post_init__(self):
        self.class_labels = tuple(self.class_labels)
        if self.object_count < 2:
            raise ValueError("need at least two objects")
        if len(self.class_labels) < 2:
            raise ValueError("need at least two classes")
        if self.camera_count < 2:
            raise ValueError("need at least two cameras")
        if self.ring_radius <= self.layout_radius + 1.0:
            raise ValueError("camera ring lies inside the object layout")


@dataclass
class Bundle:
    spec: SceneSpec
    gt_scene: Scene
    init_scene: Scene
    cameras: list
    images: list          # (H, W, 3) float targets, one per view
    masksets: list        # RegionMaskSet per view
    feature_maps: list    # FeatureMap per view
    label_maps: list      # (H, W) int ground truth per view
    bank: TextBank
    corruptions: list = field(default_factory=list)

    @property
    def train_indices(self):
        return [i for i in range(len(self.cameras))
                if (i + 1) % self.spec.eval_every != 0]

    @property
    def eval_indices(self):
        return [i for i in range(len(self.cameras))
                if (i + 1) % self.spec.eval_every == 0]

    def train_data(self) -> TrainData:
        views = [TrainView(self.cameras[i], self.images[i], self.masksets[i],
                           self.feature_maps[i]) for i in self.train_indices]
        return TrainData(views, self.bank)

    def eval_views(self):
        return [(self.cameras[i], self.images[i], self.label_maps[i])
                for i in self.eval_indices]


def class_prototypes(rng, class_count, dim, min_angle_deg):
    """Random unit prototypes with a minimum pairwise angle."""
    min_cos = np.cos(np.radians(min_angle_deg))
    for _ in range(1000):
        v = rng.normal(size=(class_count, dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        sims = v @ v.T
        np.fill_diagonal(sims, -1.0)
        if sims.max() < min_cos:
            return v
    raise ValueError("could not draw sufficiently separated prototypes")


def class_palette(count):
    """Distinct saturated colors, one per class."""
    return np.array([colorsys.hsv_to_rgb(i / count, 0.75, 0.9)
                     for i in range(count)])


def ring_cameras(spec: SceneSpec):
    """Evenly spaced cameras on a ring looking at the layout center.

    Pure function of the spec, so bundles stored on disk do not need to
    serialize camera floats.
    """
    cams = []
    focal = spec.focal_factor * spec.image_width
    for i in range(spec.camera_count):
        angle = 2.0 * np.pi * i / spec.camera_count + 0.35
        pos = (spec.ring_radius * np.cos(angle),
               spec.ring_radius * np.sin(angle), spec.ring_height)
        cams.append(look_at_camera(pos, (0.0, 0.0, 0.0), focal,
                                   spec.image_width, spec.image_height))
    return cams


def _object_centers(rng, spec):
    centers = []
    min_dist = 2.0 * spec.layout_radius / max(spec.object_count - 1, 1) * 0.9
    for _ in range(10000):
        c = np.array([*rng.uniform(-spec.layout_radius, spec.layout_radius, 2),
                      rng.uniform(-0.25, 0.25)])
        if np.hypot(c[0], c[1]) > spec.layout_radius:
            continue
        if all(np.linalg.norm(c - p) >= min_dist for p in centers):
            centers.append(c)
        if len(centers) == spec.object_count:
            return np.array(centers)
    raise ValueError("could not place objects; layout too crowded")


def generate(spec: SceneSpec) -> Bundle:
    """Deterministic ground-truth bundle for a scene spec."""
    rng = np.random.default_rng(spec.seed)
    n_obj = spec.object_count
    n_cls = len(spec.class_labels)
    prototypes = class_prototypes(rng, n_cls, spec.feature_dim,
                                  spec.min_prototype_angle_deg)
    bank = TextBank(prototypes, list(spec.class_labels))
    palette = class_palette(n_cls)
    obj_class = np.arange(n_obj) % n_cls

    cameras = ring_cameras(spec)
    for cam in cameras:
        if np.linalg.norm(cam.center[:2]) <= spec.layout_radius:
            raise ValueError("camera inside object bounds")

    centers = _object_centers(rng, spec)
    k = spec.gaussians_per_object
    positions, log_scales, opacities, colors = [], [], [], []
    for o in range(n_obj):
        spread = rng.uniform(0.22, 0.4, 3) * np.array([1.0, 1.0, 0.8])
        positions.append(centers[o] + rng.normal(size=(k, 3)) * spread)
        log_scales.append(np.log(rng.uniform(0.05, 0.11, (k, 3))))
        opacities.append(inverse_sigmoid(rng.uniform(0.85, 0.97, k)))
        base = palette[obj_class[o]]
        colors.append(np.clip(base * rng.uniform(0.85, 1.15, (k, 1)), 0.0, 1.0))
    n_total = n_obj * k
    gt_scene = Scene(np.concatenate(positions), np.concatenate(log_scales),
                     np.tile((1.0, 0.0, 0.0, 0.0), (n_total, 1)),
                     np.concatenate(opacities), np.concatenate(colors),
                     np.zeros((n_total, spec.semantic_dim)),
                     background_color=(0.0, 0.0, 0.0), class_count=n_cls)
    gaussian_object = np.repeat(np.arange(n_obj), k)

    # render targets and per-object blend weights (one-hot indicator render)
    onehot = np.zeros((n_total, n_obj))
    onehot[np.arange(n_total), gaussian_object] = 1.0
    weight_scene = gt_scene.replace_semantics(onehot)
    images, masksets, label_maps, feature_maps = [], [], [], []
    for view_id, cam in enumerate(cameras):
        out = rasterize(weight_scene, cam)
        images.append(out.color)
        weights = out.feature  # (H, W, n_obj) summed blend weight per object
        dominant = np.argmax(weights, axis=2)
        dom_weight = np.take_along_axis(weights, dominant[:, :, None], axis=2)[:, :, 0]
        labeled = dom_weight > 0.5
        labels = np.where(labeled, obj_class[dominant], UNLABELED)
        label_maps.append(labels.astype(np.int64))
        regions = []
        for o in range(n_obj):
            mask = labeled & (dominant == o)
            if mask.any():
                regions.append(Region(len(regions), o, mask))
        masksets.append(RegionMaskSet(view_id, regions))

    # per-pixel features: class prototype plus iid noise inside each mask
    for view_id, masks in enumerate(masksets):
        data = np.zeros((spec.feature_dim, spec.image_height, spec.image_width))
        for region in masks.regions:
            proto = prototypes[obj_class[region.track_id]]
            npx = int(region.mask.sum())
            noise = spec.noise_sigma * rng.normal(size=(npx, spec.feature_dim))
            data[:, region.mask] = (proto[None, :] + noise).T
        feature_maps.append(FeatureMap(data, view_id))

    for view_id, masks in enumerate(masksets):
        if len(masks) == 0:
            raise ValueError(f"degenerate spec: no object visible in view {view_id}")

    # training initialization: blurred point cloud, neutral appearance
    m = spec.init_points_per_object
    init_pos = np.concatenate([
        centers[o] + rng.normal(size=(m, 3)) * 0.35 for o in range(n_obj)])
    init_scene = Scene(
        init_pos, np.full((n_obj * m, 3), np.log(0.13)),
        np.tile((1.0, 0.0, 0.0, 0.0), (n_obj * m, 1)),
        np.full(n_obj * m, inverse_sigmoid(0.15)),
        np.full((n_obj * m, 3), 0.5) + rng.uniform(-0.05, 0.05, (n_obj * m, 3)),
        rng.normal(size=(n_obj * m, spec.semantic_dim)) * 0.1,
        background_color=(0.0, 0.0, 0.0), class_count=n_cls)

    return Bundle(spec, gt_scene, init_scene, cameras, images, masksets,
                  feature_maps, label_maps, bank)


def corrupt_view_labels(bundle: Bundle, view_id, region_id, wrong_class) -> Bundle:
    """New bundle where one view's region carries the wrong class: its
    feature-map pixels are replaced by the wrong prototype, so every
    supervision signal derived from that view inherits the error. All other
    views are untouched."""
    if not 0 <= view_id < len(bundle.cameras):
        raise ValueError(f"unknown view {view_id}")
    if not 0 <= wrong_class < len(bundle.bank.labels):
        raise ValueError(f"unknown class {wrong_class}")
    masks = bundle.masksets[view_id]
    region = next((r for r in masks.regions if r.region_id == region_id), None)
    if region is None:
        raise ValueError(f"unknown region {region_id} in view {view_id}")
    fmaps = list(bundle.feature_maps)
    data = fmaps[view_id].data.copy()
    proto = bundle.bank.vectors[wrong_class]
    data[:, region.mask] = proto[:, None]
    fmaps[view_id] = FeatureMap(data, view_id)
    return replace(bundle, feature_maps=fmaps,
                   corruptions=bundle.corruptions + [(view_id, region_id, wrong_class)])


# ---------------------------------------------------------------------------
# binary PPM (P6) targets: zero-dependency bit-exact image files
# ---------------------------------------------------------------------------

def save_ppm(image, path):
    data = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def load_ppm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: not a binary PPM")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        raw = f.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise ValueError(f"{path}: truncated PPM payload")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / maxval


def _labels_to_maskset(labels, class_count):
    regions = []
    for c in range(class_count):
        mask = labels == c
        if mask.any():
            regions.append(Region(c, c, mask))
    return RegionMaskSet(0, regions)


def _maskset_to_labels(masks, shape):
    labels = np.full(shape, UNLABELED, dtype=np.int64)
    for r in masks.regions:
        labels[r.mask] = r.track_id
    return labels


def save_bundle(bundle: Bundle, dirpath):
    os.makedirs(dirpath, exist_ok=True)
    spec = bundle.spec
    with open(os.path.join(dirpath, "spec.txt"), "w") as f:
        f.write(f"seed = {spec.seed}\n")
        f.write(f"object_count = {spec.object_count}\n")
        f.write(f"classes = {','.join(spec.class_labels)}\n")
        f.write(f"feature_dim = {spec.feature_dim}\n")
        f.write(f"semantic_dim = {spec.semantic_dim}\n")
        f.write(f"noise_sigma = {spec.noise_sigma!r}\n")
        f.write(f"image_width = {spec.image_width}\n")
        f.write(f"image_height = {spec.image_height}\n")
        f.write(f"camera_count = {spec.camera_count}\n")
        f.write(f"eval_every = {spec.eval_every}\n")
        f.write(f"ring_radius = {spec.ring_radius!r}\n")
        f.write(f"ring_height = {spec.ring_height!r}\n")
        f.write(f"layout_radius = {spec.layout_radius!r}\n")
        f.write(f"gaussians_per_object = {spec.gaussians_per_object}\n")
        f.write(f"init_points_per_object = {spec.init_points_per_object}\n")
        f.write(f"focal_factor = {spec.focal_factor!r}\n")
        f.write(f"min_prototype_angle_deg = {spec.min_prototype_angle_deg!r}\n")
        for view_id, region_id, wrong in bundle.corruptions:
            f.write(f"corrupt = {view_id},{region_id},{wrong}\n")
    save_scene(bundle.gt_scene, os.path.join(dirpath, "scene.sgs1"))
    save_scene(bundle.init_scene, os.path.join(dirpath, "init.sgs1"))
    save_tensor(bundle.bank.vectors, os.path.join(dirpath, "bank.fts1"))
    n_cls = len(bundle.bank.labels)
    for i in range(len(bundle.cameras)):
        save_ppm(bundle.images[i], os.path.join(dirpath, f"view_{i:03d}.ppm"))
        save_masks(bundle.masksets[i], os.path.join(dirpath, f"view_{i:03d}.msk1"))
        save_tensor(bundle.feature_maps[i].data,
                    os.path.join(dirpath, f"view_{i:03d}.fts1"))
        save_masks(_labels_to_maskset(bundle.label_maps[i], n_cls),
                   os.path.join(dirpath, f"labels_{i:03d}.msk1"))


def parse_spec_file(path):
    values = {}
    corruptions = []
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key == "corrupt":
                view_id, region_id, wrong = (int(v) for v in raw.split(","))
                corruptions.append((view_id, region_id, wrong))
            else:
                values[key] = raw
    ints = {"seed", "object_count", "feature_dim", "semantic_dim",
            "image_width", "image_height", "camera_count", "eval_every",
            "gaussians_per_object", "init_points_per_object"}
    floats = {"noise_sigma", "ring_radius", "ring_height", "layout_radius",
              "focal_factor", "min_prototype_angle_deg"}
    kwargs = {}
    for key, raw in values.items():
        if key == "classes":
            kwargs["class_labels"] = tuple(v.strip() for v in raw.split(","))
        elif key in ints:
            kwargs[key] = int(raw)
        elif key in floats:
            kwargs[key] = float(raw)
        else:
            raise ValueError(f"unknown scene spec key: {key}")
    return SceneSpec(**kwargs), corruptions


def load_bundle(dirpath) -> Bundle:
    spec, corruptions = parse_spec_file(os.path.join(dirpath, "spec.txt"))
    cameras = ring_cameras(spec)
    n_cls = len(spec.class_labels)
    gt_scene = load_scene(os.path.join(dirpath, "scene.sgs1"))
    init_scene = load_scene(os.path.join(dirpath, "init.sgs1"))
    bank = TextBank(load_tensor(os.path.join(dirpath, "bank.fts1")),
                    list(spec.class_labels))
    images, masksets, feature_maps, label_maps = [], [], [], []
    for i in range(len(cameras)):
        images.append(load_ppm(os.path.join(dirpath, f"view_{i:03d}.ppm")))
        masksets.append(load_masks(os.path.join(dirpath, f"view_{i:03d}.msk1"),
                                   view_id=i))
        feature_maps.append(FeatureMap(
            load_tensor(os.path.join(dirpath, f"view_{i:03d}.fts1")), i))
        lbl_masks = load_masks(os.path.join(dirpath, f"labels_{i:03d}.msk1"))
        label_maps.append(_maskset_to_labels(
            lbl_masks, (spec.image_height, spec.image_width)))
    return Bundle(spec, gt_scene, init_scene, cameras, images, masksets,
                  feature_maps, label_maps, bank, corruptions)


def reference_spec(seed=7):
    """The repo-pinned reference scene: 5 objects, 8 cameras, 128x128."""
    return SceneSpec(seed=seed)
