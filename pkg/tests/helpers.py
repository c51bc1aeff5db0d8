"""Shared fixtures: random scenes and cameras for renderer tests."""

import numpy as np

from semsplat.core import Camera, Scene, inverse_sigmoid


def make_camera(width=32, height=32, focal=40.0):
    return Camera((focal, focal), (width / 2.0, height / 2.0), width, height,
                  np.eye(3), np.zeros(3))


def random_scene(rng, n=50, d=3, background=None, class_count=3):
    """Scene inside the canonical test camera frustum.

    Opacity logits stay in [-2, 2] so alpha never reaches the 0.99 clamp and
    the rendered function stays smooth for finite-difference checks.
    """
    z = rng.uniform(1.5, 4.0, n)
    xy = rng.uniform(-0.28, 0.28, (n, 2)) * z[:, None]
    positions = np.column_stack([xy, z])
    log_scales = rng.uniform(np.log(0.03), np.log(0.25), (n, 3))
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    opacity_logits = rng.uniform(-2.0, 2.0, n)
    colors = rng.uniform(0.05, 0.95, (n, 3))
    semantics = rng.normal(size=(n, d))
    if background is None:
        background = rng.uniform(0.0, 1.0, 3)
    return Scene(positions, log_scales, rotations, opacity_logits, colors,
                 semantics, background_color=background, class_count=class_count)
