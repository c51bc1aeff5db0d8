"""Independent reference implementations used to check the engine.

Everything here is deliberately written from the definitions, not from the
package internals: projection goes through scipy rotations, blending walks
Gaussians per pixel, SSIM slides an explicit window, cross entropy uses a
direct log-softmax. Keep these dumb.
"""

import numpy as np
from scipy.spatial.transform import Rotation

ALPHA_MAX = 0.99
T_EPS = 1e-4
DILATION = 0.3
RADIUS_MULT = 3.0


def rotmat_from_quat_wxyz(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    return Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()


def render_bruteforce(scene, camera):
    """Per-pixel blending oracle: evaluates every Gaussian at every pixel,
    sorts by depth (ties by index), and applies the same clamps as the
    renderer (cutoff disc, alpha <= 0.99, stop at T < 1e-4).

    Returns (color, feature, final_T, max_contributor, contributor_count).
    """
    h, w = camera.height, camera.width
    d = scene.semantic_dim
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5
    py = ys + 0.5

    n = len(scene)
    splats = []
    R = camera.rotation
    fx, fy = camera.focal
    cx, cy = camera.principal_point
    for i in range(n):
        cam = R @ scene.positions[i] + camera.translation
        if cam[2] <= camera.near_clip:
            continue
        x, y, z = cam
        mean = np.array([fx * x / z + cx, fy * y / z + cy])
        rot = rotmat_from_quat_wxyz(scene.rotations[i])
        s2 = np.exp(2.0 * scene.log_scales[i])
        sigma = rot @ np.diag(s2) @ rot.T
        jac = np.array([[fx / z, 0.0, -fx * x / z ** 2],
                        [0.0, fy / z, -fy * y / z ** 2]])
        m = jac @ R
        cov2d = m @ sigma @ m.T + DILATION * np.eye(2)
        eigvals = np.linalg.eigvalsh(cov2d)
        radius = RADIUS_MULT * np.sqrt(max(eigvals[-1], 0.0))
        if (mean[0] + radius < 0 or mean[0] - radius > w
                or mean[1] + radius < 0 or mean[1] - radius > h):
            continue
        conic = np.linalg.inv(cov2d)
        splats.append((z, i, mean, conic, radius))
    splats.sort(key=lambda rec: (rec[0], rec[1]))

    color = np.zeros((h, w, 3))
    feature = np.zeros((h, w, d))
    trans = np.ones((h, w))
    best_w = np.zeros((h, w))
    best = np.full((h, w), -1, dtype=np.int64)
    count = np.zeros((h, w), dtype=np.int64)
    for z, i, mean, conic, radius in splats:
        dx = px - mean[0]
        dy = py - mean[1]
        q = conic[0, 0] * dx ** 2 + 2.0 * conic[0, 1] * dx * dy + conic[1, 1] * dy ** 2
        alpha = 1.0 / (1.0 + np.exp(-scene.opacity_logits[i])) * np.exp(-0.5 * np.maximum(q, 0.0))
        alpha = np.where(dx ** 2 + dy ** 2 > radius ** 2, 0.0, alpha)
        alpha = np.minimum(alpha, ALPHA_MAX)
        active = (trans >= T_EPS) & (alpha > 0.0)
        wgt = np.where(active, trans * alpha, 0.0)
        color += wgt[:, :, None] * np.clip(scene.colors[i], 0.0, 1.0)
        feature += wgt[:, :, None] * scene.semantics[i]
        count += active
        better = wgt > best_w
        best_w = np.where(better, wgt, best_w)
        best = np.where(better, i, best)
        trans = np.where(active, trans * (1.0 - alpha), trans)
    color += trans[:, :, None] * scene.background_color
    return color, feature, trans, best, count


def finite_difference(f, x, h=1e-4):
    """Central finite differences of scalar f over every entry of x."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        k = it.multi_index
        orig = x[k]
        x[k] = orig + h
        fp = f(x)
        x[k] = orig - h
        fm = f(x)
        x[k] = orig
        grad[k] = (fp - fm) / (2.0 * h)
        it.iternext()
    return grad


def gradient_errors(analytic, numeric, noise_floor=1e-7):
    """Relative errors |a-n| / max(|a|, |n|); entries where both magnitudes
    sit below the finite-difference noise floor compare as exact."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.where(scale < noise_floor, 0.0, np.abs(analytic - numeric) / np.maximum(scale, noise_floor))
    return err


def cross_entropy_oracle(logits, target, ignore=-1):
    """Mean softmax cross entropy over labeled pixels, direct per pixel."""
    h, w, c = logits.shape
    losses = []
    for i in range(h):
        for j in range(w):
            t = target[i, j]
            if t == ignore:
                continue
            row = logits[i, j] - logits[i, j].max()
            logp = row - np.log(np.exp(row).sum())
            losses.append(-logp[t])
    if not losses:
        raise ValueError("no labeled pixels")
    return float(np.mean(losses))


def ssim_oracle(img_a, img_b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Sliding-window SSIM with a gaussian window and zero padding, applied
    per channel and averaged over everything."""
    half = window // 2
    g = np.exp(-0.5 * ((np.arange(window) - half) / sigma) ** 2)
    g /= g.sum()
    w2d = np.outer(g, g)
    c1 = k1 ** 2
    c2 = k2 ** 2
    h, w, ch = img_a.shape
    total = []
    for c in range(ch):
        a = np.pad(img_a[:, :, c], half)
        b = np.pad(img_b[:, :, c], half)
        for i in range(h):
            for j in range(w):
                wa = a[i:i + window, j:j + window]
                wb = b[i:i + window, j:j + window]
                mu_a = (w2d * wa).sum()
                mu_b = (w2d * wb).sum()
                var_a = (w2d * wa * wa).sum() - mu_a ** 2
                var_b = (w2d * wb * wb).sum() - mu_b ** 2
                cov = (w2d * wa * wb).sum() - mu_a * mu_b
                val = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
                      ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
                total.append(val)
    return float(np.mean(total))


def cosine_argmax_oracle(rep, bank):
    """Per-column argmax of cosine similarity against bank rows, lowest
    index on ties."""
    out = []
    for col in rep.T:
        sims = []
        for row in bank:
            sims.append(float(np.dot(col, row) /
                              (np.linalg.norm(col) * np.linalg.norm(row))))
        best = 0
        for k in range(1, len(sims)):
            if sims[k] > sims[best]:
                best = k
        out.append(best)
    return np.array(out, dtype=np.int64)


def miou_oracle(pred, truth, n_classes, ignore=-1):
    """Set-arithmetic IoU per class; classes absent from both sides skipped."""
    keep = truth != ignore
    ious = {}
    for c in range(n_classes):
        p = set(zip(*np.nonzero((pred == c) & keep)))
        t = set(zip(*np.nonzero(truth == c)))
        if not p and not t:
            continue
        union = p | t
        ious[c] = len(p & t) / len(union)
    return ious
