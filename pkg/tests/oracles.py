"""Independent oracles used by the test suite.

These deliberately avoid the library's representative/closed-form machinery:
the pose metric is checked against direct RMS displacement of the stored
surface samples, and gradients against central finite differences.
"""

import math

import numpy as np

from posevalid.geometry import rotation_about_axis, symmetry_group


def rms_displacement(a, b, model, g=np.eye(3)):
    """Mean squared surface displacement between pose a and pose b∘g, rooted."""
    x = model.surface_samples
    ya = x @ a.rotation.T + a.translation
    yb = x @ (b.rotation @ g).T + b.translation
    return math.sqrt(((ya - yb) ** 2).sum(axis=1).mean())


def rms_oracle_discrete(a, b, model):
    """Brute-force min over the symmetry group of the RMS displacement."""
    return min(rms_displacement(a, b, model, g) for g in symmetry_group(model.symmetry))


def rms_sq_at_angle(a, b, model, phi):
    m = rotation_about_axis(model.symmetry.axis, phi)
    x = model.surface_samples
    ya = x @ a.rotation.T + a.translation
    yb = x @ (b.rotation @ m).T + b.translation
    return ((ya - yb) ** 2).sum(axis=1).mean()


def revolution_angle_scan(a, b, model, n_angles):
    """Squared RMS displacement at every sampled angle.

    The per-angle value is the same sample sum as rms_sq_at_angle, factored by
    linearity of the mean so the scan is affordable (checked against the naive
    form in the tests).
    """
    x = model.surface_samples
    w = model.symmetry.axis
    za = x @ a.rotation.T
    rb_x = x @ b.rotation.T
    rb_w = b.rotation @ w
    rb_wx = np.cross(w, x) @ b.rotation.T
    n = len(x)
    s1 = (za * rb_x).sum() / n
    s2 = ((x @ w) * (za @ rb_w)).sum() / n
    s3 = (za * rb_wx).sum() / n
    mean_sq = (x * x).sum() / n
    dt = a.translation - b.translation
    phis = np.linspace(0.0, 2.0 * np.pi, n_angles, endpoint=False)
    inner = np.cos(phis) * (s1 - s2) + s2 + np.sin(phis) * s3
    return phis, dt @ dt + 2.0 * mean_sq - 2.0 * inner


def rms_oracle_revolution(a, b, model, n_angles=100_000):
    _, vals = revolution_angle_scan(a, b, model, n_angles)
    return math.sqrt(max(0.0, float(vals.min())))


def finite_diff_max_rel_err(params, loss_fn, rng, probes_per_tensor=4, h=1e-5):
    """Max relative error between analytic grads and central differences.

    loss_fn() -> (loss, grads dict) evaluated at the current params; params
    are float64 and perturbed in place.
    """
    _, grads = loss_fn()
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if p.size <= probes_per_tensor:
            idxs = [tuple(np.unravel_index(i, p.shape)) for i in range(p.size)]
        else:
            idxs = {tuple(rng.integers(0, s) for s in p.shape)
                    for _ in range(probes_per_tensor)}
        for idx in idxs:
            orig = p[idx]
            p[idx] = orig + h
            lp, _ = loss_fn()
            p[idx] = orig - h
            lm, _ = loss_fn()
            p[idx] = orig
            num = (lp - lm) / (2.0 * h)
            rel = abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-8)
            worst = max(worst, rel)
    return worst
