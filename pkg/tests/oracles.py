"""Independent reference computations for the test suite.

Everything here is numpy/scipy only and deliberately avoids importing the
package, so expected values are pinned down by a second, structurally
different implementation (Runge-Kutta flow instead of scaling and squaring,
explicit loops instead of batched tensor ops).
"""

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.special import logsumexp


# --------------------------------------------------------------------------- #
# Flow integration
# --------------------------------------------------------------------------- #

def sample_velocity(psi: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Linearly interpolate a (2, h, w) velocity field at (2, M) absolute
    (row, col) points, clamping to the border outside the domain."""
    vr = map_coordinates(psi[0], points, order=1, mode="nearest")
    vc = map_coordinates(psi[1], points, order=1, mode="nearest")
    return np.stack([vr, vc])


def rk4_flow(psi: np.ndarray, steps: int = 64) -> np.ndarray:
    """Integrate dx/dt = psi(x) from t = 0 to 1 for every grid point with
    classical 4th-order Runge-Kutta. Returns the (2, h, w) map of arrival
    coordinates, comparable to a deformation field."""
    psi = np.asarray(psi, dtype=np.float64)
    h, w = psi.shape[1:]
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    x = np.stack([rr, cc]).astype(np.float64).reshape(2, -1)
    dt = 1.0 / steps
    for _ in range(steps):
        k1 = sample_velocity(psi, x)
        k2 = sample_velocity(psi, x + 0.5 * dt * k1)
        k3 = sample_velocity(psi, x + 0.5 * dt * k2)
        k4 = sample_velocity(psi, x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x.reshape(2, h, w)


def smooth_random_svf(seed: int, height: int, width: int, magnitude: float,
                      sigma: float, taper: int = 0) -> np.ndarray:
    """Seeded smooth velocity field: gaussian-filtered white noise rescaled
    so the largest component magnitude equals ``magnitude``.

    ``taper`` > 0 ramps the field to exactly zero over that many border
    pixels (cosine profile). Compact support keeps every flow trajectory
    inside the image, which makes integrator comparisons well-posed: without
    it, trajectories that leave the domain are defined only by each
    integrator's out-of-bounds convention and the two legitimately disagree.
    """
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    field = rng.standard_normal((2, height, width))
    field = np.stack([gaussian_filter(c, sigma) for c in field])
    if taper > 0:
        def ramp(n):
            t = np.minimum(np.arange(n), np.arange(n)[::-1]) / taper
            return 0.5 - 0.5 * np.cos(np.pi * np.clip(t, 0.0, 1.0))
        field *= ramp(height)[None, :, None] * ramp(width)[None, None, :]
    peak = np.abs(field).max()
    if peak > 0:
        field = field * (magnitude / peak)
    return field.astype(np.float64)


# --------------------------------------------------------------------------- #
# Interpolation and statistics
# --------------------------------------------------------------------------- #

def bilinear_np(values: np.ndarray, coords: np.ndarray,
                padding: str = "zeros") -> np.ndarray:
    """Bilinear sampling of a (H, W) array at (2, ...) absolute coordinates,
    matching the conventions of the package's warping kernel."""
    mode = "grid-constant" if padding == "zeros" else "nearest"
    return map_coordinates(np.asarray(values, dtype=np.float64), coords,
                           order=1, mode=mode, cval=0.0)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Plain Pearson correlation of two flattened arrays."""
    return float(np.corrcoef(np.ravel(a), np.ravel(b))[0, 1])


def info_nce(queries, references, tau: float) -> float:
    """Explicit-loop InfoNCE over per-layer (N, D) unit embeddings.

    For each layer: mean over anchors i of -log softmax of the positive
    logit q_i . r_i / tau against all r_j of the same layer. Layers sum.
    """
    total = 0.0
    for zq, zr in zip(queries, references):
        zq = np.asarray(zq, dtype=np.float64)
        zr = np.asarray(zr, dtype=np.float64)
        n = zq.shape[0]
        layer = 0.0
        for i in range(n):
            logits = zq[i] @ zr.T / tau
            layer += logsumexp(logits) - logits[i]
        total += layer / n
    return float(total)


def hard_histogram_nmi(a: np.ndarray, b: np.ndarray, bins: int) -> float:
    """(H(A) + H(B)) / H(A, B) from a hard joint histogram over [0, 1]^2.

    Agrees with linear partial-volume binning whenever every intensity sits
    exactly on a bin center k / (bins - 1).
    """
    ia = np.clip(np.round(np.ravel(a) * (bins - 1)), 0, bins - 1).astype(int)
    ib = np.clip(np.round(np.ravel(b) * (bins - 1)), 0, bins - 1).astype(int)
    joint = np.zeros((bins, bins))
    np.add.at(joint, (ia, ib), 1.0)
    joint /= joint.sum()

    def entropy(p):
        p = p[p > 1e-300]
        return float(-(p * np.log(p)).sum())

    return (entropy(joint.sum(axis=1)) + entropy(joint.sum(axis=0))) \
        / entropy(joint.ravel())


# --------------------------------------------------------------------------- #
# Finite differences
# --------------------------------------------------------------------------- #

def central_difference(fn, x: np.ndarray, index, step: float = 1e-3) -> float:
    """Central finite difference of scalar fn w.r.t. x[index]."""
    hi = x.copy()
    lo = x.copy()
    hi[index] += step
    lo[index] -= step
    return (fn(hi) - fn(lo)) / (2.0 * step)


def probe_gradient(fn, x: np.ndarray, num_probes: int, seed: int,
                   step: float = 1e-3):
    """Finite-difference the scalar fn at ``num_probes`` random entries of x.

    Returns (indices, fd_values) where indices are flat positions into x.
    """
    rng = np.random.default_rng(seed)
    flat = x.reshape(-1)
    count = min(num_probes, flat.size)
    picks = rng.choice(flat.size, size=count, replace=False)
    fd = []
    for p in picks:
        def fn_flat(v):
            return fn(v.reshape(x.shape))
        fd.append(central_difference(fn_flat, flat.copy(), int(p), step))
    return picks, np.asarray(fd)


def relative_error(fd: np.ndarray, analytic: np.ndarray,
                   floor: float = 1e-4) -> np.ndarray:
    """Per-probe relative error with an absolute floor so near-zero gradients
    do not blow up the ratio."""
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), floor)
    return np.abs(fd - analytic) / denom
