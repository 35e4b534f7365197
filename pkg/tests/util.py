"""Shared builders for tests: smooth frames and handmade random systems.

These are intentionally independent of the synthetic-scenario module so that
tests of that module have a reference to compare against.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from dktrack.geometry import TemplateGeometry
from dktrack.lds import LdsModel


def smooth_frame(shape, rng, low=0.0, high=1.0, smoothness=3.0) -> np.ndarray:
    raw = rng.standard_normal(shape)
    sm = ndimage.gaussian_filter(raw, smoothness)
    lo, hi = sm.min(), sm.max()
    if hi - lo < 1e-12:
        return np.full(shape, (low + high) / 2.0)
    return low + (high - low) * (sm - lo) / (hi - lo)


def random_orthonormal(n_rows: int, n_cols: int, rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n_rows, n_cols)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs[None, :]


def random_stable_system(
    order: int,
    geometry: TemplateGeometry,
    rng,
    spectral_radius: float = 0.9,
    q_scale: float = 0.02,
    mu_range=(0.25, 0.75),
) -> LdsModel:
    a = rng.standard_normal((order, order))
    rho = np.abs(np.linalg.eigvals(a)).max()
    a = a * (spectral_radius / rho)
    c = random_orthonormal(geometry.n_pixels, order, rng)
    mu_img = smooth_frame((geometry.rows, geometry.cols), rng, *mu_range, smoothness=2.0)
    return LdsModel(
        mu=geometry.vec(mu_img),
        A=a,
        C=c,
        Q=q_scale * np.eye(order),
        R=0.0,
        geometry=geometry,
    )
