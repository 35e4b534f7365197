"""Kernel-weighted histogram features and their derivatives.

The appearance of a template window is summarised by a histogram of pixel
intensities in which each pixel's vote is weighted by an Epanechnikov kernel
centred on the window.  Two histogram flavours exist:

* the hard histogram bins intensities by nearest bin (used for reporting and
  as a reference), and
* the soft histogram replaces the bin indicator with a difference of steep
  sigmoids, which makes the histogram differentiable in both the window
  location and, through the template model, the latent state.

With bin edges at ``u / B`` and sigmoid slope ``sharpness``, the soft
membership of intensity ``s`` in bin ``u`` is ``phi_{u-1}(s) - phi_u(s)`` where
``phi_u(s) = expit(sharpness * (s - u / B))``.  Stacking memberships over the
pixels of a patch gives the (N, B) sifting matrix; the kernel-weighted average
of its rows is the soft histogram.

For a window anchored in a frame at a real-valued centre, the integer pixel
grid underneath is fixed while the kernel translates continuously, so the
histogram is a smooth function of the centre: both the kernel weights and the
normalisation move with it.  The analytic location derivative therefore has a
quotient term from the moving normalisation; it is checked against finite
differences in the tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .geometry import TemplateGeometry, window_indices
from .lds import LdsModel

# Soft histogram bins are floored at this value before inverse square roots,
# so empty bins do not blow up the derivative scaling.
BIN_FLOOR = 1e-6


@dataclass(frozen=True)
class KernelSpec:
    """Epanechnikov kernel bandwidths (half-extents of the support)."""

    row_bandwidth: float
    col_bandwidth: float

    def __post_init__(self) -> None:
        if self.row_bandwidth <= 0 or self.col_bandwidth <= 0:
            raise ValueError("kernel bandwidths must be positive")

    @classmethod
    def for_geometry(cls, geometry: TemplateGeometry) -> "KernelSpec":
        """Kernel whose support is exactly the template extent."""
        return cls(row_bandwidth=geometry.rows / 2.0, col_bandwidth=geometry.cols / 2.0)


@dataclass(frozen=True)
class BinningSpec:
    """Intensity binning on [0, 1]: bin count and sigmoid sharpness."""

    bins: int = 10
    sharpness: float = 100.0

    def __post_init__(self) -> None:
        if self.bins < 2:
            raise ValueError(f"need at least 2 bins, got {self.bins}")
        if self.sharpness <= 0:
            raise ValueError("sharpness must be positive")

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.bins + 1)


@dataclass(frozen=True)
class SoftHistogram:
    """Histogram values together with the kernel normalisation used."""

    values: np.ndarray
    kappa: float

    @property
    def bins(self) -> int:
        return len(self.values)


def epanechnikov(offsets: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    """K(z) = 1 - ||H z||^2 inside the unit ellipse, 0 outside.

    ``offsets`` is (..., 2) in (row, col) order; ``H`` is the diagonal matrix
    of inverse bandwidths.
    """
    offsets = np.asarray(offsets, dtype=float)
    s = (offsets[..., 0] / kernel.row_bandwidth) ** 2 + (
        offsets[..., 1] / kernel.col_bandwidth
    ) ** 2
    return np.where(s < 1.0, 1.0 - s, 0.0)


def kernel_gradient(offsets: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    """Gradient of the Epanechnikov kernel with respect to the offset.

    Equals ``-2 H^T H z`` inside the support and 0 outside.
    """
    offsets = np.asarray(offsets, dtype=float)
    s = (offsets[..., 0] / kernel.row_bandwidth) ** 2 + (
        offsets[..., 1] / kernel.col_bandwidth
    ) ** 2
    grad = np.empty(offsets.shape)
    grad[..., 0] = -2.0 * offsets[..., 0] / kernel.row_bandwidth**2
    grad[..., 1] = -2.0 * offsets[..., 1] / kernel.col_bandwidth**2
    grad[~(s < 1.0)] = 0.0
    return grad


def kernel_weights(geometry: TemplateGeometry, kernel: KernelSpec) -> tuple[np.ndarray, float]:
    """Kernel values on the template pixel grid and their sum."""
    w = epanechnikov(geometry.offsets(), kernel)
    kappa = float(w.sum())
    if kappa <= 0.0:
        raise ValueError("degenerate kernel: no pixel falls inside the support")
    return w, kappa


def _edge_sigmoids(values: np.ndarray, binning: BinningSpec) -> np.ndarray:
    """phi_u(s) for every bin edge u; shape values.shape + (bins + 1,)."""
    values = np.asarray(values, dtype=float)
    return expit(binning.sharpness * (values[..., None] - binning.edges))


def sifting_matrix(values: np.ndarray, binning: BinningSpec) -> np.ndarray:
    """Soft bin memberships phi_{u-1} - phi_u of each value; shape (..., bins)."""
    phi = _edge_sigmoids(values, binning)
    return phi[..., :-1] - phi[..., 1:]


def sifting_derivative(values: np.ndarray, binning: BinningSpec) -> np.ndarray:
    """Derivative of the soft memberships with respect to the value."""
    phi = _edge_sigmoids(values, binning)
    dphi = binning.sharpness * phi * (1.0 - phi)
    return dphi[..., :-1] - dphi[..., 1:]


def hard_histogram(
    patch: np.ndarray,
    geometry: TemplateGeometry,
    kernel: KernelSpec,
    binning: BinningSpec,
) -> SoftHistogram:
    """Kernel-weighted histogram with nearest-bin assignment; sums to one."""
    patch = np.asarray(patch, dtype=float)
    if patch.shape != (geometry.n_pixels,):
        raise ValueError(f"patch must have shape ({geometry.n_pixels},), got {patch.shape}")
    w, kappa = kernel_weights(geometry, kernel)
    idx = np.clip(np.floor(patch * binning.bins).astype(int), 0, binning.bins - 1)
    values = np.bincount(idx, weights=w, minlength=binning.bins) / kappa
    return SoftHistogram(values=values, kappa=kappa)


def soft_histogram(
    patch: np.ndarray,
    geometry: TemplateGeometry,
    kernel: KernelSpec,
    binning: BinningSpec,
) -> SoftHistogram:
    """Kernel-weighted histogram with sigmoid bin memberships."""
    patch = np.asarray(patch, dtype=float)
    if patch.shape != (geometry.n_pixels,):
        raise ValueError(f"patch must have shape ({geometry.n_pixels},), got {patch.shape}")
    w, kappa = kernel_weights(geometry, kernel)
    values = sifting_matrix(patch, binning).T @ w / kappa
    return SoftHistogram(values=values, kappa=kappa)


def matusita(h1, h2) -> float:
    """Matusita distance between two histograms: sum of (sqrt h1 - sqrt h2)^2."""
    v1 = np.asarray(getattr(h1, "values", h1), dtype=float)
    v2 = np.asarray(getattr(h2, "values", h2), dtype=float)
    if v1.shape != v2.shape:
        raise ValueError(f"histogram sizes differ: {v1.shape} vs {v2.shape}")
    if np.any(v1 < 0) or np.any(v2 < 0):
        raise ValueError("histograms must be nonnegative")
    d = np.sqrt(v1) - np.sqrt(v2)
    return float(d @ d)


def window_soft_histogram(
    frame: np.ndarray,
    centre: np.ndarray,
    geometry: TemplateGeometry,
    kernel: KernelSpec,
    binning: BinningSpec,
    with_jacobian: bool = False,
):
    """Soft histogram of the frame window at a real-valued centre.

    The window reads the integer pixel grid whose top-left corner is nearest
    ``centre``; the kernel is evaluated at the exact offsets of those pixels
    from the centre, and the normalisation is the sum of those weights.  With
    ``with_jacobian`` the exact (bins, 2) derivative of the histogram with
    respect to the centre is returned as well.
    """
    frame = np.asarray(frame, dtype=float)
    centre = np.asarray(centre, dtype=float)
    rr, cc = window_indices(centre, geometry, frame.shape)
    z = np.column_stack((rr - centre[0], cc - centre[1]))
    w = epanechnikov(z, kernel)
    kappa = float(w.sum())
    if kappa <= 0.0:
        raise ValueError("degenerate kernel: window weights sum to zero")
    sift = sifting_matrix(frame[rr, cc], binning)
    values = sift.T @ w / kappa
    hist = SoftHistogram(values=values, kappa=kappa)
    if not with_jacobian:
        return hist
    # d w_p / d centre = -grad K at z_p; the quotient rule over kappa gives a
    # centring correction against the histogram itself.
    dw = -kernel_gradient(z, kernel)
    dkappa = dw.sum(axis=0)
    jac = (sift.T @ dw - np.outer(values, dkappa)) / kappa
    return hist, jac


def window_hard_histogram(
    frame: np.ndarray,
    centre: np.ndarray,
    geometry: TemplateGeometry,
    kernel: KernelSpec,
    binning: BinningSpec,
) -> SoftHistogram:
    """Hard histogram of the frame window at a real-valued centre."""
    frame = np.asarray(frame, dtype=float)
    centre = np.asarray(centre, dtype=float)
    rr, cc = window_indices(centre, geometry, frame.shape)
    z = np.column_stack((rr - centre[0], cc - centre[1]))
    w = epanechnikov(z, kernel)
    kappa = float(w.sum())
    if kappa <= 0.0:
        raise ValueError("degenerate kernel: window weights sum to zero")
    idx = np.clip(np.floor(frame[rr, cc] * binning.bins).astype(int), 0, binning.bins - 1)
    values = np.bincount(idx, weights=w, minlength=binning.bins) / kappa
    return SoftHistogram(values=values, kappa=kappa)


def template_soft_histogram(
    model: LdsModel,
    state: np.ndarray,
    kernel: KernelSpec,
    binning: BinningSpec,
    with_jacobian: bool = False,
):
    """Soft histogram of the template mu + C x, optionally with d/dx.

    The state Jacobian is (bins, order): each pixel contributes its sifting
    derivative times its kernel weight, pushed through the corresponding row
    of ``C``.
    """
    state = np.asarray(state, dtype=float)
    values_pix = model.mu + model.C @ state
    w, kappa = kernel_weights(model.geometry, kernel)
    sift = sifting_matrix(values_pix, binning)
    values = sift.T @ w / kappa
    hist = SoftHistogram(values=values, kappa=kappa)
    if not with_jacobian:
        return hist
    dsift = sifting_derivative(values_pix, binning)
    jac = (dsift * w[:, None]).T @ model.C / kappa
    return hist, jac


def sqrt_histogram(hist: SoftHistogram) -> np.ndarray:
    return np.sqrt(np.clip(hist.values, 0.0, None))


def _sqrt_scale(values: np.ndarray) -> np.ndarray:
    """Rows of d sqrt(zeta) = 0.5 / sqrt(zeta) with empty-bin flooring."""
    return 0.5 / np.sqrt(np.maximum(values, BIN_FLOOR))


def location_jacobian(
    frame: np.ndarray,
    centre: np.ndarray,
    geometry: TemplateGeometry,
    kernel: KernelSpec,
    binning: BinningSpec,
    sigma_h2: float,
) -> np.ndarray:
    """(bins, 2) matrix L: derivative of sqrt zeta(y(l)) scaled by 1/(2 sigma_h2).

    ``sigma_h2 * L`` is the plain derivative of the square-root histogram with
    respect to the window centre.
    """
    hist, jac = window_soft_histogram(
        frame, centre, geometry, kernel, binning, with_jacobian=True
    )
    return (_sqrt_scale(hist.values)[:, None] * jac) / sigma_h2


def state_jacobian(
    model: LdsModel,
    state: np.ndarray,
    kernel: KernelSpec,
    binning: BinningSpec,
    sigma_h2: float,
) -> np.ndarray:
    """(bins, order) matrix M: derivative of sqrt zeta(mu + C x) scaled by 1/(2 sigma_h2)."""
    hist, jac = template_soft_histogram(model, state, kernel, binning, with_jacobian=True)
    return (_sqrt_scale(hist.values)[:, None] * jac) / sigma_h2


def identity_feature(patch: np.ndarray) -> np.ndarray:
    """Raw-intensity feature: the patch itself."""
    return np.asarray(patch, dtype=float)
