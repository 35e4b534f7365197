"""Template geometry and sub-pixel image access.

A template is a small ``rows x cols`` image patch stored as a flat vector in
column-major order: pixel ``k`` sits at row ``k % rows``, column ``k // rows``.
Every flat quantity in the package (template means, observation matrix rows,
kernel weights, sifting matrices) uses this same ordering, so the helpers here
are the single source of truth for it.

Locations are ``(row, col)`` float pairs addressing the patch centre inside a
larger frame.  Two access modes are provided:

* ``extract_window`` reads the integer pixel grid nearest to a real-valued
  centre (used by the kernel-weighted histogram machinery, where sub-pixel
  behaviour enters through the kernel offsets rather than interpolation), and
* ``bilinear_patch`` interpolates intensities at real-valued positions (used
  by the identity-feature mode and for lifting patches off a frame along a
  track).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TemplateGeometry:
    """Shape of a template patch."""

    rows: int
    cols: int

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError(
                f"template geometry must have positive extent, got {self.rows}x{self.cols}"
            )

    @property
    def n_pixels(self) -> int:
        return self.rows * self.cols

    @property
    def centre(self) -> np.ndarray:
        """Offset of the patch centre from its top-left pixel."""
        return np.array([(self.rows - 1) / 2.0, (self.cols - 1) / 2.0])

    def offsets(self) -> np.ndarray:
        """(N, 2) array of (row, col) offsets of each pixel from the centre.

        Row index varies fastest, matching the column-major flat ordering.
        """
        ii = np.tile(np.arange(self.rows), self.cols)
        jj = np.repeat(np.arange(self.cols), self.rows)
        out = np.empty((self.n_pixels, 2))
        out[:, 0] = ii - (self.rows - 1) / 2.0
        out[:, 1] = jj - (self.cols - 1) / 2.0
        return out

    def vec(self, image: np.ndarray) -> np.ndarray:
        """Flatten a (rows, cols) image into the canonical pixel order."""
        image = np.asarray(image)
        if image.shape != (self.rows, self.cols):
            raise ValueError(f"expected image of shape {(self.rows, self.cols)}, got {image.shape}")
        return image.flatten(order="F")

    def unvec(self, values: np.ndarray) -> np.ndarray:
        """Reshape a flat pixel vector back into a (rows, cols) image."""
        values = np.asarray(values)
        if values.shape != (self.n_pixels,):
            raise ValueError(f"expected vector of length {self.n_pixels}, got shape {values.shape}")
        return values.reshape((self.rows, self.cols), order="F")


def clamp_centre(
    centre: np.ndarray, geometry: TemplateGeometry, frame_shape: tuple[int, int]
) -> tuple[np.ndarray, bool]:
    """Clamp a patch centre so the template window stays inside the frame.

    Returns the clamped centre and whether clamping was needed.
    """
    centre = np.asarray(centre, dtype=float)
    lo = geometry.centre
    hi = np.array([frame_shape[0] - 1, frame_shape[1] - 1]) - geometry.centre
    if np.any(lo > hi):
        raise ValueError(
            f"frame of shape {frame_shape} cannot contain a "
            f"{geometry.rows}x{geometry.cols} template"
        )
    clamped = np.clip(centre, lo, hi)
    return clamped, bool(np.any(clamped != centre))


def window_indices(
    centre: np.ndarray, geometry: TemplateGeometry, frame_shape: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixel coordinates of the window anchored nearest to ``centre``.

    The window top-left corner is the rounding of ``centre - geometry.centre``;
    pixel order matches the flat template ordering.  Raises if the window does
    not fit inside the frame.
    """
    centre = np.asarray(centre, dtype=float)
    top_left = np.rint(centre - geometry.centre).astype(int)
    if (
        top_left[0] < 0
        or top_left[1] < 0
        or top_left[0] + geometry.rows > frame_shape[0]
        or top_left[1] + geometry.cols > frame_shape[1]
    ):
        raise ValueError(
            f"window at centre {tuple(centre)} falls outside frame of shape {frame_shape}"
        )
    rr = np.tile(top_left[0] + np.arange(geometry.rows), geometry.cols)
    cc = np.repeat(top_left[1] + np.arange(geometry.cols), geometry.rows)
    return rr, cc


def extract_window(
    frame: np.ndarray, centre: np.ndarray, geometry: TemplateGeometry
) -> np.ndarray:
    """Read the integer pixel window nearest ``centre`` as a flat vector."""
    rr, cc = window_indices(centre, geometry, frame.shape)
    return np.asarray(frame, dtype=float)[rr, cc]


def bilinear_patch(
    frame: np.ndarray, centre: np.ndarray, geometry: TemplateGeometry
) -> np.ndarray:
    """Bilinearly interpolated patch at a real-valued centre."""
    patch, _ = bilinear_patch_with_jacobian(frame, centre, geometry)
    return patch


def bilinear_patch_with_jacobian(
    frame: np.ndarray, centre: np.ndarray, geometry: TemplateGeometry
) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear patch and its (N, 2) derivative with respect to the centre.

    Sample positions are clamped to the frame so the call is well defined on
    the boundary; inside the valid band of ``clamp_centre`` no clamping occurs.
    """
    frame = np.asarray(frame, dtype=float)
    centre = np.asarray(centre, dtype=float)
    h, w = frame.shape
    coords = centre[None, :] + geometry.offsets()
    r = np.clip(coords[:, 0], 0.0, h - 1.0)
    c = np.clip(coords[:, 1], 0.0, w - 1.0)
    i0 = np.minimum(np.floor(r), h - 2).astype(int) if h > 1 else np.zeros(len(r), dtype=int)
    j0 = np.minimum(np.floor(c), w - 2).astype(int) if w > 1 else np.zeros(len(c), dtype=int)
    fr = r - i0
    fc = c - j0
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    v00 = frame[i0, j0]
    v10 = frame[i1, j0]
    v01 = frame[i0, j1]
    v11 = frame[i1, j1]
    patch = (
        v00 * (1 - fr) * (1 - fc)
        + v10 * fr * (1 - fc)
        + v01 * (1 - fr) * fc
        + v11 * fr * fc
    )
    jac = np.empty((geometry.n_pixels, 2))
    jac[:, 0] = (v10 - v00) * (1 - fc) + (v11 - v01) * fc
    jac[:, 1] = (v01 - v00) * (1 - fr) + (v11 - v10) * fr
    return patch, jac
