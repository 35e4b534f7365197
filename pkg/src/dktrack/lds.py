"""Linear dynamical system models of evolving templates.

A dynamic template is the output of the system

    x_t = A x_{t-1} + B v_t,        v_t ~ N(0, I)
    I_t = mu + C x_t (+ observation noise)

with ``B B^T = Q``.  The template mean ``mu`` and the columns of ``C`` live on
the pixel grid described by a :class:`~dktrack.geometry.TemplateGeometry`, in
the canonical column-major order.

The module covers simulation, subspace identification from observed patches,
least-squares state initialisation, geometric transformation of a learned
model to a new patch size (with optional horizontal reflection), and a strict
JSON serialisation of the model tuple.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import TemplateGeometry

# Singular values below RANK_RTOL times the largest one count as zero, both in
# the rank decision during identification and in pseudo-inverses.
RANK_RTOL = 1e-10

# Eigenvalues of Q more negative than this (relative to the largest) mean the
# matrix is genuinely indefinite rather than PSD-up-to-roundoff.
_PSD_TOL = 1e-8

_MODEL_JSON_KEYS = {"mu", "A", "C", "Q", "R", "rows", "cols", "order"}


@dataclass(frozen=True)
class LdsModel:
    """Parameters (mu, A, C, Q, R) of a template-generating system.

    ``R`` is the scalar observation noise variance.  Instances are immutable;
    the arrays are frozen at construction so models can be shared freely.
    """

    mu: np.ndarray
    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: float
    geometry: TemplateGeometry

    def __post_init__(self) -> None:
        mu = np.asarray(self.mu, dtype=float)
        a = np.asarray(self.A, dtype=float)
        c = np.asarray(self.C, dtype=float)
        q = np.asarray(self.Q, dtype=float)
        n_pix = self.geometry.n_pixels
        if mu.shape != (n_pix,):
            raise ValueError(f"mu must have shape ({n_pix},), got {mu.shape}")
        if c.ndim != 2 or c.shape[0] != n_pix:
            raise ValueError(f"C must have shape ({n_pix}, order), got {c.shape}")
        order = c.shape[1]
        if a.shape != (order, order):
            raise ValueError(f"A must have shape ({order}, {order}), got {a.shape}")
        if q.shape != (order, order):
            raise ValueError(f"Q must have shape ({order}, {order}), got {q.shape}")
        if not np.allclose(q, q.T, atol=1e-12):
            raise ValueError("Q must be symmetric")
        if self.R < 0:
            raise ValueError("R must be nonnegative")
        for name, arr in (("mu", mu), ("A", a), ("C", c), ("Q", q)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "R", float(self.R))

    @property
    def order(self) -> int:
        return self.C.shape[1]


def predict_template(model: LdsModel, state: np.ndarray) -> np.ndarray:
    """Template predicted by a state: mu + C x."""
    state = np.asarray(state, dtype=float)
    if state.shape != (model.order,):
        raise ValueError(f"state must have shape ({model.order},), got {state.shape}")
    return model.mu + model.C @ state


def psd_sqrt(q: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix via clamped eigendecomposition."""
    q = np.asarray(q, dtype=float)
    if q.size == 0:
        return q.copy()
    w, v = np.linalg.eigh((q + q.T) / 2.0)
    scale = max(w.max(), 0.0)
    if w.min() < -_PSD_TOL * max(scale, 1.0):
        raise ValueError(f"matrix is not positive semidefinite (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return v @ np.diag(np.sqrt(w)) @ v.T


def simulate(
    model: LdsModel,
    n_frames: int,
    seed: int | np.random.SeedSequence,
    process_noise: bool = True,
    obs_noise_sigma: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample templates I_1..I_T and states x_1..x_T from the model.

    The initial state x_0 is drawn from N(0, Q) (zero when process noise is
    disabled or Q = 0) and is not part of the returned sequence.  Outputs are
    raw intensities; clamping to a display range is left to callers.
    """
    if n_frames < 1:
        raise ValueError(f"n_frames must be positive, got {n_frames}")
    rng = np.random.default_rng(seed)
    n = model.order
    b = psd_sqrt(model.Q) if process_noise else np.zeros((n, n))
    x = b @ rng.standard_normal(n)
    noise = rng.standard_normal((n_frames, n))
    states = np.empty((n_frames, n))
    for t in range(n_frames):
        x = model.A @ x + b @ noise[t]
        states[t] = x
    templates = model.mu[None, :] + states @ model.C.T
    if obs_noise_sigma > 0.0:
        templates = templates + obs_noise_sigma * rng.standard_normal(templates.shape)
    return templates, states


def identify(patches: np.ndarray, order: int, geometry: TemplateGeometry) -> LdsModel:
    """Learn (mu, A, C, Q, R) from observed patches by subspace identification.

    ``patches`` is (T, N) in canonical pixel order.  The mean is subtracted,
    the residual matrix is factored by a truncated SVD into an orthonormal
    ``C`` and state trajectory, ``A`` maps each state to its successor in the
    least-squares sense, and ``Q`` is the covariance of the one-step state
    residuals.  If the data have numerical rank below the requested order, the
    order is reduced to that rank (with a warning).
    """
    patches = np.asarray(patches, dtype=float)
    if patches.ndim != 2 or patches.shape[1] != geometry.n_pixels:
        raise ValueError(
            f"patches must have shape (T, {geometry.n_pixels}), got {patches.shape}"
        )
    n_frames = patches.shape[0]
    if order < 1:
        raise ValueError(f"order must be positive, got {order}")
    if n_frames < order + 1:
        raise ValueError(
            f"need at least order + 1 = {order + 1} patches to identify, got {n_frames}"
        )
    mu = patches.mean(axis=0)
    centred = (patches - mu).T  # (N, T)
    u, s, vt = np.linalg.svd(centred, full_matrices=False)
    data_scale = max(1.0, float(np.abs(patches).max()))
    if s.size == 0 or s[0] <= RANK_RTOL * data_scale:
        raise ValueError("patch sequence is numerically constant; no dynamics to identify")
    rank = int(np.sum(s > RANK_RTOL * s[0]))
    n = min(order, rank)
    if n < order:
        warnings.warn(
            f"requested order {order} exceeds numerical rank {rank}; reduced to {n}",
            stacklevel=2,
        )
    c = u[:, :n]
    states = s[:n, None] * vt[:n]  # (n, T)
    # Sample-mean centring leaves a constant (A - I) x_bar offset in the state
    # recursion; an intercept absorbs it (and is then discarded) so that
    # autonomous noiseless sequences identify A exactly.
    regressors = np.vstack([states[:, :-1], np.ones((1, n_frames - 1))])
    solution = states[:, 1:] @ np.linalg.pinv(regressors, rcond=RANK_RTOL)
    a = solution[:, :n]
    resid = states[:, 1:] - solution @ regressors
    q = (resid @ resid.T) / (n_frames - 1)
    q = (q + q.T) / 2.0
    recon_err = centred - c @ states
    r = float(np.mean(recon_err**2))
    return LdsModel(mu=mu, A=a, C=c, Q=q, R=r, geometry=geometry)


def init_state(model: LdsModel, patch: np.ndarray) -> np.ndarray:
    """Least-squares state for a patch: argmin_x ||patch - mu - C x||."""
    patch = np.asarray(patch, dtype=float)
    if patch.shape != (model.geometry.n_pixels,):
        raise ValueError(
            f"patch must have shape ({model.geometry.n_pixels},), got {patch.shape}"
        )
    if model.order == 0:
        return np.zeros(0)
    x, *_ = np.linalg.lstsq(model.C, patch - model.mu, rcond=RANK_RTOL)
    return x


def _resample_image(image: np.ndarray, target: TemplateGeometry) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling (exact when sizes match)."""
    src_r, src_c = image.shape
    rr = (
        np.linspace(0.0, src_r - 1.0, target.rows)
        if target.rows > 1
        else np.array([(src_r - 1) / 2.0])
    )
    cc = (
        np.linspace(0.0, src_c - 1.0, target.cols)
        if target.cols > 1
        else np.array([(src_c - 1) / 2.0])
    )
    i0 = np.minimum(np.floor(rr), max(src_r - 2, 0)).astype(int)
    j0 = np.minimum(np.floor(cc), max(src_c - 2, 0)).astype(int)
    fr = rr - i0
    fc = cc - j0
    i1 = np.minimum(i0 + 1, src_r - 1)
    j1 = np.minimum(j0 + 1, src_c - 1)
    top = image[np.ix_(i0, j0)] * (1 - fc)[None, :] + image[np.ix_(i0, j1)] * fc[None, :]
    bot = image[np.ix_(i1, j0)] * (1 - fc)[None, :] + image[np.ix_(i1, j1)] * fc[None, :]
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def transform_model(
    model: LdsModel, target: TemplateGeometry, reflect_horizontal: bool = False
) -> LdsModel:
    """Adapt a model to a new patch geometry, optionally mirroring it.

    The mean and each column of ``C`` are treated as images, bilinearly
    resampled to the target size and, if requested, reflected across the
    vertical axis.  ``A``, ``Q`` and ``R`` are untouched.  The resampled ``C``
    is re-orthonormalised by a thin QR factorisation (triangular factor
    discarded, column signs fixed to keep directions stable).
    """
    def adapt(flat: np.ndarray) -> np.ndarray:
        img = _resample_image(model.geometry.unvec(flat), target)
        if reflect_horizontal:
            img = np.fliplr(img)
        return target.vec(img)

    mu = adapt(model.mu)
    c = np.column_stack([adapt(model.C[:, k]) for k in range(model.order)]) if model.order else np.zeros((target.n_pixels, 0))
    if model.order:
        qf, rf = np.linalg.qr(c)
        signs = np.sign(np.diag(rf))
        signs[signs == 0] = 1.0
        c = qf * signs[None, :]
    return LdsModel(mu=mu, A=model.A, C=c, Q=model.Q, R=model.R, geometry=target)


def model_to_dict(model: LdsModel) -> dict:
    return {
        "mu": model.mu.tolist(),
        "A": model.A.tolist(),
        "C": model.C.tolist(),
        "Q": model.Q.tolist(),
        "R": model.R,
        "rows": model.geometry.rows,
        "cols": model.geometry.cols,
        "order": model.order,
    }


def model_from_dict(data: dict) -> LdsModel:
    keys = set(data)
    if keys != _MODEL_JSON_KEYS:
        missing = _MODEL_JSON_KEYS - keys
        extra = keys - _MODEL_JSON_KEYS
        parts = []
        if missing:
            parts.append(f"missing keys {sorted(missing)}")
        if extra:
            parts.append(f"unknown keys {sorted(extra)}")
        raise ValueError("bad model dictionary: " + ", ".join(parts))
    geometry = TemplateGeometry(rows=int(data["rows"]), cols=int(data["cols"]))
    model = LdsModel(
        mu=np.asarray(data["mu"], dtype=float),
        A=np.asarray(data["A"], dtype=float),
        C=np.asarray(data["C"], dtype=float),
        Q=np.asarray(data["Q"], dtype=float),
        R=float(data["R"]),
        geometry=geometry,
    )
    if model.order != int(data["order"]):
        raise ValueError(
            f"declared order {data['order']} does not match C with {model.order} columns"
        )
    return model


def save_model(model: LdsModel, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(model_to_dict(model), fh)
        fh.write("\n")


def load_model(path) -> LdsModel:
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: malformed JSON at byte offset {exc.pos}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a JSON object at the top level")
    try:
        return model_from_dict(data)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc
