"""Joint tracking of a dynamic template's location and latent state.

Per frame the tracker minimises

    O(l, x) = (1 / (2 sigma_h2)) || sqrt zeta(y(l)) - sqrt zeta(mu + C x) ||^2
              + (1/2) (x - A x_prev)^T Q^{-1} (x - A x_prev)

over the stacked vector (l, x) by gradient descent with Armijo backtracking.
``zeta`` is the kernel-weighted soft histogram; in identity-feature mode the
histogram term is replaced with the raw-intensity residual
``(1 / (2 R)) || F(l) - (mu + C x) ||^2`` where ``F`` interpolates the frame
bilinearly.

Across a sequence the tracker warm-starts each frame at the previous location
and the dynamics prediction ``A x_prev``; the very first frame only seeds the
state by least squares against the patch at the given initial location.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import features
from .features import BinningSpec, KernelSpec
from .geometry import TemplateGeometry, bilinear_patch, bilinear_patch_with_jacobian, clamp_centre
from .lds import LdsModel, init_state

# Relative eigenvalue floor used when inverting Q; keeps the dynamics term
# finite for nearly singular state noise.  Q = 0 maps to a zero inverse, which
# removes the dynamics term entirely.
_Q_EIG_FLOOR = 1e-8

# Identity-feature mode divides by the model's observation variance; identified
# models can carry R = 0, so floor it.
_R_FLOOR = 1e-6

FEATURE_HIST = "hist"
FEATURE_IDENTITY = "identity"

TRACK_CSV_HEADER = ["frame", "loc_x", "loc_y", "objective", "iterations", "clamped"]


@dataclass(frozen=True)
class TrackerConfig:
    """Objective weights, descent controls and feature choice."""

    sigma_h2: float = 0.01
    max_iters: int = 200
    grad_tol: float = 1e-6
    rel_obj_tol: float = 1e-10
    armijo_step: float = 1.0
    armijo_shrink: float = 0.5
    armijo_slope: float = 1e-4
    armijo_max_backtracks: int = 30
    feature: str = FEATURE_HIST
    bins: int = 10
    sharpness: float = 100.0
    record_trace: bool = False

    def __post_init__(self) -> None:
        if self.sigma_h2 <= 0:
            raise ValueError("sigma_h2 must be positive")
        if self.feature not in (FEATURE_HIST, FEATURE_IDENTITY):
            raise ValueError(f"unknown feature mode {self.feature!r}")

    def binning(self) -> BinningSpec:
        return BinningSpec(bins=self.bins, sharpness=self.sharpness)


@dataclass
class TrackState:
    """Per-frame tracking output."""

    location: np.ndarray
    state: np.ndarray
    objective: float
    iterations: int
    clamped: bool
    objective_trace: list[float] | None = None
    location_trace: list[np.ndarray] | None = None


@dataclass
class TrackResult:
    """Whole-sequence tracking output.

    ``states[0]`` is the initialisation frame (no descent, iteration count 0,
    objective equal to the appearance term alone); ``mean_objective`` averages
    the objective over the solved frames.
    """

    states: list[TrackState]
    mean_objective: float
    model_id: str | None = None

    def locations(self) -> np.ndarray:
        return np.array([s.location for s in self.states])

    def state_matrix(self) -> np.ndarray:
        return np.array([s.state for s in self.states])


class _Workspace:
    """Quantities reused across objective/gradient evaluations of one model."""

    def __init__(self, model: LdsModel, config: TrackerConfig):
        self.model = model
        self.config = config
        self.kernel = KernelSpec.for_geometry(model.geometry)
        self.binning = config.binning()
        self.q_inv = q_pseudo_inverse(model.Q)
        self.r_eff = max(model.R, _R_FLOOR)
        # The state block of the objective is far stiffer than the location
        # block (dynamics weight ||Q^-1|| plus the sigmoid/appearance
        # curvature), so a single raw-gradient step cannot serve both.  The
        # descent direction scales the state gradient by the inverse stiffness
        # while leaving the location gradient untouched; Armijo backtracking
        # still controls the shared step length.
        if config.feature == FEATURE_HIST:
            appearance_stiffness = 1.0 / config.sigma_h2
        else:
            appearance_stiffness = 1.0 / self.r_eff
        q_stiffness = float(np.linalg.norm(self.q_inv, 2)) if model.order else 0.0
        self.state_scale = min(1.0, 1.0 / max(q_stiffness + appearance_stiffness, 1.0))


def q_pseudo_inverse(q: np.ndarray) -> np.ndarray:
    """Invert Q with an eigenvalue floor of 1e-8 * trace(Q) / order.

    A zero (or empty) Q returns a zero matrix, dropping the dynamics term.
    """
    q = np.asarray(q, dtype=float)
    n = q.shape[0]
    if n == 0:
        return q.copy()
    trace = float(np.trace(q))
    if trace <= 0.0:
        return np.zeros_like(q)
    floor = _Q_EIG_FLOOR * trace / n
    w, v = np.linalg.eigh((q + q.T) / 2.0)
    w = np.maximum(w, floor)
    return (v / w) @ v.T


def _dynamics_residual(state: np.ndarray, prev_state: np.ndarray | None, model: LdsModel):
    if prev_state is None:
        return None
    return state - model.A @ np.asarray(prev_state, dtype=float)


def _objective_ws(ws: _Workspace, frame, location, state, prev_state) -> float:
    model, cfg = ws.model, ws.config
    if cfg.feature == FEATURE_HIST:
        hy = features.window_soft_histogram(frame, location, model.geometry, ws.kernel, ws.binning)
        hi = features.template_soft_histogram(model, state, ws.kernel, ws.binning)
        a = features.sqrt_histogram(hy) - features.sqrt_histogram(hi)
        val = (a @ a) / (2.0 * cfg.sigma_h2)
    else:
        patch = bilinear_patch(frame, location, model.geometry)
        resid = patch - (model.mu + model.C @ state)
        val = (resid @ resid) / (2.0 * ws.r_eff)
    r = _dynamics_residual(state, prev_state, model)
    if r is not None:
        val += 0.5 * r @ ws.q_inv @ r
    return float(val)


def _gradient_ws(ws: _Workspace, frame, location, state, prev_state):
    model, cfg = ws.model, ws.config
    if cfg.feature == FEATURE_HIST:
        hy, jac_y = features.window_soft_histogram(
            frame, location, model.geometry, ws.kernel, ws.binning, with_jacobian=True
        )
        hi, jac_i = features.template_soft_histogram(
            model, state, ws.kernel, ws.binning, with_jacobian=True
        )
        a = features.sqrt_histogram(hy) - features.sqrt_histogram(hi)
        d_sqrt_y = features._sqrt_scale(hy.values)[:, None] * jac_y
        d_sqrt_i = features._sqrt_scale(hi.values)[:, None] * jac_i
        g_loc = d_sqrt_y.T @ a / cfg.sigma_h2
        g_state = -d_sqrt_i.T @ a / cfg.sigma_h2
    else:
        patch, jac = bilinear_patch_with_jacobian(frame, location, model.geometry)
        resid = patch - (model.mu + model.C @ state)
        g_loc = jac.T @ resid / ws.r_eff
        g_state = -model.C.T @ resid / ws.r_eff
    r = _dynamics_residual(state, prev_state, model)
    if r is not None:
        g_state = g_state + ws.q_inv @ r
    return g_loc, g_state


def objective(
    frame: np.ndarray,
    location: np.ndarray,
    state: np.ndarray,
    model: LdsModel,
    config: TrackerConfig,
    prev_state: np.ndarray | None = None,
) -> float:
    """Tracking objective at (location, state).

    ``prev_state`` feeds the dynamics prior; omit it to score the appearance
    term alone.
    """
    ws = _Workspace(model, config)
    return _objective_ws(
        ws, np.asarray(frame, dtype=float), np.asarray(location, dtype=float),
        np.asarray(state, dtype=float), prev_state,
    )


def gradient(
    frame: np.ndarray,
    location: np.ndarray,
    state: np.ndarray,
    model: LdsModel,
    config: TrackerConfig,
    prev_state: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the objective with respect to location and state."""
    ws = _Workspace(model, config)
    return _gradient_ws(
        ws, np.asarray(frame, dtype=float), np.asarray(location, dtype=float),
        np.asarray(state, dtype=float), prev_state,
    )


def solve_frame(
    frame: np.ndarray,
    init_location: np.ndarray,
    init_state_vec: np.ndarray,
    prev_state: np.ndarray | None,
    model: LdsModel,
    config: TrackerConfig,
    lock_location: bool = False,
    _ws: _Workspace | None = None,
) -> TrackState:
    """Minimise the per-frame objective by Armijo-backtracked gradient descent.

    Stops when the joint gradient norm falls below ``grad_tol``, when no step
    satisfies sufficient decrease, when the relative objective decrease drops
    below ``rel_obj_tol``, or after ``max_iters`` accepted steps.  Locations
    are clamped so the template window stays inside the frame; any active
    clamp is flagged.  With ``lock_location`` the location is held fixed and
    only the state descends.
    """
    frame = np.asarray(frame, dtype=float)
    ws = _ws if _ws is not None else _Workspace(model, config)
    location, clamped = clamp_centre(np.asarray(init_location, dtype=float), model.geometry, frame.shape)
    state = np.asarray(init_state_vec, dtype=float).copy()
    obj = _objective_ws(ws, frame, location, state, prev_state)
    obj_trace = [obj] if config.record_trace else None
    loc_trace = [location.copy()] if config.record_trace else None
    iterations = 0
    for _ in range(config.max_iters):
        g_loc, g_state = _gradient_ws(ws, frame, location, state, prev_state)
        if lock_location:
            g_loc = np.zeros(2)
        if np.sqrt(g_loc @ g_loc + g_state @ g_state) <= config.grad_tol:
            break
        d_state = ws.state_scale * g_state
        # directional slope of the preconditioned direction
        slope = float(g_loc @ g_loc + g_state @ d_state)
        step = config.armijo_step
        accepted = False
        for _ in range(config.armijo_max_backtracks):
            new_loc = location - step * g_loc
            if not lock_location:
                new_loc, was_clamped = clamp_centre(new_loc, model.geometry, frame.shape)
            else:
                was_clamped = False
            new_state = state - step * d_state
            new_obj = _objective_ws(ws, frame, new_loc, new_state, prev_state)
            if new_obj <= obj - config.armijo_slope * step * slope:
                accepted = True
                break
            step *= config.armijo_shrink
        if not accepted:
            break
        rel_decrease = (obj - new_obj) / max(abs(obj), 1e-300)
        location, state, obj = new_loc, new_state, new_obj
        clamped = clamped or was_clamped
        iterations += 1
        if obj_trace is not None:
            obj_trace.append(obj)
        if loc_trace is not None:
            loc_trace.append(location.copy())
        if rel_decrease <= config.rel_obj_tol:
            break
    return TrackState(
        location=location,
        state=state,
        objective=obj,
        iterations=iterations,
        clamped=clamped,
        objective_trace=obj_trace,
        location_trace=loc_trace,
    )


def track_sequence(
    frames: np.ndarray,
    model: LdsModel,
    initial_location: np.ndarray,
    config: TrackerConfig,
    model_id: str | None = None,
) -> TrackResult:
    """Track the template through a frame sequence.

    Frame 0 seeds the state from the patch at ``initial_location``; every
    later frame is solved from the warm start (previous location, dynamics
    prediction of the previous state).
    """
    frames = np.asarray(frames, dtype=float)
    if frames.ndim != 3 or frames.shape[0] < 1:
        raise ValueError(f"frames must be a nonempty (T, H, W) array, got shape {frames.shape}")
    ws = _Workspace(model, config)
    frame_shape = frames.shape[1:]
    location, clamped = clamp_centre(np.asarray(initial_location, dtype=float), model.geometry, frame_shape)
    patch = bilinear_patch(frames[0], location, model.geometry)
    state = init_state(model, patch)
    first_obj = _objective_ws(ws, frames[0], location, state, None)
    states = [
        TrackState(location=location, state=state, objective=first_obj, iterations=0, clamped=clamped)
    ]
    for t in range(1, frames.shape[0]):
        prev = states[-1].state
        result = solve_frame(
            frames[t],
            init_location=states[-1].location,
            init_state_vec=model.A @ prev,
            prev_state=prev,
            model=model,
            config=config,
            _ws=ws,
        )
        states.append(result)
    if len(states) > 1:
        mean_obj = float(np.mean([s.objective for s in states[1:]]))
    else:
        mean_obj = first_obj
    return TrackResult(states=states, mean_objective=mean_obj, model_id=model_id)


def tracks_to_csv(result: TrackResult) -> str:
    """Serialise per-frame tracking output; loc_x is the column coordinate."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACK_CSV_HEADER)
    for t, s in enumerate(result.states):
        writer.writerow(
            [t, repr(float(s.location[1])), repr(float(s.location[0])),
             repr(float(s.objective)), s.iterations, int(s.clamped)]
        )
    return buf.getvalue()


def write_tracks_csv(result: TrackResult, path) -> None:
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write(tracks_to_csv(result))


def read_tracks_csv(path) -> np.ndarray:
    """Load a tracks CSV back into an array of rows
    (frame, loc_x, loc_y, objective, iterations, clamped)."""
    rows = []
    with open(path, "r", encoding="ascii", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACK_CSV_HEADER:
            raise ValueError(f"{path}: expected header {TRACK_CSV_HEADER}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(TRACK_CSV_HEADER):
                raise ValueError(f"{path}: line {lineno}: expected {len(TRACK_CSV_HEADER)} fields")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    return np.array(rows).reshape(-1, len(TRACK_CSV_HEADER))
