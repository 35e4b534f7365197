"""Synthetic scenario generation: random systems, trajectories, compositing.

A scenario plants a randomly generated dynamic template into a larger frame
sequence along a chosen trajectory, over a static or dynamically textured
background, with optional pixel noise.  Ground truth (real-valued centres,
latent states, the generating model) is returned alongside the frames so
trackers and estimators can be scored.

All randomness is derived from a single scenario seed through named
sub-streams, so regeneration is bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np
from scipy import ndimage
from scipy.linalg import solve_discrete_lyapunov

from .geometry import TemplateGeometry
from .lds import LdsModel, simulate

# Average per-pixel standard deviation of the dynamic part of a generated
# template.  With the mean confined to [0.2, 0.8] this keeps intensities
# inside [0, 1] with high probability.
TARGET_PIXEL_STD = 0.03

TRAJECTORY_KINDS = ("constant-velocity", "sinusoidal", "random-walk")
BACKGROUND_KINDS = ("static", "lds")


def _from_dict(cls, data: dict, context: str):
    """Build a dataclass from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ValueError(f"{context}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"{context}: unknown keys {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class TrajectorySpec:
    """Path of the template centre, in (row, col) frame coordinates."""

    kind: str = "constant-velocity"
    start: tuple[float, float] = (15.0, 15.0)
    velocity: tuple[float, float] = (np.sqrt(0.5), np.sqrt(0.5))  # 1 px/frame
    amplitude: tuple[float, float] = (0.0, 8.0)
    period: float = 40.0
    step_sigma: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        object.__setattr__(self, "start", tuple(float(v) for v in self.start))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        object.__setattr__(self, "amplitude", tuple(float(v) for v in self.amplitude))


@dataclass(frozen=True)
class BackgroundSpec:
    kind: str = "static"
    order: int = 3
    spectral_radius: float = 0.9
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in BACKGROUND_KINDS:
            raise ValueError(f"unknown background kind {self.kind!r}")


@dataclass(frozen=True)
class ScenarioSpec:
    order: int = 5
    patch_rows: int = 21
    patch_cols: int = 21
    frame_rows: int = 101
    frame_cols: int = 101
    spectral_radius: float = 0.9
    n_frames: int = 100
    obs_noise_sigma: float = 0.02
    seed: int = 0
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    background: BackgroundSpec = field(default_factory=BackgroundSpec)

    def __post_init__(self) -> None:
        if self.n_frames < 1:
            raise ValueError("n_frames must be positive")
        if not 0.0 < self.spectral_radius < 1.0:
            raise ValueError("spectral radius must lie in (0, 1)")
        if self.obs_noise_sigma < 0.0:
            raise ValueError("obs_noise_sigma must be nonnegative")
        if self.patch_rows > self.frame_rows or self.patch_cols > self.frame_cols:
            raise ValueError("patch does not fit inside the frame")

    @property
    def patch_geometry(self) -> TemplateGeometry:
        return TemplateGeometry(rows=self.patch_rows, cols=self.patch_cols)

    @property
    def frame_geometry(self) -> TemplateGeometry:
        return TemplateGeometry(rows=self.frame_rows, cols=self.frame_cols)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "trajectory":
                v = {g.name: getattr(v, g.name) for g in fields(TrajectorySpec)}
                v = {k: list(val) if isinstance(val, tuple) else val for k, val in v.items()}
            elif f.name == "background":
                v = {g.name: getattr(v, g.name) for g in fields(BackgroundSpec)}
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSpec":
        if not isinstance(data, dict):
            raise ValueError("scenario: expected an object")
        data = dict(data)
        if "trajectory" in data:
            data["trajectory"] = _from_dict(TrajectorySpec, data["trajectory"], "scenario.trajectory")
        if "background" in data:
            data["background"] = _from_dict(BackgroundSpec, data["background"], "scenario.background")
        return _from_dict(cls, data, "scenario")


@dataclass
class GroundTruth:
    """What the generator knows: centres, states and the model itself."""

    centres: np.ndarray  # (T, 2) real-valued (row, col)
    states: np.ndarray  # (T, order)
    model: LdsModel
    templates: np.ndarray  # (T, N) noiseless template pixels as pasted


def smooth_random_image(
    shape: tuple[int, int],
    rng: np.random.Generator,
    low: float = 0.0,
    high: float = 1.0,
    smoothness: float = 2.5,
) -> np.ndarray:
    """Gaussian-filtered noise rescaled to exactly span [low, high]."""
    raw = ndimage.gaussian_filter(rng.standard_normal(shape), smoothness)
    lo, hi = raw.min(), raw.max()
    if hi - lo < 1e-12:
        return np.full(shape, (low + high) / 2.0)
    return low + (high - low) * (raw - lo) / (hi - lo)


def random_model(
    order: int,
    geometry: TemplateGeometry,
    spectral_radius: float,
    seed: int | np.random.SeedSequence,
    mu_range: tuple[float, float] = (0.2, 0.8),
    target_pixel_std: float = TARGET_PIXEL_STD,
) -> LdsModel:
    """Random stable template generator.

    ``A`` is a Gaussian matrix rescaled to the exact requested spectral
    radius, ``C`` has orthonormal columns, the mean image is smooth noise in
    ``mu_range``, and ``Q = q I`` with ``q`` calibrated through the stationary
    covariance (discrete Lyapunov equation) so the average pixel standard
    deviation of the dynamic part equals ``target_pixel_std``.
    """
    if order < 1:
        raise ValueError("order must be positive")
    if not 0.0 < spectral_radius < 1.0:
        raise ValueError("spectral radius must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((order, order))
    rho = np.abs(np.linalg.eigvals(a)).max()
    if rho == 0.0:
        a = np.eye(order)
        rho = 1.0
    a = a * (spectral_radius / rho)
    q_raw, r_raw = np.linalg.qr(rng.standard_normal((geometry.n_pixels, order)))
    signs = np.sign(np.diag(r_raw))
    signs[signs == 0] = 1.0
    c = q_raw * signs[None, :]
    mu = geometry.vec(smooth_random_image((geometry.rows, geometry.cols), rng, *mu_range))
    # stationary state covariance for unit process noise: P = A P A^T + I
    p_unit = solve_discrete_lyapunov(a, np.eye(order))
    # with C orthonormal the mean pixel variance is q * trace(P) / N
    q_scale = target_pixel_std**2 * geometry.n_pixels / float(np.trace(p_unit))
    return LdsModel(
        mu=mu, A=a, C=c, Q=q_scale * np.eye(order), R=0.0, geometry=geometry
    )


def trajectory_centres(
    spec: TrajectorySpec,
    n_frames: int,
    frame_shape: tuple[int, int],
    geometry: TemplateGeometry,
    rng: np.random.Generator,
) -> np.ndarray:
    """Real-valued centre positions for each frame; validated in-frame."""
    start = np.asarray(spec.start, dtype=float)
    t = np.arange(n_frames)[:, None]
    if spec.kind == "constant-velocity":
        centres = start[None, :] + t * np.asarray(spec.velocity)
    elif spec.kind == "sinusoidal":
        centres = start[None, :] + np.asarray(spec.amplitude) * np.sin(
            2.0 * np.pi * t / spec.period
        )
    else:  # random-walk, reflected into the valid band step by step
        lo = geometry.centre
        hi = np.array([frame_shape[0] - 1, frame_shape[1] - 1]) - geometry.centre
        centres = np.empty((n_frames, 2))
        centres[0] = np.clip(start, lo, hi)
        steps = spec.step_sigma * rng.standard_normal((n_frames - 1, 2))
        for k in range(1, n_frames):
            centres[k] = np.clip(centres[k - 1] + steps[k - 1], lo, hi)
    lo = geometry.centre
    hi = np.array([frame_shape[0] - 1, frame_shape[1] - 1]) - geometry.centre
    if np.any(centres < lo) or np.any(centres > hi):
        bad = int(np.argmax(np.any((centres < lo) | (centres > hi), axis=1)))
        raise ValueError(
            f"trajectory leaves the frame at step {bad}: centre {tuple(centres[bad])}"
        )
    return centres


def composite_sequence(spec: ScenarioSpec) -> tuple[np.ndarray, GroundTruth]:
    """Render the scenario: frames (T, H, W) plus ground truth.

    The template is pasted at the integer window nearest the real-valued
    centre (the exact centre is stored in the ground truth); with zero
    observation noise the pasted region reproduces the simulated template
    exactly and every other pixel equals the background.
    """
    root = np.random.SeedSequence(spec.seed)
    model_seed, sim_seed, traj_seed, bg_seed, noise_seed = root.spawn(5)
    geom = spec.patch_geometry
    model = random_model(spec.order, geom, spec.spectral_radius, model_seed)
    templates, states = simulate(model, spec.n_frames, sim_seed)
    centres = trajectory_centres(
        spec.trajectory,
        spec.n_frames,
        (spec.frame_rows, spec.frame_cols),
        geom,
        np.random.default_rng(traj_seed),
    )
    shape = (spec.frame_rows, spec.frame_cols)
    if spec.background.kind == "static":
        bg = smooth_random_image(
            shape, np.random.default_rng(bg_seed), spec.background.low, spec.background.high
        )
        frames = np.tile(bg, (spec.n_frames, 1, 1))
    else:
        bg_model = random_model(
            spec.background.order,
            spec.frame_geometry,
            spec.background.spectral_radius,
            bg_seed,
        )
        bg_templates, _ = simulate(bg_model, spec.n_frames, bg_seed.spawn(1)[0])
        frames = np.stack([spec.frame_geometry.unvec(b) for b in bg_templates])
    for t in range(spec.n_frames):
        tl = np.rint(centres[t] - geom.centre).astype(int)
        frames[t, tl[0] : tl[0] + geom.rows, tl[1] : tl[1] + geom.cols] = geom.unvec(
            templates[t]
        )
    if spec.obs_noise_sigma > 0.0:
        noise_rng = np.random.default_rng(noise_seed)
        frames = frames + spec.obs_noise_sigma * noise_rng.standard_normal(frames.shape)
    return frames, GroundTruth(
        centres=centres, states=states, model=model, templates=templates
    )
