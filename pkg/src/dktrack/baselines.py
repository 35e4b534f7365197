"""Baseline state estimators: extended Kalman filter and particle filter.

Both baselines estimate the latent state of a template model from observed
patches at a known, fixed location, and exist to be compared against the
gradient-descent MAP estimator on the same observations.  Two observation
maps are supported, matching the tracker's feature modes:

* kernel-histogram: h(x) = sqrt of the soft histogram of mu + C x, compared
  with the sqrt histogram of the observed patch (observation noise sigma_h2);
* identity: h(x) = mu + C x compared with the raw patch (observation noise R),
  in which case the extended filter reduces to a plain Kalman filter.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from . import features
from .features import BinningSpec, KernelSpec
from .lds import LdsModel, init_state, psd_sqrt
from .tracker import FEATURE_HIST, FEATURE_IDENTITY, TrackerConfig, solve_frame

# Relative eigenvalue threshold below which innovation-covariance directions
# are treated as unobservable (pseudo-inverse style).
_S_RTOL = 1e-12

_R_FLOOR = 1e-6

METHOD_DK_SSD = "dk-ssd"
METHOD_EKF = "ekf"
METHOD_PF = "pf"

ERROR_CSV_HEADER = ["t", "err", "std1", "std2", "std3", "method", "seed"]


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class ParticleSet:
    states: np.ndarray  # (P, order)
    weights: np.ndarray  # (P,)

    def mean(self) -> np.ndarray:
        return self.weights @ self.states

    @classmethod
    def at_state(cls, state: np.ndarray, n_particles: int) -> "ParticleSet":
        states = np.tile(np.asarray(state, dtype=float), (n_particles, 1))
        return cls(states=states, weights=np.full(n_particles, 1.0 / n_particles))


def _observation_terms(model: LdsModel, config: TrackerConfig, mode: str):
    """Kernel and binning shared by the histogram observation map."""
    kernel = KernelSpec.for_geometry(model.geometry)
    binning = config.binning()
    return kernel, binning


def _sym_pinv(s: np.ndarray, context: str) -> np.ndarray:
    """Invert a symmetric innovation covariance, flooring bad eigenvalues."""
    s = (s + s.T) / 2.0
    w, v = np.linalg.eigh(s)
    top = max(w.max(), 0.0)
    if w.min() < -1e-8 * max(top, 1.0):
        warnings.warn(
            f"{context}: innovation covariance has negative eigenvalue "
            f"{w.min():.3e}; clamping",
            stacklevel=3,
        )
    inv_w = np.where(w > _S_RTOL * max(top, 1e-300), 1.0 / np.maximum(w, 1e-300), 0.0)
    return (v * inv_w) @ v.T


def ekf_step(
    belief: GaussianBelief,
    observation: np.ndarray,
    model: LdsModel,
    config: TrackerConfig,
    mode: str = FEATURE_HIST,
) -> GaussianBelief:
    """One predict-update cycle; ``observation`` is the raw patch."""
    observation = np.asarray(observation, dtype=float)
    m_pred = model.A @ belief.mean
    p_pred = model.A @ belief.cov @ model.A.T + model.Q
    if mode == FEATURE_HIST:
        kernel, binning = _observation_terms(model, config, mode)
        z = features.sqrt_histogram(
            features.soft_histogram(observation, model.geometry, kernel, binning)
        )
        hist, jac = features.template_soft_histogram(
            model, m_pred, kernel, binning, with_jacobian=True
        )
        h = features.sqrt_histogram(hist)
        obs_jac = features._sqrt_scale(hist.values)[:, None] * jac
        r_obs = config.sigma_h2
    elif mode == FEATURE_IDENTITY:
        z = observation
        h = model.mu + model.C @ m_pred
        obs_jac = model.C
        r_obs = model.R
    else:
        raise ValueError(f"unknown observation mode {mode!r}")
    innovation = z - h
    s = obs_jac @ p_pred @ obs_jac.T + r_obs * np.eye(len(z))
    gain = p_pred @ obs_jac.T @ _sym_pinv(s, "ekf_step")
    mean = m_pred + gain @ innovation
    ikh = np.eye(model.order) - gain @ obs_jac
    cov = ikh @ p_pred @ ikh.T + r_obs * (gain @ gain.T)
    return GaussianBelief(mean=mean, cov=(cov + cov.T) / 2.0)


def pf_step(
    particles: ParticleSet,
    observation: np.ndarray,
    model: LdsModel,
    config: TrackerConfig,
    rng: np.random.Generator,
    mode: str = FEATURE_HIST,
) -> ParticleSet:
    """Condensation-style step: propagate, reweight, resample when depleted.

    Weights multiply ``exp(-observation term)``; if they collapse to zero the
    set is reset to uniform (with a warning).  Systematic resampling triggers
    when the effective sample size falls below half the particle count.
    """
    observation = np.asarray(observation, dtype=float)
    n_particles = particles.states.shape[0]
    b = psd_sqrt(model.Q)
    prop = particles.states @ model.A.T + rng.standard_normal(
        (n_particles, model.order)
    ) @ b.T
    pix = model.mu[None, :] + prop @ model.C.T  # (P, N)
    if mode == FEATURE_HIST:
        kernel, binning = _observation_terms(model, config, mode)
        z = features.sqrt_histogram(
            features.soft_histogram(observation, model.geometry, kernel, binning)
        )
        w, kappa = features.kernel_weights(model.geometry, kernel)
        sift = features.sifting_matrix(pix, binning)  # (P, N, B)
        hist = np.einsum("pnb,n->pb", sift, w) / kappa
        sqrt_hist = np.sqrt(np.clip(hist, 0.0, None))
        obs_term = np.sum((sqrt_hist - z[None, :]) ** 2, axis=1) / (2.0 * config.sigma_h2)
    elif mode == FEATURE_IDENTITY:
        resid = pix - observation[None, :]
        r_eff = max(model.R, _R_FLOOR)
        obs_term = np.sum(resid**2, axis=1) / (2.0 * r_eff)
    else:
        raise ValueError(f"unknown observation mode {mode!r}")
    weights = particles.weights * np.exp(-(obs_term - obs_term.min()))
    total = weights.sum()
    if not np.isfinite(total) or total <= 0.0:
        warnings.warn("pf_step: weights collapsed; resetting to uniform", stacklevel=2)
        weights = np.full(n_particles, 1.0 / n_particles)
    else:
        weights = weights / total
    ess = 1.0 / float(weights @ weights)
    if ess < n_particles / 2.0:
        positions = (rng.uniform() + np.arange(n_particles)) / n_particles
        idx = np.searchsorted(np.cumsum(weights), positions)
        idx = np.clip(idx, 0, n_particles - 1)
        prop = prop[idx]
        weights = np.full(n_particles, 1.0 / n_particles)
    return ParticleSet(states=prop, weights=weights)


@dataclass
class EstimationResult:
    states: np.ndarray  # (T, order) estimated
    errors: np.ndarray | None  # (T,) state error norms, if truth was given
    bands: np.ndarray  # 1/2/3 standard deviations of the process noise norm
    method: str
    seed: int


def noise_bands(model: LdsModel) -> np.ndarray:
    """k * sqrt(trace(Q)) for k = 1, 2, 3: scale of ||B v_t||."""
    sigma = float(np.sqrt(max(np.trace(model.Q), 0.0)))
    return sigma * np.array([1.0, 2.0, 3.0])


def _random_init(model: LdsModel, rng: np.random.Generator, scale: float) -> np.ndarray:
    """Draw an initial state at ``scale`` times the stationary spread."""
    try:
        p_stat = solve_discrete_lyapunov(model.A, model.Q)
        per_coord = np.sqrt(max(np.trace(p_stat), 0.0) / model.order)
    except Exception:
        per_coord = np.sqrt(max(np.trace(model.Q), 0.0) / model.order)
    if per_coord <= 0.0:
        per_coord = 1.0
    return scale * per_coord * rng.standard_normal(model.order)


def estimate_states(
    patches: np.ndarray,
    model: LdsModel,
    method: str,
    config: TrackerConfig | None = None,
    mode: str = FEATURE_HIST,
    seed: int = 0,
    init: str = "pinv",
    init_scale: float = 3.0,
    n_particles: int = 100,
    true_states: np.ndarray | None = None,
) -> EstimationResult:
    """Estimate latent states from patches observed at a known location.

    The first patch seeds the estimate (least squares for ``init='pinv'``, a
    random draw otherwise); the remaining patches are filtered with the chosen
    method.  ``dk-ssd`` runs the tracker's per-frame descent with the location
    locked at the patch centre.
    """
    patches = np.asarray(patches, dtype=float)
    if patches.ndim != 2 or patches.shape[1] != model.geometry.n_pixels:
        raise ValueError(
            f"patches must have shape (T, {model.geometry.n_pixels}), got {patches.shape}"
        )
    if method not in (METHOD_DK_SSD, METHOD_EKF, METHOD_PF):
        raise ValueError(f"unknown method {method!r}")
    if config is None:
        config = TrackerConfig(feature=mode)
    elif config.feature != mode:
        raise ValueError(
            f"config.feature {config.feature!r} disagrees with mode {mode!r}"
        )
    rng = np.random.default_rng(seed)
    if init == "pinv":
        x0 = init_state(model, patches[0])
    elif init == "random":
        x0 = _random_init(model, rng, init_scale)
    else:
        raise ValueError(f"unknown init {init!r}")
    n_frames = patches.shape[0]
    estimates = np.empty((n_frames, model.order))
    estimates[0] = x0
    if method == METHOD_DK_SSD:
        centre = model.geometry.centre
        prev = x0
        for t in range(1, n_frames):
            frame = model.geometry.unvec(patches[t])
            result = solve_frame(
                frame,
                init_location=centre,
                init_state_vec=model.A @ prev,
                prev_state=prev,
                model=model,
                config=config,
                lock_location=True,
            )
            estimates[t] = result.state
            prev = result.state
    elif method == METHOD_EKF:
        if init == "pinv":
            cov0 = model.Q.copy()
        else:
            cov0 = _random_init_cov(model, init_scale)
        belief = GaussianBelief(mean=x0, cov=cov0)
        for t in range(1, n_frames):
            belief = ekf_step(belief, patches[t], model, config, mode=mode)
            estimates[t] = belief.mean
    else:
        particles = ParticleSet.at_state(x0, n_particles)
        for t in range(1, n_frames):
            particles = pf_step(particles, patches[t], model, config, rng, mode=mode)
            estimates[t] = particles.mean()
    errors = None
    if true_states is not None:
        true_states = np.asarray(true_states, dtype=float)
        if true_states.shape != estimates.shape:
            raise ValueError(
                f"true_states must have shape {estimates.shape}, got {true_states.shape}"
            )
        errors = np.linalg.norm(estimates - true_states, axis=1)
    return EstimationResult(
        states=estimates, errors=errors, bands=noise_bands(model), method=method, seed=seed
    )


def _random_init_cov(model: LdsModel, scale: float) -> np.ndarray:
    try:
        p_stat = solve_discrete_lyapunov(model.A, model.Q)
        per_coord = max(np.trace(p_stat), 0.0) / model.order
    except Exception:
        per_coord = max(np.trace(model.Q), 0.0) / model.order
    if per_coord <= 0.0:
        per_coord = 1.0
    return scale**2 * per_coord * np.eye(model.order)
