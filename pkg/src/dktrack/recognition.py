"""Recognition of dynamic templates by tracking cost and Martin distance.

Given a library of labelled template models and a test sequence, three
strategies are offered:

* ``tr-r``: track the sequence with every model and pick the one with the
  lowest mean per-frame objective (reconstruction cost);
* ``t+r``: take the winner of the tracking pass, identify a fresh model from
  the patches along its track, and classify it by nearest Martin distance to
  the library;
* ``tr-c``: for each library model, identify a fresh model from the patches
  along that model's own track and score it by the Martin distance back to
  the model that produced the track.

The subspace-angle (Martin) distance compares the extended observability
subspaces of two models over a finite horizon; the template mean plays no
part in it.  All three strategies consume one shared tracking pass, with each
model tried both as-is and horizontally reflected (the cheaper run kept).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import orth

from .geometry import TemplateGeometry, bilinear_patch
from .lds import LdsModel, identify, transform_model
from .tracker import TrackerConfig, TrackResult, track_sequence

STRATEGY_TR_R = "tr-r"
STRATEGY_T_PLUS_R = "t+r"
STRATEGY_TR_C = "tr-c"
STRATEGIES = (STRATEGY_TR_R, STRATEGY_T_PLUS_R, STRATEGY_TR_C)

# Cosines of principal angles are floored here inside the log, which caps the
# per-angle contribution of numerically orthogonal directions.
_COS2_FLOOR = 1e-12

_ORTH_RCOND = 1e-10

RECOGNITION_CSV_HEADER = ["test_id", "model_id", "label", "cost", "strategy"]


@dataclass(frozen=True)
class TrainingSet:
    models: tuple[LdsModel, ...]
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "labels", tuple(str(l) for l in self.labels))
        if len(self.models) == 0:
            raise ValueError("training set is empty")
        if len(self.models) != len(self.labels):
            raise ValueError(
                f"{len(self.models)} models but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.models)


@dataclass
class ModelTrack:
    """Tracking outcome of one library model on one test sequence."""

    model_index: int
    model: LdsModel  # the transformed (and possibly reflected) model used
    reflected: bool
    track: TrackResult
    cost: float  # mean objective; +inf if the track hit the frame boundary


@dataclass
class RecognitionResult:
    strategy: str
    costs: np.ndarray
    winner: int
    label: str
    winner_track: TrackResult
    model_tracks: list[ModelTrack]


def extended_observability(model: LdsModel, horizon: int) -> np.ndarray:
    """Stack [C; CA; ...; C A^(horizon-1)]."""
    blocks = []
    block = model.C
    for _ in range(horizon):
        blocks.append(block)
        block = block @ model.A
    return np.vstack(blocks)


def martin_distance(model_a: LdsModel, model_b: LdsModel) -> float:
    """Subspace-angle distance between the dynamics of two models.

    Uses the principal angles between finite-horizon extended observability
    subspaces, with horizon 10 times the larger order (capped at 50):
    ``d = -sum log cos^2(theta_i)``.  The mean templates are not involved.
    Rank-deficient observability matrices restrict the angle count to the
    numerical ranks (with a warning).
    """
    if model_a.order == 0 or model_b.order == 0:
        raise ValueError("Martin distance is undefined for order-0 models")
    if model_a.geometry != model_b.geometry:
        raise ValueError(
            f"models live on different pixel grids: {model_a.geometry} vs {model_b.geometry}"
        )
    if np.array_equal(model_a.A, model_b.A) and np.array_equal(model_a.C, model_b.C):
        # same observability subspace, so every principal angle is zero
        return 0.0
    horizon = min(10 * max(model_a.order, model_b.order), 50)
    bases = []
    for m in (model_a, model_b):
        obs = extended_observability(m, horizon)
        basis = orth(obs, rcond=_ORTH_RCOND)
        if basis.shape[1] < m.order:
            warnings.warn(
                f"observability matrix of an order-{m.order} model has numerical "
                f"rank {basis.shape[1]}; angles restricted accordingly",
                stacklevel=2,
            )
        bases.append(basis)
    sv = np.linalg.svd(bases[0].T @ bases[1], compute_uv=False)
    cos2 = np.clip(sv**2, _COS2_FLOOR, 1.0)
    return float(-np.sum(np.log(cos2)))


def nn_classify(costs: np.ndarray, labels) -> tuple[int, str]:
    """Nearest-neighbour decision; ties break to the lowest index."""
    costs = np.asarray(costs, dtype=float)
    if len(costs) != len(labels):
        raise ValueError("costs and labels disagree in length")
    if not np.any(np.isfinite(costs)):
        raise ValueError("all candidates were rejected (infinite cost)")
    winner = int(np.argmin(costs))
    return winner, labels[winner]


def track_with_models(
    frames: np.ndarray,
    initial_location: np.ndarray,
    training: TrainingSet,
    config: TrackerConfig,
    geometry: TemplateGeometry,
) -> list[ModelTrack]:
    """Track the sequence once per library model (shared by all strategies).

    Each model is transformed to the test window geometry and run both as-is
    and horizontally reflected; the run with the lower mean objective is kept.
    A track that hits the frame boundary is kept but costed at +inf.
    """
    outcomes = []
    for idx, model in enumerate(training.models):
        best = None
        for reflected in (False, True):
            candidate = transform_model(model, geometry, reflect_horizontal=reflected)
            track = track_sequence(
                frames, candidate, initial_location, config, model_id=training.labels[idx]
            )
            if best is None or track.mean_objective < best[1].mean_objective:
                best = (candidate, track, reflected)
        candidate, track, reflected = best
        exited = any(s.clamped for s in track.states[1:])
        cost = np.inf if exited else track.mean_objective
        outcomes.append(
            ModelTrack(
                model_index=idx,
                model=candidate,
                reflected=reflected,
                track=track,
                cost=cost,
            )
        )
    return outcomes


def _patches_along_track(frames: np.ndarray, track: TrackResult, geometry: TemplateGeometry) -> np.ndarray:
    return np.stack(
        [bilinear_patch(frames[t], s.location, geometry) for t, s in enumerate(track.states)]
    )


def _identify_from_track(
    frames: np.ndarray, track: TrackResult, geometry: TemplateGeometry, order: int
) -> LdsModel | None:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return identify(_patches_along_track(frames, track, geometry), order, geometry)
    except ValueError as exc:
        warnings.warn(f"identification along track failed: {exc}", stacklevel=3)
        return None


def recognize(
    frames: np.ndarray,
    initial_location: np.ndarray,
    training: TrainingSet,
    config: TrackerConfig,
    strategy: str,
    geometry: TemplateGeometry | None = None,
) -> RecognitionResult:
    """Classify a test sequence against the training library.

    ``geometry`` is the test window size; when omitted, all training models
    must share one geometry and it is used as the window.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if geometry is None:
        geometries = {m.geometry for m in training.models}
        if len(geometries) != 1:
            raise ValueError(
                "training models have mixed geometries; pass the test window geometry"
            )
        geometry = next(iter(geometries))
    frames = np.asarray(frames, dtype=float)
    tracks = track_with_models(frames, initial_location, training, config, geometry)
    track_costs = np.array([t.cost for t in tracks])

    if strategy == STRATEGY_TR_R:
        costs = track_costs
        winner, label = nn_classify(costs, training.labels)
        winner_track = tracks[winner].track
    elif strategy == STRATEGY_T_PLUS_R:
        track_winner, _ = nn_classify(track_costs, training.labels)
        winner_track = tracks[track_winner].track
        identified = _identify_from_track(
            frames, winner_track, geometry, training.models[track_winner].order
        )
        costs = np.full(len(training), np.inf)
        if identified is not None:
            # reflection flips the observability subspace in pixel space, so
            # compare against both orientations of each library model
            for j, model in enumerate(training.models):
                costs[j] = min(
                    martin_distance(identified, transform_model(model, geometry)),
                    martin_distance(
                        identified, transform_model(model, geometry, reflect_horizontal=True)
                    ),
                )
        winner, label = nn_classify(costs, training.labels)
    else:  # tr-c: per-model self-consistency of the identified dynamics
        costs = np.full(len(training), np.inf)
        for j, outcome in enumerate(tracks):
            if not np.isfinite(outcome.cost):
                continue  # track hit the frame boundary; nothing valid to identify
            identified = _identify_from_track(
                frames, outcome.track, geometry, training.models[j].order
            )
            if identified is not None:
                costs[j] = martin_distance(identified, outcome.model)
        winner, label = nn_classify(costs, training.labels)
        winner_track = tracks[winner].track

    return RecognitionResult(
        strategy=strategy,
        costs=costs,
        winner=winner,
        label=label,
        winner_track=winner_track,
        model_tracks=tracks,
    )
