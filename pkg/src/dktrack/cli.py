"""Command-line harness for generation, identification, tracking and recognition.

Subcommands:

  synth      render a synthetic scenario (frames + ground truth + model)
  identify   learn a template model from a directory of PGM patches
  track      track a template through a PGM frame sequence
  estimate   fixed-location state estimation benchmark (dk-ssd / ekf / pf)
  martin     pairwise subspace-angle distances between saved models
  recognize  classify test sequences against a model library
  eval       location-error metrics from a track and ground truth

Every subcommand is a pure function of its inputs and seed: reruns write
byte-identical files.  Errors exit nonzero with a single ``error: ...`` line
on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import baselines, fileio
from .fileio import FormatError
from .geometry import TemplateGeometry
from .lds import identify, load_model, save_model, simulate
from .recognition import STRATEGIES, TrainingSet, martin_distance, recognize
from .synth import ScenarioSpec, composite_sequence, random_model
from .tracker import (
    FEATURE_HIST,
    FEATURE_IDENTITY,
    TrackerConfig,
    read_tracks_csv,
    track_sequence,
    write_tracks_csv,
)

METHODS = (baselines.METHOD_DK_SSD, baselines.METHOD_EKF, baselines.METHOD_PF)


class CliError(Exception):
    """User-facing failure; main() reports it as ``error: <msg>``."""


@dataclass
class MetricsReport:
    """Per-frame Euclidean location errors and their summary statistics.

    ``rse`` is the robust standard error: the square root of the median of
    the squared deviations from the median error.
    """

    errors: np.ndarray
    median: float
    rse: float
    mean: float
    std: float

    def to_dict(self) -> dict:
        return {
            "n_frames": int(self.errors.size),
            "median": self.median,
            "rse": self.rse,
            "mean": self.mean,
            "std": self.std,
        }


def compute_metrics(locations: np.ndarray, ground_truth: np.ndarray) -> MetricsReport:
    """Summarize per-frame location error between a track and the truth."""
    locations = np.asarray(locations, dtype=float)
    ground_truth = np.asarray(ground_truth, dtype=float)
    if locations.ndim != 2 or locations.shape[1] != 2:
        raise ValueError(f"locations must have shape (T, 2), got {locations.shape}")
    if locations.shape != ground_truth.shape:
        raise ValueError(
            f"length mismatch: {locations.shape[0]} tracked vs "
            f"{ground_truth.shape[0]} ground-truth frames"
        )
    if locations.shape[0] == 0:
        raise ValueError("empty input")
    errors = np.linalg.norm(locations - ground_truth, axis=1)
    med = float(np.median(errors))
    rse = float(np.sqrt(np.median((errors - med) ** 2)))
    return MetricsReport(
        errors=errors,
        median=med,
        rse=rse,
        mean=float(errors.mean()),
        std=float(errors.std()),
    )


def tracker_config_from_dict(data: dict) -> TrackerConfig:
    if not isinstance(data, dict):
        raise ValueError("tracker config: expected an object")
    known = {f.name for f in dataclasses.fields(TrackerConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"tracker config: unknown keys {sorted(unknown)}")
    return TrackerConfig(**data)


def _load_tracker_config(path, feature: str) -> TrackerConfig:
    if path is None:
        return TrackerConfig(feature=feature)
    data = fileio.load_json(path)
    data.setdefault("feature", feature)
    return tracker_config_from_dict(data)


def _parse_start(text: str) -> np.ndarray:
    """Parse 'cx,cy' (column,row) into an internal (row, col) centre."""
    parts = text.split(",")
    if len(parts) != 2:
        raise CliError(f"--start expects 'cx,cy', got {text!r}")
    try:
        cx, cy = (float(p) for p in parts)
    except ValueError:
        raise CliError(f"--start expects two numbers, got {text!r}") from None
    return np.array([cy, cx])


def _default_start(frame_shape: tuple[int, int]) -> np.ndarray:
    return np.array([(frame_shape[0] - 1) / 2.0, (frame_shape[1] - 1) / 2.0])


def _load_scenario(path, seed) -> ScenarioSpec:
    spec = ScenarioSpec() if path is None else ScenarioSpec.from_dict(fileio.load_json(path))
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    return spec


def _cmd_synth(args) -> int:
    spec = _load_scenario(args.config, args.seed)
    frames, truth = composite_sequence(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_frames(out / "frames", frames)
    fileio.write_ground_truth_csv(out / "ground_truth.csv", truth.centres)
    fileio.write_states_json(out / "states.json", truth.states)
    save_model(truth.model, out / "model.json")
    fileio.dump_json(out / "scenario.json", spec.to_dict())
    print(f"wrote {spec.n_frames} frames to {out}")
    return 0


def _cmd_identify(args) -> int:
    frames = fileio.read_frames(args.frames)
    geometry = _frame_geometry(frames)
    patches = np.stack([geometry.vec(f) for f in frames])
    model = identify(patches, args.order, geometry)
    save_model(model, args.out)
    print(f"identified order-{model.order} model from {len(frames)} patches -> {args.out}")
    return 0


def _frame_geometry(frames: np.ndarray) -> TemplateGeometry:
    return TemplateGeometry(rows=frames.shape[1], cols=frames.shape[2])


def _cmd_track(args) -> int:
    frames = fileio.read_frames(args.frames)
    model = load_model(args.model)
    config = _load_tracker_config(args.config, args.feature)
    if args.start is not None:
        start = _parse_start(args.start)
    else:
        start = _default_start(frames.shape[1:])
    result = track_sequence(frames, model, start, config)
    write_tracks_csv(result, args.out)
    print(
        f"tracked {len(result.states)} frames, mean objective "
        f"{result.mean_objective:.6g} -> {args.out}"
    )
    return 0


def _cmd_estimate(args) -> int:
    spec = _load_scenario(args.config, args.seed)
    root = np.random.SeedSequence(spec.seed)
    model_seed, sim_seed, est_seed = root.spawn(3)
    model = random_model(spec.order, spec.patch_geometry, spec.spectral_radius, model_seed)
    patches, states = simulate(model, spec.n_frames, sim_seed)
    config = _load_tracker_config(args.tracker_config, args.feature)
    est_seed_int = int(est_seed.generate_state(1)[0])
    result = baselines.estimate_states(
        patches,
        model,
        args.method,
        config=config,
        mode=args.feature,
        seed=est_seed_int,
        init=args.init,
        init_scale=args.init_scale,
        n_particles=args.particles,
        true_states=states,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    s1, s2, s3 = result.bands
    rows = [
        (t, result.errors[t], s1, s2, s3, args.method, spec.seed)
        for t in range(spec.n_frames)
    ]
    fileio.write_error_trace_csv(out / "errors.csv", rows)
    fileio.write_states_json(out / "states.json", result.states)
    print(
        f"{args.method}: final state error {result.errors[-1]:.6g} "
        f"(1-std band {s1:.6g}) -> {out}"
    )
    return 0


def _cmd_martin(args) -> int:
    models = [(path, load_model(path)) for path in args.models]
    lines = ["model_a,model_b,distance"]
    for i in range(len(models)):
        for j in range(i + 1, len(models)):
            d = martin_distance(models[i][1], models[j][1])
            lines.append(f"{models[i][0]},{models[j][0]},{repr(d)}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out is not None:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(text)
    return 0


def _load_manifest(path):
    data = fileio.load_json(path)
    if not isinstance(data, dict) or set(data) != {"training", "tests"}:
        raise ValueError(f"{path}: manifest must have exactly the keys 'training' and 'tests'")
    base = Path(path).parent
    training_entries = []
    for k, entry in enumerate(data["training"]):
        if not isinstance(entry, dict) or not {"label", "model"} <= set(entry):
            raise ValueError(f"{path}: training[{k}] needs 'label' and 'model'")
        unknown = set(entry) - {"label", "model"}
        if unknown:
            raise ValueError(f"{path}: training[{k}]: unknown keys {sorted(unknown)}")
        training_entries.append((str(entry["label"]), str(entry["model"]), base / entry["model"]))
    tests = []
    for k, entry in enumerate(data["tests"]):
        if not isinstance(entry, dict) or not {"id", "frames"} <= set(entry):
            raise ValueError(f"{path}: tests[{k}] needs 'id' and 'frames'")
        unknown = set(entry) - {"id", "frames", "start", "label"}
        if unknown:
            raise ValueError(f"{path}: tests[{k}]: unknown keys {sorted(unknown)}")
        start = entry.get("start")
        if start is not None:
            if not isinstance(start, (list, tuple)) or len(start) != 2:
                raise ValueError(f"{path}: tests[{k}]: 'start' must be [cx, cy]")
            start = np.array([float(start[1]), float(start[0])])
        tests.append(
            {
                "id": str(entry["id"]),
                "frames": base / entry["frames"],
                "start": start,
                "label": entry.get("label"),
            }
        )
    if not training_entries or not tests:
        raise ValueError(f"{path}: manifest needs at least one training model and one test")
    return training_entries, tests


def _cmd_recognize(args) -> int:
    training_entries, tests = _load_manifest(args.manifest)
    models = tuple(load_model(p) for _, _, p in training_entries)
    labels = tuple(label for label, _, _ in training_entries)
    model_ids = [ref for _, ref, _ in training_entries]
    training = TrainingSet(models=models, labels=labels)
    config = _load_tracker_config(args.config, args.feature)
    out = Path(args.out)
    (out / "tracks").mkdir(parents=True, exist_ok=True)
    rows = []
    outcomes = []
    for test in tests:
        frames = fileio.read_frames(test["frames"])
        start = test["start"] if test["start"] is not None else _default_start(frames.shape[1:])
        result = recognize(frames, start, training, config, args.strategy)
        outcomes.append((test, result))
        for j, cost in enumerate(result.costs):
            rows.append((test["id"], model_ids[j], result.label, cost, args.strategy))
        write_tracks_csv(result.winner_track, out / "tracks" / f"{test['id']}.csv")
        print(f"{test['id']}: predicted {result.label}")
    fileio.write_recognition_csv(out / "recognition.csv", rows)
    if all(test["label"] is not None for test, _ in outcomes):
        all_labels = sorted(set(labels) | {str(t["label"]) for t, _ in outcomes})
        index = {lab: k for k, lab in enumerate(all_labels)}
        confusion = np.zeros((len(all_labels), len(all_labels)), dtype=int)
        correct = 0
        for test, result in outcomes:
            confusion[index[str(test["label"])], index[result.label]] += 1
            correct += str(test["label"]) == result.label
        fileio.write_confusion_csv(out / "confusion.csv", all_labels, confusion)
        print(f"accuracy {correct}/{len(outcomes)}")
    return 0


def _cmd_eval(args) -> int:
    track = read_tracks_csv(args.tracks)
    truth = fileio.read_ground_truth_csv(args.truth)
    # track columns are frame, loc_x (col), loc_y (row), ...
    locations = track[:, [2, 1]]
    report = compute_metrics(locations, truth)
    data = report.to_dict()
    line = json.dumps(data, sort_keys=True)
    print(line)
    if args.out is not None:
        data["errors"] = [float(e) for e in report.errors]
        fileio.dump_json(args.out, data)
    return 0


class _Parser(argparse.ArgumentParser):
    """Argparse variant whose failures raise instead of exiting."""

    def error(self, message):
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dktrack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic scenario")
    p.add_argument("--config", help="scenario JSON (defaults built in)")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("identify", help="learn a model from PGM patches")
    p.add_argument("--frames", required=True, help="directory of frame_NNNNN.pgm patches")
    p.add_argument("--order", type=int, default=5)
    p.add_argument("--out", required=True, help="output model JSON")
    p.set_defaults(func=_cmd_identify)

    p = sub.add_parser("track", help="track a template through a sequence")
    p.add_argument("--frames", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output tracks CSV")
    p.add_argument("--feature", choices=[FEATURE_HIST, FEATURE_IDENTITY], default=FEATURE_HIST)
    p.add_argument("--config", help="tracker config JSON")
    p.add_argument("--start", help="initial centre as 'cx,cy' (default: frame centre)")
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("estimate", help="fixed-location state estimation benchmark")
    p.add_argument("--config", help="scenario JSON (defaults built in)")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--method", choices=list(METHODS), default=baselines.METHOD_DK_SSD)
    p.add_argument(
        "--feature",
        choices=[FEATURE_HIST, FEATURE_IDENTITY],
        default=FEATURE_IDENTITY,
        help="observation model for the benchmark (plain patch SSD by default)",
    )
    p.add_argument("--init", choices=["pinv", "random"], default="pinv")
    p.add_argument("--init-scale", type=float, default=3.0, dest="init_scale")
    p.add_argument("--particles", type=int, default=100)
    p.add_argument("--tracker-config", dest="tracker_config", help="tracker config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("martin", help="pairwise model distances")
    p.add_argument("models", nargs="+", help="model JSON files")
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(func=_cmd_martin)

    p = sub.add_parser("recognize", help="classify test sequences against a library")
    p.add_argument("--manifest", required=True, help="JSON manifest of models and tests")
    p.add_argument("--strategy", choices=list(STRATEGIES), required=True)
    p.add_argument("--feature", choices=[FEATURE_HIST, FEATURE_IDENTITY], default=FEATURE_HIST)
    p.add_argument("--config", help="tracker config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_recognize)

    p = sub.add_parser("eval", help="location-error metrics for a track")
    p.add_argument("--tracks", required=True, help="tracks CSV from `track`")
    p.add_argument("--truth", required=True, help="ground-truth CSV")
    p.add_argument("--out", help="write the full report JSON here")
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
