"""Whole-library acceptance gate.

Each test pins one user-visible guarantee with a frozen tolerance and prints a
single PASS line with the measured margin (visible under ``pytest -s``; under
plain ``pytest -v`` the test outcome line itself is the verdict).  The suite
is self-contained: every experiment regenerates its data from fixed seeds.
"""
import json
import time
import warnings

import numpy as np
from scipy.stats import ortho_group

from dktrack.baselines import estimate_states, noise_bands
from dktrack.cli import main
from dktrack.features import (
    BinningSpec,
    KernelSpec,
    hard_histogram,
    kernel_weights,
    sifting_matrix,
    soft_histogram,
    sqrt_histogram,
    _sqrt_scale,
)
from dktrack.fileio import write_frames
from dktrack.geometry import TemplateGeometry, bilinear_patch, clamp_centre
from dktrack.lds import LdsModel, identify, init_state, save_model, simulate
from dktrack.recognition import martin_distance, nn_classify
from dktrack.synth import ScenarioSpec, composite_sequence, random_model, smooth_random_image
from dktrack.tracker import TrackerConfig, gradient, objective, solve_frame, track_sequence


def _report(name: str, ok: bool, detail: str) -> None:
    line = f"{name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    assert ok, line


# ------------------------------------------------------------------ 1


def test_criterion_01_gradients_match_finite_differences():
    """Analytic location/state gradients agree with central differences."""
    t0 = time.monotonic()
    rng = np.random.default_rng(42)
    geom = TemplateGeometry(rows=9, cols=9)
    cfg = TrackerConfig()
    worst = 0.0
    for _ in range(100):
        model = random_model(3, geom, 0.85, rng.integers(2**32), mu_range=(0.1, 0.9))
        frame = rng.uniform(0.05, 0.95, size=(25, 25))
        loc = np.array([12.0, 12.0]) + rng.uniform(-2, 2, size=2)
        state = 1.5 * rng.standard_normal(3)
        prev = rng.standard_normal(3)
        g_loc, g_state = gradient(frame, loc, state, model, cfg, prev)
        g = np.concatenate([g_loc, g_state])
        z = np.concatenate([loc, state])
        fd = np.empty_like(g)
        h = 1e-5
        for i in range(len(z)):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            fd[i] = (
                objective(frame, zp[:2], zp[2:], model, cfg, prev)
                - objective(frame, zm[:2], zm[2:], model, cfg, prev)
            ) / (2 * h)
        rel = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)
        worst = max(worst, rel)
    elapsed = time.monotonic() - t0
    _report(
        "criterion 1",
        worst <= 1e-3 and elapsed < 60.0,
        f"worst rel err {worst:.2e} <= 1e-3 over 100 configs, {elapsed:.1f}s < 60s",
    )


# ------------------------------------------------------------------ 2


def test_criterion_02_state_estimation_beats_filter_baselines():
    """Per-frame descent stays inside the 2-std noise band; EKF/PF do worse.

    Ten random order-5 generators, known fixed location, least-squares init.
    The descent estimator observes plain patches; the filters run on the
    kernel-histogram feature.
    """
    t0 = time.monotonic()
    geom = TemplateGeometry(rows=21, cols=21)
    n_frames = 101
    normalized = []
    finals = {"dk-ssd": [], "ekf": [], "pf": []}
    for child in np.random.SeedSequence(1234).spawn(10):
        model_seed, sim_seed, est_seed = child.spawn(3)
        model = random_model(5, geom, 0.9, model_seed)
        patches, states = simulate(model, n_frames, sim_seed)
        band2 = noise_bands(model)[1]
        est_int = int(est_seed.generate_state(1)[0])
        dk = estimate_states(patches, model, "dk-ssd", mode="identity", true_states=states)
        ekf = estimate_states(patches, model, "ekf", mode="hist", true_states=states)
        pf = estimate_states(
            patches, model, "pf", mode="hist", seed=est_int, n_particles=100,
            true_states=states,
        )
        normalized.append(dk.errors / band2)
        finals["dk-ssd"].append(dk.errors[-1])
        finals["ekf"].append(ekf.errors[-1])
        finals["pf"].append(pf.errors[-1])
    med_curve = np.median(np.array(normalized), axis=0)
    worst_t = float(med_curve[1:].max())
    dk_final = float(np.median(finals["dk-ssd"]))
    ekf_final = float(np.median(finals["ekf"]))
    pf_final = float(np.median(finals["pf"]))
    elapsed = time.monotonic() - t0
    _report(
        "criterion 2",
        worst_t <= 1.0 and ekf_final > dk_final and pf_final > dk_final and elapsed < 600.0,
        f"median err <= {worst_t:.1e} of the 2-std band at every frame; "
        f"final medians dk {dk_final:.2e} < ekf {ekf_final:.2e}, pf {pf_final:.2e}; "
        f"{elapsed:.0f}s < 600s",
    )


# ------------------------------------------------------------------ 3


def test_criterion_03_random_init_converges_into_noise_band():
    """From random initial states the median error settles into the 2-std band."""
    geom = TemplateGeometry(rows=21, cols=21)
    model = random_model(5, geom, 0.9, 7)
    patches, states = simulate(model, 101, 11)
    band2 = noise_bands(model)[1]
    errs = np.array([
        estimate_states(
            patches, model, "dk-ssd", mode="identity", init="random", seed=s,
            true_states=states,
        ).errors
        for s in range(10)
    ])
    med = np.median(errs, axis=0)
    inside = med <= band2
    entry = next((t for t in range(len(med)) if inside[t:].all()), None)
    _report(
        "criterion 3",
        entry is not None and entry <= 30,
        f"median error enters the 2-std band for good at frame {entry} <= 30",
    )


# ------------------------------------------------------------------ 4


def test_criterion_04_identification_round_trip():
    """Noiseless generator output identifies back to the generator."""
    rng = np.random.default_rng(21)
    geom = TemplateGeometry(rows=15, cols=15)
    order = 5
    # all modes decay at the same slow rate so a single ring-down excites
    # every direction across the whole sequence
    a = 0.95 * ortho_group.rvs(order, random_state=rng)
    q_raw, r_raw = np.linalg.qr(rng.standard_normal((geom.n_pixels, order)))
    c = q_raw * np.sign(np.diag(r_raw))
    mu = geom.vec(smooth_random_image((15, 15), rng, 0.3, 0.7))
    generator = LdsModel(
        mu=mu, A=a, C=c, Q=1e-8 * np.eye(order), R=0.0, geometry=geom,
    )
    x = rng.standard_normal(order)
    states = np.empty((100, order))
    for t in range(100):
        x = a @ x
        states[t] = x
    patches = mu[None, :] + states @ c.T
    learned = identify(patches, order, geom)
    dist = martin_distance(learned, generator)
    recon = np.array([learned.mu + learned.C @ init_state(learned, p) for p in patches])
    residual = float(np.linalg.norm(recon - patches) / np.linalg.norm(patches))
    _report(
        "criterion 4",
        dist < 1e-6 and residual < 1e-10,
        f"Martin distance to generator {dist:.2e} < 1e-6, "
        f"relative reconstruction residual {residual:.2e} < 1e-10",
    )


# ------------------------------------------------------------------ 5


def test_criterion_05_martin_distance_invariances():
    """Zero self-distance, basis-change invariance, symmetry."""
    geom = TemplateGeometry(rows=11, cols=11)
    rng = np.random.default_rng(17)
    model = random_model(4, geom, 0.9, 18)
    other = random_model(4, geom, 0.9, 19)
    self_dist = martin_distance(model, model)
    worst_sim = 0.0
    for _ in range(20):
        p = rng.standard_normal((4, 4)) + 0.5 * np.eye(4)
        p_inv = np.linalg.inv(p)
        similar = LdsModel(
            mu=model.mu,
            A=p @ model.A @ p_inv,
            C=model.C @ p_inv,
            Q=p @ model.Q @ p.T,
            R=model.R,
            geometry=geom,
        )
        worst_sim = max(worst_sim, martin_distance(model, similar))
    asym = abs(martin_distance(model, other) - martin_distance(other, model))
    _report(
        "criterion 5",
        self_dist == 0.0 and worst_sim < 1e-8 and asym < 1e-8,
        f"self distance {self_dist}, similarity worst {worst_sim:.2e} < 1e-8 "
        f"over 20 random bases, asymmetry {asym:.2e} < 1e-8",
    )


# ------------------------------------------------------------------ 6


def test_criterion_06_tracks_default_moving_scenario():
    """Default constant-velocity scenario tracked with the generator model."""
    spec = ScenarioSpec(obs_noise_sigma=0.02)
    frames, truth = composite_sequence(spec)
    config = TrackerConfig(record_trace=True)
    result = track_sequence(frames, truth.model, truth.centres[0], config)
    errors = np.linalg.norm(result.locations() - truth.centres, axis=1)
    median_px = float(np.median(errors))
    monotone = all(
        all(b <= a + 1e-12 for a, b in zip(s.objective_trace, s.objective_trace[1:]))
        for s in result.states[1:]
    )
    median_iters = float(np.median([s.iterations for s in result.states[1:]]))
    _report(
        "criterion 6",
        median_px < 3.0 and monotone and median_iters <= 100,
        f"median pixel error {median_px:.2f} < 3, descent monotone per frame, "
        f"median iterations {median_iters:.0f} <= 100",
    )


# ------------------------------------------------------------------ 7


def test_criterion_07_static_limit_matches_reference_kernel_tracker():
    """Template with no dynamics descends exactly like a static kernel tracker."""
    rng = np.random.default_rng(3)
    geom = TemplateGeometry(rows=13, cols=13)
    mu_img = smooth_random_image((13, 13), rng, 0.2, 0.8)
    mu = geom.vec(mu_img)
    static = LdsModel(
        mu=mu, A=np.zeros((0, 0)), C=np.zeros((geom.n_pixels, 0)),
        Q=np.zeros((0, 0)), R=0.0, geometry=geom,
    )
    frame = smooth_random_image((41, 41), rng, 0.3, 0.7)
    true_c = np.array([20.0, 20.0])
    r0, c0 = int(true_c[0] - geom.centre[0]), int(true_c[1] - geom.centre[1])
    frame[r0:r0 + 13, c0:c0 + 13] = mu_img
    start = true_c + np.array([2.0, -1.5])
    config = TrackerConfig(record_trace=True)
    dk = solve_frame(frame, start, np.zeros(0), None, static, config)

    # independent location-only reference with the same descent rules
    kernel = KernelSpec.for_geometry(geom)
    binning = config.binning()
    sq_tpl = sqrt_histogram(soft_histogram(mu, geom, kernel, binning))

    def ref_obj(loc):
        from dktrack.features import window_soft_histogram

        hy = window_soft_histogram(frame, loc, geom, kernel, binning)
        a = sqrt_histogram(hy) - sq_tpl
        return float(a @ a) / (2 * config.sigma_h2)

    def ref_grad(loc):
        from dktrack.features import window_soft_histogram

        hy, jac = window_soft_histogram(frame, loc, geom, kernel, binning, with_jacobian=True)
        a = sqrt_histogram(hy) - sq_tpl
        return (_sqrt_scale(hy.values)[:, None] * jac).T @ a / config.sigma_h2

    loc, _ = clamp_centre(start, geom, frame.shape)
    obj = ref_obj(loc)
    ref_trace = [loc.copy()]
    for _ in range(config.max_iters):
        g = ref_grad(loc)
        if np.linalg.norm(g) <= config.grad_tol:
            break
        step = config.armijo_step
        accepted = False
        for _ in range(config.armijo_max_backtracks):
            cand, _ = clamp_centre(loc - step * g, geom, frame.shape)
            val = ref_obj(cand)
            if val <= obj - config.armijo_slope * step * float(g @ g):
                accepted = True
                break
            step *= config.armijo_shrink
        if not accepted:
            break
        rel = (obj - val) / max(abs(obj), 1e-300)
        loc, obj = cand, val
        ref_trace.append(loc.copy())
        if rel <= config.rel_obj_tol:
            break

    same_length = len(dk.location_trace) == len(ref_trace)
    divergence = max(
        float(np.linalg.norm(a - b)) for a, b in zip(dk.location_trace, ref_trace)
    )
    _report(
        "criterion 7",
        same_length and divergence <= 1e-6,
        f"{len(ref_trace)} iterates, max per-iterate divergence {divergence:.1e} <= 1e-6",
    )


# ------------------------------------------------------------------ 8


def test_criterion_08_two_class_recognition():
    """Leave-one-out over 20 synthetic sequences from two separated generators."""
    t0 = time.monotonic()
    geom = TemplateGeometry(rows=11, cols=11)
    frame_shape = (31, 31)
    centre = np.array([15.0, 15.0])
    n_frames = 12
    order = 3
    per_class = 10

    root = np.random.SeedSequence(20260814)
    gen_a_seed, gen_b_seed, sim_seed, bg_seed = root.spawn(4)
    gen_a = random_model(order, geom, 0.9, gen_a_seed, mu_range=(0.15, 0.45))
    gen_b = random_model(order, geom, 0.9, gen_b_seed, mu_range=(0.55, 0.85))
    sim_children = sim_seed.spawn(2 * per_class)
    bg_children = bg_seed.spawn(2 * per_class)

    sequences = []
    for k in range(2 * per_class):
        label, generator = ("a", gen_a) if k < per_class else ("b", gen_b)
        patches, _ = simulate(generator, n_frames, sim_children[k])
        bg = smooth_random_image(frame_shape, np.random.default_rng(bg_children[k]), 0.3, 0.7)
        frames = np.repeat(bg[None], n_frames, axis=0).copy()
        r0 = int(centre[0] - geom.centre[0])
        c0 = int(centre[1] - geom.centre[1])
        for t in range(n_frames):
            frames[t, r0:r0 + geom.rows, c0:c0 + geom.cols] = np.clip(
                geom.unvec(patches[t]), 0.0, 1.0
            )
        sequences.append((label, frames, patches))

    models = [identify(p, order, geom) for (_, _, p) in sequences]
    labels = [label for (label, _, _) in sequences]

    config = TrackerConfig(max_iters=80)
    correct_r = 0
    correct_c = 0
    median_errors = []
    for j, (true_label, frames, _) in enumerate(sequences):
        candidates = [(models[i], labels[i]) for i in range(len(models)) if i != j]
        tr_r_costs = np.full(len(candidates), np.inf)
        tr_c_costs = np.full(len(candidates), np.inf)
        tracks = []
        for i, (model, _) in enumerate(candidates):
            track = track_sequence(frames, model, centre, config)
            tracks.append(track)
            if any(s.clamped for s in track.states[1:]):
                continue  # hit the frame edge: not a valid track
            tr_r_costs[i] = track.mean_objective
            along = np.stack([
                bilinear_patch(frames[t], s.location, geom)
                for t, s in enumerate(track.states)
            ])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")  # degenerate wrong-model tracks
                try:
                    identified = identify(along, order, geom)
                except ValueError:
                    continue
                tr_c_costs[i] = martin_distance(identified, model)
        candidate_labels = [lab for (_, lab) in candidates]
        _, label_r = nn_classify(tr_r_costs, candidate_labels)
        winner_c, label_c = nn_classify(tr_c_costs, candidate_labels)
        correct_r += label_r == true_label
        correct_c += label_c == true_label
        locations = tracks[winner_c].locations()
        median_errors.append(
            float(np.median(np.linalg.norm(locations - centre[None], axis=1)))
        )
    med_px = float(np.median(median_errors))
    elapsed = time.monotonic() - t0
    _report(
        "criterion 8",
        correct_c == 2 * per_class
        and correct_r >= 18
        and med_px < 3.0
        and elapsed < 900.0,
        f"classifier-cost accuracy {correct_c}/20 = 100%, reconstruction-cost "
        f"accuracy {correct_r}/20 >= 90%, winner median pixel error {med_px:.2f} < 3, "
        f"{elapsed:.0f}s < 900s",
    )


# ------------------------------------------------------------------ 9


def test_criterion_09_histogram_properties():
    """Mass normalization, soft-to-hard agreement, sifting identity."""
    geom = TemplateGeometry(rows=13, cols=13)
    kernel = KernelSpec.for_geometry(geom)
    binning = BinningSpec(bins=10, sharpness=100.0)
    rng = np.random.default_rng(0)
    worst_sum = 0.0
    worst_dev = 0.0
    sift_exact = True
    for _ in range(50):
        # intensities at bin centres, maximally far from every bin edge
        patch = (rng.integers(0, 10, geom.n_pixels) + 0.5) / 10.0
        hard = hard_histogram(patch, geom, kernel, binning)
        worst_sum = max(worst_sum, abs(float(hard.values.sum()) - 1.0))
        soft = soft_histogram(patch, geom, kernel, binning)
        worst_dev = max(worst_dev, float(np.abs(soft.values - hard.values).max()))
        w, kappa = kernel_weights(geom, kernel)
        sift_exact = sift_exact and np.array_equal(
            sifting_matrix(patch, binning).T @ w / kappa, soft.values
        )
    _report(
        "criterion 9",
        worst_sum <= 1e-15 and worst_dev < 0.01 and sift_exact,
        f"hard mass off by {worst_sum:.1e} <= 1e-15, "
        f"soft-vs-hard sup deviation {worst_dev:.2e} < 0.01 away from edges, "
        f"sifting identity bit-exact",
    )


# ------------------------------------------------------------------ 10


def _run_cli(capsys, argv):
    assert main(argv) == 0, f"cli {argv} failed"
    return capsys.readouterr().out.encode()


def _dir_bytes(directory):
    return {
        str(p.relative_to(directory)): p.read_bytes()
        for p in sorted(directory.rglob("*"))
        if p.is_file()
    }


def test_criterion_10_cli_subcommands_are_deterministic(tmp_path, capsys):
    """Every subcommand produces bit-identical output across same-seed runs."""
    scenario = {
        "order": 2,
        "patch_rows": 9,
        "patch_cols": 9,
        "frame_rows": 31,
        "frame_cols": 31,
        "n_frames": 8,
        "obs_noise_sigma": 0.0,
        "seed": 5,
        "trajectory": {
            "kind": "constant-velocity", "start": [7.0, 7.0], "velocity": [0.5, 0.5],
        },
    }
    cfg = tmp_path / "scenario.json"
    cfg.write_text(json.dumps(scenario))

    geom = TemplateGeometry(rows=9, cols=9)
    model_a = random_model(2, geom, 0.9, 30, mu_range=(0.15, 0.45))
    model_b = random_model(2, geom, 0.9, 31, mu_range=(0.55, 0.85))
    save_model(model_a, tmp_path / "a.json")
    save_model(model_b, tmp_path / "b.json")
    patches, _ = simulate(model_a, 8, 7)
    rec_frames = np.full((8, 27, 27), 0.5)
    for t in range(8):
        rec_frames[t, 9:18, 9:18] = np.clip(geom.unvec(patches[t]), 0.0, 1.0)
    write_frames(tmp_path / "recseq", rec_frames)
    manifest = {
        "training": [
            {"label": "a", "model": "a.json"},
            {"label": "b", "model": "b.json"},
        ],
        "tests": [{"id": "recseq", "frames": "recseq", "start": [13.0, 13.0]}],
    }
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))

    scene = tmp_path / "scene"
    _run_cli(capsys, ["synth", "--config", str(cfg), "--out", str(scene)])

    def command(name, out):
        if name == "synth":
            return ["synth", "--config", str(cfg), "--out", str(out)]
        if name == "identify":
            return ["identify", "--frames", str(scene / "frames"), "--order", "2",
                    "--out", str(out / "model.json")]
        if name == "track":
            return ["track", "--frames", str(scene / "frames"),
                    "--model", str(scene / "model.json"), "--start", "7,7",
                    "--out", str(out / "tracks.csv")]
        if name == "estimate":
            return ["estimate", "--config", str(cfg), "--method", "pf",
                    "--particles", "30", "--out", str(out)]
        if name == "martin":
            return ["martin", str(tmp_path / "a.json"), str(tmp_path / "b.json"),
                    "--out", str(out / "martin.csv")]
        if name == "recognize":
            return ["recognize", "--manifest", str(tmp_path / "manifest.json"),
                    "--strategy", "tr-r", "--out", str(out)]
        tracks = tmp_path / "eval_tracks.csv"
        if not tracks.exists():
            _run_cli(capsys, ["track", "--frames", str(scene / "frames"),
                              "--model", str(scene / "model.json"), "--start", "7,7",
                              "--out", str(tracks)])
        return ["eval", "--tracks", str(tracks),
                "--truth", str(scene / "ground_truth.csv"), "--out", str(out / "report.json")]

    unstable = []
    for name in ("synth", "identify", "track", "estimate", "martin", "recognize", "eval"):
        runs = []
        for tag in ("x", "y"):
            out = tmp_path / f"{name}_{tag}"
            out.mkdir()
            stdout = _run_cli(capsys, command(name, out))
            # the echoed output path legitimately differs between the runs
            runs.append((stdout.replace(str(out).encode(), b"<out>"), _dir_bytes(out)))
        if runs[0] != runs[1]:
            unstable.append(name)
    _report(
        "criterion 10",
        not unstable,
        "stdout and all files bit-identical across two runs of "
        "synth/identify/track/estimate/martin/recognize/eval"
        + (f"; unstable: {unstable}" if unstable else ""),
    )
