"""Training harness: determinism, update contracts, detectors and run directories."""
import hashlib
import json
import math
import multiprocessing as mp
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anesgan import harness
from anesgan import losses as L
from anesgan.harness import (NumericalHalt, TrainConfig, TrainRun, autocorrelation,
                             collapse_sensitivity, detect_mode_collapse, detect_non_convergence,
                             detect_vanishing_gradient, diagnose, first_vanishing_step, read_csv,
                             register_run, resume_experiment, run_experiment, split_dataset,
                             train_step)
from anesgan.losses import VariantConfig
from anesgan.pkpd import synth_dataset

SMALL = TrainConfig(steps=40, batch=8, hidden=(16,), z_dim=4, probe_size=8, eval_every=10,
                    checkpoint_every=20)


@pytest.fixture(scope="module")
def ds():
    return synth_dataset(32, T=30, seed=0)


@pytest.fixture(scope="module")
def ds2():
    return synth_dataset(32, T=30, seed=3, n_families=2)


def params_hash(model) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# -- train_step ---------------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["vanilla-nonsaturating", "lsgan", "wgan", "vaegan", "acgan",
                                     "acvae", "acgan-entropy"])
def test_identical_seeds_give_identical_records(ds2, variant):
    cfg = replace(SMALL, steps=5)
    recs = []
    for _ in range(2):
        run = TrainRun(ds2, VariantConfig(variant=variant), cfg)
        recs.append([train_step(run) for _ in range(5)])
    assert json.dumps(recs[0]) == json.dumps(recs[1])


def test_different_seeds_differ(ds):
    a = TrainRun(ds, VariantConfig(), SMALL)
    b = TrainRun(ds, VariantConfig(), replace(SMALL, seed=1))
    assert train_step(a)["g_loss"] != train_step(b)["g_loss"]


def test_wgan_clip_holds_after_every_critic_update(ds, monkeypatch):
    variant = VariantConfig(variant="wgan", clip=0.01)
    run = TrainRun(ds, variant, SMALL)
    seen = []
    original = harness.clip_weights

    def spy(params, c):
        original(params, c)
        seen.append(max(float(np.max(np.abs(p.data))) for p in params))

    monkeypatch.setattr(harness, "clip_weights", spy)
    for _ in range(3):
        train_step(run)
    assert len(seen) == 3 * variant.n_critic
    assert max(seen) <= 0.01


def test_wgan_runs_n_critic_updates_per_generator_update(ds):
    run = TrainRun(ds, VariantConfig(variant="wgan"), SMALL)
    train_step(run)
    assert run.opt_d.t == 5 and run.opt_g.t == 1


def test_alternation_contract(ds, monkeypatch):
    """D is untouched while G updates and G is untouched while D updates."""
    run = TrainRun(ds, VariantConfig(variant="vaegan"), SMALL)
    violations = []

    def guard(opt, other):
        step = opt.step

        def wrapped():
            before = params_hash(other)
            step()
            if params_hash(other) != before:
                violations.append(opt)
        return wrapped

    monkeypatch.setattr(run.opt_g, "step", guard(run.opt_g, run.D))
    monkeypatch.setattr(run.opt_d, "step", guard(run.opt_d, run.G))
    d0, g0 = params_hash(run.D), params_hash(run.G)
    for _ in range(3):
        train_step(run)
    assert not violations
    assert params_hash(run.D) != d0 and params_hash(run.G) != g0


def test_log_record_count_equals_step(ds):
    run = TrainRun(ds, VariantConfig(), SMALL)
    for k in range(1, 6):
        train_step(run)
        assert len(run.records) == run.step == k


def test_nan_weights_halt_with_snapshot(ds):
    run = TrainRun(ds, VariantConfig(), SMALL)
    run.D.parameters()[0].data[:] = np.nan
    with pytest.raises(NumericalHalt) as info:
        train_step(run)
    snap = info.value.snapshot
    assert snap["step"] == 1
    assert {"step", "losses", "max_abs_grad"} <= set(snap)
    assert run.step == 0 and not run.records


def test_split_is_disjoint_and_covers(ds):
    train, probe = split_dataset(ds, 4)
    assert not set(train) & set(probe)
    assert sorted([*train, *probe]) == list(range(len(ds)))
    assert len(probe) == len(ds) // 4


def test_two_family_probe_contains_both_families(ds2):
    run = TrainRun(ds2, VariantConfig(variant="acgan"), SMALL)
    assert set(run.probe.labels) == {0, 1}


# -- detectors ----------------------------------------------------------------------------

def _records(g, acc, n=50):
    return [{"step": i + 1, "g_grad_norm": g, "d_acc": acc} for i in range(n)]


def test_vanishing_fires_on_zero_gradients():
    diag = detect_vanishing_gradient(_records(0.0, 0.99))
    assert diag is not None and diag.kind == "vanishing-gradient" and diag.step == 50
    assert diag.statistic == 0.0 and diag.threshold == 1e-6


def test_vanishing_quiet_on_healthy_window():
    assert detect_vanishing_gradient(_records(1e-2, 0.99)) is None
    assert detect_vanishing_gradient(_records(0.0, 0.9)) is None


def test_vanishing_needs_full_window():
    assert detect_vanishing_gradient(_records(0.0, 0.99, n=49)) is None


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e-5), min_size=50, max_size=80),
       st.lists(st.floats(0, 1), min_size=80, max_size=80))
def test_vanishing_fires_only_when_predicate_holds(grads, accs):
    recs = [{"step": i + 1, "g_grad_norm": g, "d_acc": a} for i, (g, a) in enumerate(zip(grads, accs))]
    diag = detect_vanishing_gradient(recs)
    win = recs[-50:]
    predicate = (np.median([r["g_grad_norm"] for r in win]) < 1e-6
                 and np.median([r["d_acc"] for r in win]) > 0.95)
    assert (diag is not None) == predicate


def test_saturating_loss_vanishes_before_nonsaturating(ds):
    """Paired runs with an over-trained discriminator: only the saturating form starves."""
    cfg = TrainConfig(batch=16, hidden=(16,), probe_size=8, d_lr=1e-2, d_steps=5)
    first = {}
    for variant in ("vanilla-saturating", "vanilla-nonsaturating"):
        run = TrainRun(ds, VariantConfig(variant=variant), cfg)
        recs = [train_step(run) for _ in range(2400)]
        first[variant] = first_vanishing_step(recs)
    assert first["vanilla-saturating"] is not None
    late = first["vanilla-nonsaturating"]
    assert late is None or first["vanilla-saturating"] < late


def _spread_data(n=64, T=30, seed=0):
    return np.random.default_rng(seed).gamma(2.0, 1.0, (n, 2, T))


def test_mode_collapse_fires_on_constant_generator():
    real = _spread_data()
    gen = np.repeat(real[:1], 64, axis=0)
    diag = detect_mode_collapse(gen, real)
    assert diag is not None and diag.statistic == 0.0


def test_mode_collapse_quiet_on_memorized_data():
    real = _spread_data()
    assert detect_mode_collapse(real[::-1].copy(), real) is None


def test_mode_collapse_requires_64_samples():
    with pytest.raises(ValueError):
        detect_mode_collapse(_spread_data(63), _spread_data(63))


def test_collapse_sensitivity_reports_three_thresholds():
    real = _spread_data()
    # shrink towards the mean so the spread ratio is 0.07
    gen = real.mean(axis=0) + 0.07 * (real - real.mean(axis=0))
    assert collapse_sensitivity(gen, real) == {"0.01": False, "0.05": False, "0.1": True}


def test_non_convergence_fires_on_sine():
    t = np.arange(400)
    diag = detect_non_convergence(np.sin(2 * np.pi * t / 10))
    assert diag is not None and diag.kind == "non-convergence" and diag.statistic < -0.3


def test_non_convergence_quiet_on_monotone():
    assert detect_non_convergence(np.linspace(2.0, 0.0, 400)) is None


def test_non_convergence_requires_200_steps():
    with pytest.raises(ValueError):
        detect_non_convergence(np.zeros(199))


def _acf_oracle(x, k):
    x = np.asarray(x, dtype=float)
    full = np.correlate(x - x.mean(), x - x.mean(), mode="full")
    return full[len(x) - 1 + k] / full[len(x) - 1]


@pytest.mark.parametrize("seed", range(5))
def test_non_convergence_on_white_noise_matches_oracle(seed):
    x = np.random.default_rng(seed).standard_normal(400)
    half = x[200:]
    slope = np.polyfit(np.arange(200.0), half, 1)[0]
    expected = abs(slope) < 1e-3 and min(_acf_oracle(half, k) for k in range(1, 21)) < -0.3
    assert (detect_non_convergence(x) is not None) == expected


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=30, max_size=60), st.integers(1, 20))
def test_autocorrelation_matches_oracle(xs, k):
    x = np.array(xs)
    if np.ptp(x) < 1e-6:
        return
    assert math.isclose(autocorrelation(x, k), _acf_oracle(x, k), rel_tol=1e-9, abs_tol=1e-12)


# -- run directories ----------------------------------------------------------------------

def test_steps_zero_gives_manifest_and_baseline_only(ds, tmp_path):
    run_experiment(ds, VariantConfig(), replace(SMALL, steps=0), tmp_path / "r")
    r = tmp_path / "r"
    assert (r / "manifest.json").exists()
    assert [row["step"] for row in read_csv(r / "metrics.csv")] == ["0"]
    assert not (r / "log.csv").exists()
    assert sorted(p.name for p in (r / "probe").iterdir()) == ["real.bin", "step_000000.bin"]


def test_run_directory_layout(ds, tmp_path):
    run = run_experiment(ds, VariantConfig(), SMALL, tmp_path / "r", "abc", registry=tmp_path / "reg")
    r = tmp_path / "r"
    assert len(read_csv(r / "log.csv")) == run.step == 40
    assert [int(row["step"]) for row in read_csv(r / "metrics.csv")] == [0, 10, 20, 30, 40]
    assert sorted(p.name for p in (r / "checkpoints").iterdir()) == [
        "step_000020.ckpt", "step_000040.ckpt"]
    manifest = json.loads((r / "manifest.json").read_text())
    assert manifest["dataset_hash"] == "abc" and manifest["train"]["steps"] == 40
    entry = json.loads((tmp_path / "reg").read_text())
    assert entry["steps"] == 40 and entry["run_dir"] == str(r)


def test_manifest_written_before_step_one_and_unchanged(ds, tmp_path, monkeypatch):
    seen = []
    original = harness.train_step

    def spy(run, idx=None):
        if run.step == 0:
            seen.append((tmp_path / "r" / "manifest.json").read_bytes())
        return original(run, idx)

    monkeypatch.setattr(harness, "train_step", spy)
    run_experiment(ds, VariantConfig(), SMALL, tmp_path / "r")
    assert seen == [(tmp_path / "r" / "manifest.json").read_bytes()]


def test_repeat_runs_are_bitwise_identical(ds, tmp_path):
    for name in ("a", "b"):
        run_experiment(ds, VariantConfig(variant="vaegan"), SMALL, tmp_path / name, "h")
    for rel in ("log.csv", "metrics.csv", "manifest.json", "checkpoints/step_000040.ckpt",
                "probe/step_000040.bin"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


@pytest.mark.parametrize("variant", ["vanilla-nonsaturating", "wgan", "acvae"])
def test_checkpoint_replay_reproduces_remaining_records(ds2, tmp_path, variant):
    src = tmp_path / "src"
    run_experiment(ds2, VariantConfig(variant=variant), SMALL, src)
    resume_experiment(ds2, src, src / "checkpoints" / "step_000020.ckpt", out_dir=tmp_path / "re")
    full = (src / "log.csv").read_text().splitlines()
    replay = (tmp_path / "re" / "log.csv").read_text().splitlines()
    assert replay[0] == full[0]
    assert replay[1:] == full[21:]
    assert ((tmp_path / "re" / "checkpoints" / "step_000040.ckpt").read_bytes()
            == (src / "checkpoints" / "step_000040.ckpt").read_bytes())


def test_halt_writes_snapshot_and_flushes_artifacts(ds, tmp_path, monkeypatch):
    original = harness.train_step

    def poisoned(run, idx=None):
        if run.step == 12:
            run.D.parameters()[0].data[:] = np.nan
        return original(run, idx)

    monkeypatch.setattr(harness, "train_step", poisoned)
    with pytest.raises(NumericalHalt):
        run_experiment(ds, VariantConfig(), SMALL, tmp_path / "r", registry=tmp_path / "reg")
    r = tmp_path / "r"
    snap = json.loads((r / "halt.json").read_text())
    assert snap["step"] == 13
    assert len(read_csv(r / "log.csv")) == 12
    assert (r / "diagnostics.json").exists()
    assert json.loads((tmp_path / "reg").read_text())["steps"] == 12


def test_diagnostics_recomputable_from_artifacts(ds, tmp_path):
    run_experiment(ds, VariantConfig(), replace(SMALL, steps=200, eval_every=100,
                                                checkpoint_every=200), tmp_path / "r")
    stored = json.loads((tmp_path / "r" / "diagnostics.json").read_text())
    assert stored == json.loads(json.dumps(diagnose(tmp_path / "r")))
    assert stored["steps"] == 200
    assert stored["non_convergence"] is None or stored["non_convergence"]["kind"] == "non-convergence"
    assert stored["mode_collapse"].startswith("skipped")


def test_vaegan_without_reconstruction_equals_adversarial_plus_kld(ds, tmp_path, monkeypatch):
    """lambda_rec = 0 VAEGAN logs match a run whose generator loss is assembled by hand
    as the non-saturating term plus the KL term."""
    cfg = replace(SMALL, steps=20)
    run_experiment(ds, VariantConfig(variant="vaegan", lambda_rec=0.0), cfg, tmp_path / "a")

    def plain(run, x_real, x_fake, s_fake, p_fake, c_fake, vae_parts):
        mu, sigma = vae_parts
        rec = L.reconstruction_loss(x_real, x_fake)
        kld = L.kl_gaussian(mu, sigma)
        return L.g_loss_nonsaturating(s_fake) + run.variant.lambda_kld * kld, {"rec": rec.item(), "kld": kld.item()}

    monkeypatch.setattr(harness, "_g_loss", plain)
    run_experiment(ds, VariantConfig(variant="vaegan", lambda_rec=1.0), cfg, tmp_path / "b")
    a = read_csv(tmp_path / "a" / "log.csv")
    b = read_csv(tmp_path / "b" / "log.csv")
    assert [r["g_loss"] for r in a] == [r["g_loss"] for r in b]
    assert [r["d_loss"] for r in a] == [r["d_loss"] for r in b]


def _append_many(path, tag, n):
    for i in range(n):
        register_run(path, {"tag": tag, "i": i, "pad": "x" * 200})


def test_registry_appends_from_parallel_processes(tmp_path):
    path = tmp_path / "registry.jsonl"
    ctx = mp.get_context("fork")
    procs = [ctx.Process(target=_append_many, args=(path, t, 50)) for t in range(4)]
    for p in procs:
        p.start()
    for p in procs:
        p.join()
    lines = path.read_text().splitlines()
    entries = [json.loads(line) for line in lines]
    assert len(entries) == 200
    for t in range(4):
        assert sorted(e["i"] for e in entries if e["tag"] == t) == list(range(50))
