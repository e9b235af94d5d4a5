"""Acceptance suite: one PASS/FAIL line per criterion, printed in the terminal summary.

The desk-scale experiment trains a Bayesian and a baseline model once per
session (about ten minutes on one CPU core) and shares them across criteria.
"""

import math
import time

import numpy as np
import pytest
import torch

from bayesseg.cli import main
from bayesseg.data import BoundarySet, boundaries_to_mask, generate_synthetic
from bayesseg.gradcheck import network_loss_check
from bayesseg.inference import InferenceConfig, entropy, mc_predict
from bayesseg.loss import LossConfig, bayesian_loss, class_weights
from bayesseg.metrics import AXIAL_RESOLUTION_UM, boundary_mae, dice, noise_sweep_report
from bayesseg.network import NetworkConfig, build
from bayesseg.tensor import RngStream, softmax_channels
from bayesseg.training import TrainConfig, train

pytestmark = pytest.mark.slow

SEED = 42
N_TRAIN, N_HELDOUT = 200, 50
LEVELS = range(1, 6)


@pytest.fixture(scope="module")
def experiment():
    train_set = generate_synthetic(N_TRAIN, 64, 64, 5, seed=SEED)
    held_out = [s for s, _ in generate_synthetic(N_HELDOUT, 64, 64, 5, seed=SEED + 1)]
    models, seconds = {}, {}
    for mode, bayesian in (("bayesian", True), ("baseline", False)):
        start = time.perf_counter()
        cfg = TrainConfig.desk(seed=SEED, bayesian=bayesian)
        model, _ = train(build(NetworkConfig(num_classes=5), seed=SEED), train_set, cfg=cfg)
        seconds[mode] = time.perf_counter() - start
        models[mode] = (model, bayesian)
    rows, kept = noise_sweep_report(models, held_out, LEVELS, InferenceConfig(t=50), base_count=2,
                                    block_size=8, seed=0, keep_outputs=True)
    table = {(r.level, r.mode): r for r in rows}
    return dict(models=models, seconds=seconds, held_out=held_out, table=table, kept=kept,
                iterations=cfg.iterations)


def test_criterion_1_gradient_correctness(criterion):
    start = time.perf_counter()
    report = network_loss_check(NetworkConfig(), size=16, n_params=200, seed=0)
    elapsed = time.perf_counter() - start
    err = report["max_relative_error"]
    ok = criterion(1, "gradient correctness", err < 1e-3 and elapsed < 120,
                   f"max relative error {err:.2e} over 200 parameters (< 1e-3), {elapsed:.1f} s (< 120 s)")
    assert ok


def test_criterion_2_learning_at_desk_scale(criterion, experiment):
    table, seconds = experiment["table"], experiment["seconds"]
    bayes, base = table[(0, "bayesian")].mean_dice, table[(0, "baseline")].mean_dice
    total = sum(seconds.values())
    ok = criterion(2, "learning at desk scale",
                   bayes >= 0.90 and base >= 0.90 and total < 1200 and experiment["iterations"] <= 3000,
                   f"held-out mean Dice bayesian {bayes:.4f}, baseline {base:.4f} (>= 0.90); "
                   f"training {seconds['bayesian']:.0f} s + {seconds['baseline']:.0f} s (< 1200 s), "
                   f"{experiment['iterations']} iterations each")
    assert ok


def test_criterion_3_noise_robustness(criterion, experiment):
    table = experiment["table"]
    base0, base5 = table[(0, "baseline")].mean_dice, table[(5, "baseline")].mean_dice
    bayes5 = table[(5, "bayesian")].mean_dice
    curve = ", ".join(f"L{k} {table[(k, 'bayesian')].mean_dice:.3f}/{table[(k, 'baseline')].mean_dice:.3f}"
                      for k in range(0, 6))
    drop = base0 - base5
    ok = criterion(3, "noise robustness", drop >= 0.05 and bayes5 >= base5,
                   f"baseline drop {drop:.4f} (>= 0.05); level 5 bayesian {bayes5:.4f} vs baseline "
                   f"{base5:.4f} (gap {bayes5 - base5:+.4f}); bayesian/baseline by level: {curve}")
    assert ok


def test_criterion_4_uncertainty_error_correlation(criterion, experiment):
    truths = np.stack([s.mask for s in experiment["held_out"]])
    wrong_u, right_u = [], []
    for level in LEVELS:
        _, _, out = experiment["kept"][(level, "bayesian")]
        wrong = out.segmentation != truths
        wrong_u.append(out.uncertainty[wrong])
        right_u.append(out.uncertainty[~wrong])
    wrong_u, right_u = np.concatenate(wrong_u), np.concatenate(right_u)
    if wrong_u.size == 0:
        ok = criterion(4, "uncertainty-error correlation", False, "no misclassified pixels to compare")
    else:
        ratio = wrong_u.mean() / right_u.mean()
        ok = criterion(4, "uncertainty-error correlation", ratio >= 1.2,
                       f"mean U misclassified {wrong_u.mean():.4f} ({wrong_u.size} px) vs correct "
                       f"{right_u.mean():.4f}: ratio {ratio:.2f} (>= 1.20)")
    assert ok


def _invariants():
    failures = []
    g = torch.Generator().manual_seed(0)
    z = torch.randn(4, 9, 8, 8, generator=g) * 20
    if not torch.allclose(softmax_channels(z).sum(1), torch.ones(4, 8, 8), atol=1e-6):
        failures.append("softmax normalisation")

    rng = np.random.default_rng(0)
    h = entropy(rng.dirichlet(np.ones(9), size=1000).T, axis=0)
    if not (h.min() >= 0 and h.max() <= math.log(9) + 1e-12):
        failures.append("entropy bounds")
    if abs(entropy(np.full(9, 1 / 9)) - 2.19722) > 1e-5:
        failures.append("uniform entropy")

    Y = torch.randint(0, 5, (2, 8, 8), generator=g)
    zl = torch.randn(2, 5, 8, 8, generator=g)
    beta = class_weights(Y, 5)
    a = bayesian_loss(zl, torch.zeros(2, 1, 8, 8), Y, beta, LossConfig(t_train=10), RngStream(1))
    b = bayesian_loss(zl, None, Y, beta, LossConfig(bayesian=False))
    if a.item() != b.item():
        failures.append("v=0 loss equals baseline")

    model = build(NetworkConfig(num_classes=3, growth_rate=4, initial_channels=6), seed=0)
    X = rng.random((2, 16, 16)).astype(np.float32)
    single = mc_predict(model, X, InferenceConfig(t=1, bayesian=False))
    for T in (1, 7, 50):
        out = mc_predict(model, X, InferenceConfig(t=T, dropout_rate=0.0))
        if not np.allclose(out.mean_probs, single.mean_probs, atol=1e-6):
            failures.append(f"dropout-off MC with T={T}")

    for _ in range(100):
        pred, truth = rng.integers(0, 5, size=(2, 16, 16))
        cm = np.zeros((5, 5), dtype=np.int64)
        np.add.at(cm, (truth.ravel(), pred.ravel()), 1)
        tp = np.diag(cm)
        denom = 2 * tp + (cm.sum(0) - tp) + (cm.sum(1) - tp)
        oracle = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 1.0)
        if not np.array_equal(dice(pred, truth, 5), oracle):
            failures.append("dice confusion-matrix oracle")
            break

    rows = np.array([[2.0] * 8, [5.0] * 8])
    mae, _ = boundary_mae(boundaries_to_mask(BoundarySet(rows + 1), 10), BoundarySet(rows))
    if not np.allclose(mae, AXIAL_RESOLUTION_UM) or AXIAL_RESOLUTION_UM != 3.87:
        failures.append("boundary MAE shift oracle")
    return failures


def test_criterion_5_invariant_suite(criterion):
    failures = _invariants()
    ok = criterion(5, "invariant suite", not failures,
                   "softmax, entropy, v=0 loss, dropout-off MC, Dice oracle, MAE shift all hold"
                   if not failures else "failed: " + ", ".join(failures))
    assert ok


def _cli_run(root):
    root.mkdir()
    cfg = root / "run.cfg"
    cfg.write_text("network.growth_rate=2\nnetwork.initial_channels=4\n"
                   "train.iterations=8\ntrain.checkpoint_every=4\ntrain.t_train=2\n")
    d, m, b = root / "data", root / "m.bfcdn", root / "b.bfcdn"
    commands = [
        ["generate-data", "--out", str(d), "--count", "4", "--height", "16", "--width", "16",
         "--classes", "3", "--seed", "5"],
        ["train", "--config", str(cfg), "--data", str(d), "--val", str(d), "--out", str(m), "--seed", "1"],
        ["train", "--config", str(cfg), "--data", str(d), "--out", str(b), "--seed", "1", "--baseline"],
        ["predict", "--model", str(m), "--input", str(d / "images" / "0000.pgm"), "--out-seg",
         str(root / "seg.pgm"), "--out-uncertainty", str(root / "u.pgm"), "--out-raw", str(root / "u.csv"),
         "--passes", "5", "--seed", "3"],
        ["evaluate", "--model", str(m), "--data", str(d), "--out", str(root / "eval.csv"), "--passes", "3"],
        ["noise-sweep", "--model", str(m), "--baseline-model", str(b), "--data", str(d), "--levels", "2",
         "--out", str(root / "sweep.csv"), "--passes", "2", "--block-size", "4"],
    ]
    for argv in commands:
        code = main(argv)
        if code != 0:
            raise AssertionError(f"{argv[0]} exited {code}")
    outputs = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "run.cfg":
            data = p.read_bytes()
            if p.name.endswith(".log.csv"):
                # the seconds column is wall time; the other columns must match
                data = b"\n".join(b",".join(line.split(b",")[:3]) for line in data.splitlines())
            outputs[str(p.relative_to(root))] = data
    return outputs


def test_criterion_6_reproducibility(criterion, tmp_path, capsys):
    first, second = _cli_run(tmp_path / "a"), _cli_run(tmp_path / "b")
    capsys.readouterr()
    differing = sorted(k for k in first if first[k] != second.get(k))
    ok = criterion(6, "reproducibility", not differing and first.keys() == second.keys(),
                   f"{len(first)} output files byte-identical across reruns (train log compared "
                   f"without its wall-time column)" if not differing else f"differing: {differing}")
    assert ok


def test_criterion_7_relative_cost(criterion, experiment):
    model, _ = experiment["models"]["bayesian"]
    X = np.stack([s.image for s in experiment["held_out"][:16]])

    def best(fn, repeats):
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            fn()
            times.append(time.perf_counter() - start)
        return min(times)

    single = best(lambda: mc_predict(model, X, InferenceConfig(t=1, bayesian=False)), 7)
    full = best(lambda: mc_predict(model, X, InferenceConfig(t=50), seed=0), 2)
    ratio = full / single
    ok = criterion(7, "relative cost", 20 <= ratio <= 80,
                   f"T=50 prediction {full:.3f} s vs single deterministic pass {single:.4f} s on "
                   f"16 images: ratio {ratio:.1f} (20..80)")
    assert ok
