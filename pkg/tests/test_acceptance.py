"""Acceptance criteria 1-9, one PASS/FAIL line each.

The training criteria (5-8) run the real command-line pipeline at 32x32 and
take roughly an hour on one core.  Set ``VIDISTILL_SKIP_SLOW=1`` to skip them.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from acceptance_report import record
from oracles import naive_conv3d
from vidistill import cli
from vidistill import classify as C
from vidistill import data as D
from vidistill import gradcheck as G
from vidistill import io as IO
from vidistill import model as M
from vidistill import tensor as T
from vidistill import training as TR

slow = pytest.mark.skipif(os.environ.get("VIDISTILL_SKIP_SLOW") == "1", reason="VIDISTILL_SKIP_SLOW=1")

SIZE = 32
EPOCHS = 30
# Hyperparameters of the acceptance runs; the reasoning is in the decisions ledger.
RUN_CONFIG = """\
train_data = train_a.avdd
epochs = {epochs}
batch_size = 2
lr = 0.1
lr_decay = 1.0
momentum = 0.9
teacher_lr = 0.0003
seed = 0
"""
CLASSIFIER_TRAIN_PER_CLASS = 128
CLASSIFIER_TEST_PER_CLASS = 64


def _gen(path, per_class, seed, variant="A", size=SIZE):
    code = cli.main(["gen-data", "--per-class", str(per_class), "--seed", str(seed), "--variant", variant,
                     "--height", str(size), "--width", str(size), "--out", str(path)])
    assert code == 0


# ---------------------------------------------------------------------------
# 1-4: property suites
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_correctness(capsys):
    start = time.perf_counter()
    reports = G.run_suite(instances=20, tol=1e-3, dtype=np.float32)
    code = cli.main(["gradcheck", "--instances", "20", "--dtype", "f32"])
    elapsed = time.perf_counter() - start
    capsys.readouterr()
    worst = max(reports, key=lambda r: r.max_rel_err)
    ops = {r.name for r in reports}
    needed = {"elementwise", "reduce", "relu", "leaky_relu", "sigmoid", "tanh", "matmul", "conv3d",
              "conv3d_transpose", "batchnorm_train", "batchnorm_eval", "reconstruction_loss",
              "teacher_loss", "generator_loss"}
    ok = all(r.passed and r.instances >= 20 for r in reports) and needed <= ops and code == 0 and elapsed < 120
    record(1, ok, f"{len(reports)} ops x 20 f32 instances, worst {worst.name} rel_err={worst.max_rel_err:.2e} "
                  f"(< 1e-3), gradcheck exit {code}, {elapsed:.0f}s for suite + command (< 120s)")
    assert ok


def test_criterion_2_conv_oracle_and_adjointness():
    rng = np.random.default_rng(2024)
    worst_fwd, worst_adj, shapes = 0.0, 0.0, 0
    for _ in range(50):
        n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        k = tuple(int(v) for v in rng.integers(1, 4, size=3))
        s = tuple(int(v) for v in rng.integers(1, 3, size=3))
        p = tuple(int(rng.integers(0, kk)) for kk in k)
        dims = tuple(int(kk + rng.integers(0, 5)) for kk in k)
        x = rng.standard_normal((n, cin, *dims))
        kernel = rng.standard_normal((cout, cin, *k))
        bias = rng.standard_normal(cout)
        got = T.conv3d(T.Tensor(x), T.Tensor(kernel), T.Tensor(bias), s, p).data
        want = naive_conv3d(x, kernel, bias, s, p)
        worst_fwd = max(worst_fwd, np.abs(got - want).max() / max(np.abs(want).max(), 1e-12))
        y = rng.standard_normal(got.shape)
        conv = T.conv3d(T.Tensor(x), T.Tensor(kernel), None, s, p).data
        back = T.conv3d_input_grad_array(y, kernel, s, p, dims)
        lhs, rhs = float(np.sum(conv * y)), float(np.sum(x * back))
        worst_adj = max(worst_adj, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12))
        shapes += 1
    ok = shapes >= 50 and worst_fwd < 1e-6 and worst_adj < 1e-4
    record(2, ok, f"{shapes} random shapes, forward rel_err={worst_fwd:.1e} (< 1e-6), "
                  f"adjointness rel_err={worst_adj:.1e} (< 1e-4)")
    assert ok


def test_criterion_3_loss_identities():
    rng = np.random.default_rng(3)
    clips = T.Tensor(rng.random((2, 3, 4, 5, 5)).astype(np.float32))
    recon = T.Tensor(rng.random((2, 3, 4, 5, 5)).astype(np.float32))
    fake = T.Tensor(rng.uniform(0.05, 0.95, (2, 1)).astype(np.float32))
    l_rec = TR.reconstruction_loss(clips, recon)
    l_gen = TR.generator_loss(fake)
    at_one = TR.avd_loss(l_rec, l_gen, 1.0).data
    at_zero = TR.avd_loss(l_rec, l_gen, 0.0).data
    half = T.Tensor(np.full((4, 1), 0.5))
    ln4_err = abs(float(TR.teacher_loss(half, half).data) - 2 * np.log(2))
    ok = (at_one.tobytes() == l_rec.data.tobytes() and at_zero.tobytes() == l_gen.data.tobytes()
          and ln4_err < 1e-6)
    record(3, ok, f"avd(1)==recon bit-exact: {at_one.tobytes() == l_rec.data.tobytes()}, "
                  f"avd(0)==gen bit-exact: {at_zero.tobytes() == l_gen.data.tobytes()}, "
                  f"|teacher(0.5,0.5) - 2 ln 2|={ln4_err:.1e} (< 1e-6)")
    assert ok


def test_criterion_4_shape_contract():
    results = []
    for h, w in ((16, 16), (16, 32), (32, 16), (32, 32)):
        model = M.AVDModel.create(0, M.ArchConfig(height=h, width=w))
        clip = np.random.default_rng(h * w).random((2, 3, 32, h, w)).astype(np.float32)
        with T.no_grad():
            image = M.encode(model.encoder, clip)
            out = M.decode(model.decoder, image)
        results.append(((h, w), image.shape == (2, 3, h, w) and out.shape == clip.shape))
    ok = all(r for _, r in results)
    record(4, ok, "decode(encode(V)).shape == V.shape for " + ", ".join(f"{h}x{w}" for (h, w), _ in results))
    assert ok


# ---------------------------------------------------------------------------
# 5-8: training runs through the command line
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    _gen(root / "train_a.avdd", 16, seed=1)  # the fixed 64-clip training set
    return root


def _train(workspace: Path, lam: float, name: str):
    cfg = workspace / f"{name}.cfg"
    cfg.write_text(RUN_CONFIG.format(epochs=EPOCHS))
    out = workspace / name
    start = time.perf_counter()
    code = cli.main(["train", str(cfg), "--lambda", str(lam), "--output-dir", str(out)])
    return code, out, time.perf_counter() - start


@pytest.fixture(scope="module")
def recon_run(workspace):
    return _train(workspace, 1.0, "lam1")


@pytest.fixture(scope="module")
def avd_run(workspace):
    return _train(workspace, 0.5, "lam05")


@pytest.fixture(scope="module")
def eval_sets(workspace):
    paths = {}
    for variant, offset in (("A", 0), ("B", 100)):
        paths[variant] = (workspace / f"cls_train_{variant}.avdd", workspace / f"cls_test_{variant}.avdd")
        _gen(paths[variant][0], CLASSIFIER_TRAIN_PER_CLASS, seed=11 + offset, variant=variant)
        _gen(paths[variant][1], CLASSIFIER_TEST_PER_CLASS, seed=12 + offset, variant=variant)
    return paths


@slow
def test_criterion_5_reconstruction_learning(recon_run):
    code, out, elapsed = recon_run
    assert code == 0, "training command failed"
    log = TR.TrainLog.read_csv(out / "train_log.csv")
    recon = log.column("recon_loss")
    epoch = log.column("epoch")
    first, last = float(recon[0]), float(recon[epoch == epoch.max()].mean())
    steps = len(recon)
    ok = last < 0.5 * first and steps >= 200 and int(epoch.max()) + 1 == EPOCHS and elapsed < 30 * 60
    record(5, ok, f"lambda=1, {EPOCHS} epochs, {steps} steps: recon {first:.4f} -> {last:.4f} "
                  f"(last-epoch mean, ratio {last / first:.2f} < 0.50), {elapsed / 60:.1f} min (< 30)")
    assert ok


@slow
def test_criterion_6_adversarial_dynamics(avd_run):
    code, out, elapsed = avd_run
    log = TR.TrainLog.read_csv(out / "train_log.csv") if (out / "train_log.csv").exists() else None
    if code != 0 or log is None:
        record(6, False, f"lambda=0.5 training exited {code}")
        pytest.fail("adversarial training did not complete")
    epoch = log.column("epoch")
    real, fake = log.column("real_score"), log.column("fake_score")
    last = epoch == epoch.max()
    in_range = bool(np.all((real > 0) & (real < 1) & (fake > 0) & (fake < 1)))
    finite = all(np.all(np.isfinite(log.column(c))) for c in ("recon_loss", "teacher_loss", "gen_loss"))
    ok = (real[last].mean() > fake[last].mean() and in_range and finite
          and int(epoch.max()) + 1 == EPOCHS)
    record(6, ok, f"lambda=0.5, last epoch real {real[last].mean():.3f} vs fake {fake[last].mean():.3f}, "
                  f"scores in (0,1): {in_range}, finite: {finite}, {int(epoch.max()) + 1} epochs")
    assert ok


def _accuracies(csv_text: str) -> dict:
    rows = [line.split(",") for line in csv_text.strip().splitlines()[1:]]
    return {kind: float(acc) for kind, acc in rows}


@slow
def test_criterion_7_distillation_usefulness(recon_run, avd_run, eval_sets, capsys):
    # The classifier criteria use the lambda=1 encoder; the adversarial encoder is reported alongside.
    code, out, train_time = recon_run
    assert code == 0, "reconstruction training did not complete"
    train_path, test_path = eval_sets["A"]
    start = time.perf_counter()
    code = cli.main(["eval", str(out / "model.avdc"), str(train_path), str(test_path), "--out", str(out / "eval")])
    total = train_time + time.perf_counter() - start
    capsys.readouterr()
    assert code == 0
    acc = _accuracies((out / "eval" / "eval_report.csv").read_text())
    srf, mean, dist = acc["SingleRandomFrame"], acc["MeanFrame"], acc["Distilled"]

    avd_note = "not available"
    if avd_run[0] == 0:
        encoder = M.AVDModel.from_params(IO.load_checkpoint(avd_run[1] / "model.avdc")).encoder
        report = C.compare_representations(D.load_dataset(train_path), D.load_dataset(test_path), encoder,
                                           kinds=[C.RepresentationKind.DISTILLED])
        avd_note = f"{report.accuracy(C.RepresentationKind.DISTILLED):.1%}"

    ok = srf <= 0.35 and dist >= 0.80 and dist - srf >= 0.40 and total < 45 * 60
    record(7, ok, f"lambda=1 encoder: SingleRandomFrame {srf:.1%} (<= 35%), Distilled {dist:.1%} (>= 80%), "
                  f"gap {100 * (dist - srf):.1f} pts (>= 40), MeanFrame {mean:.1%}, "
                  f"{total / 60:.1f} min train+eval (< 45); lambda=0.5 encoder Distilled {avd_note} (not graded)")
    assert ok


@slow
def test_criterion_8_transfer_direction(recon_run, eval_sets, capsys):
    code, out, _ = recon_run
    assert code == 0, "reconstruction training did not complete"
    (a_train, a_test), (b_train, b_test) = eval_sets["A"], eval_sets["B"]
    code = cli.main(["eval", str(out / "model.avdc"), str(a_train), str(a_test), "--cross",
                     "--target-train", str(b_train), "--target-test", str(b_test), "--out", str(out / "cross")])
    capsys.readouterr()
    assert code == 0
    acc = _accuracies((out / "cross" / "eval_report.csv").read_text())
    inside, cross = acc["Distilled[in_domain]"], acc["Distilled[cross_domain]"]
    ok = inside >= cross and cross >= 0.40
    record(8, ok, f"lambda=1 encoder trained on A: in-domain {inside:.1%} >= cross-domain (B) {cross:.1%}; "
                  f"cross-domain >= 40%")
    assert ok


# ---------------------------------------------------------------------------
# 9: determinism and persistence
# ---------------------------------------------------------------------------

def test_criterion_9_determinism_and_persistence(tmp_path, capsys):
    _gen(tmp_path / "tiny.avdd", 2, seed=5, size=16)
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text("train_data = tiny.avdd\nepochs = 2\nbatch_size = 2\nlr = 0.05\nlambda = 0.5\n"
                   "widths = 3,4,4,4,4,3\npool_size = 20\n")
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.main(["train", str(cfg), "--output-dir", str(out)]) == 0
        assert cli.main(["distill", str(out / "model.avdc"), str(tmp_path / "tiny.avdd"), "--out",
                         str(out / "ppm")]) == 0
        files = sorted(p for p in out.rglob("*") if p.is_file())
        outputs.append({p.relative_to(out): p.read_bytes() for p in files})
    capsys.readouterr()
    same_runs = outputs[0] == outputs[1] and len(outputs[0]) >= 3

    ckpt = tmp_path / "a" / "model.avdc"
    params = IO.load_checkpoint(ckpt)
    IO.save_checkpoint(params, tmp_path / "again.avdc")
    ckpt_round = (tmp_path / "again.avdc").read_bytes() == ckpt.read_bytes()

    ds = D.load_dataset(tmp_path / "tiny.avdd")
    D.save_dataset(ds, tmp_path / "again.avdd")
    back = D.load_dataset(tmp_path / "again.avdd")
    data_round = ((tmp_path / "again.avdd").read_bytes() == (tmp_path / "tiny.avdd").read_bytes()
                  and back.videos.tobytes() == ds.videos.tobytes() and np.array_equal(back.labels, ds.labels))

    ok = same_runs and ckpt_round and data_round
    kinds = sorted({p.suffix for p in outputs[0]})
    record(9, ok, f"repeated runs byte-identical over {len(outputs[0])} files ({', '.join(kinds)}): {same_runs}; "
                  f"checkpoint round trip: {ckpt_round}; dataset round trip: {data_round}")
    assert ok
