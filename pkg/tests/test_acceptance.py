"""Acceptance criteria 1-8, one or more tests each.

Each test prints a PASS/FAIL line when run with ``-s``; the terminal summary
(see conftest.py) always lists one line per criterion.
"""
import copy
import io
import math
import time

import numpy as np
import pytest

import oracles
from glnet import checkpoint as ckpt
from glnet import layers as L
from glnet.cli import main
from glnet.degradation import DegradationOperator, build_k_matrix, degrade
from glnet.gradcheck import SquaredLoss, grad_check, weighted_sum_loss
from glnet.metrics import evaluate, psnr, ssim, wpsnr
from glnet.models import (
    ModelDescriptor,
    NetworkGraph,
    TwoStream,
    build_discriminator,
    build_gln,
    build_gn,
    build_ln,
    receptive_field,
)
from glnet.synthetic import synthetic_faces
from glnet.tensor import make_rng, precision
from glnet.training import (
    AdvConfig,
    PairSet,
    TrainConfig,
    dataset_loss,
    finetune_adversarial,
    train_reconstruction,
)

F64 = np.float64


def verdict(label, ok, detail=""):
    print(f"{label} {'PASS' if ok else 'FAIL'} {detail}")
    return ok


def rng(seed):
    return np.random.default_rng(seed)


def toy_pairs(n=10, size=64, d=4, seed=1):
    hr = synthetic_faces(n, size, seed=seed).astype(np.float32)
    lr = degrade(hr, DegradationOperator.for_factor(d)).astype(np.float32)
    return PairSet(lr, hr, [f"toy{i:02d}" for i in range(n)])


# ---------------------------------------------------------------------------
# 1. gradient correctness


def _layer_cases():
    with precision(F64):
        two = TwoStream("ts", [L.Conv2d("a", 1, 1, 3, seed=1)], [L.Conv2d("b", 1, 2, 3, seed=2)])
        yield "conv", L.Conv2d("c", 2, 3, 3, seed=2), rng(1).standard_normal((1, 2, 5, 5))
        yield ("deconv", L.Deconv2d("up", 4, in_channels=2, out_channels=2, init="uniform_scaled", seed=3),
               rng(2).standard_normal((1, 2, 3, 3)))
        yield "fully_connected", L.FullyConnected("fc", 6, 4, seed=1), rng(3).standard_normal((3, 6))
        # offset keeps every input well away from the kink at zero
        x = rng(4).standard_normal((2, 3, 4, 4))
        yield "relu", L.ReLU("r"), x + np.sign(x) * 0.1
        yield "maxpool", L.MaxPool2d("p"), rng(5).permutation(16).reshape(1, 1, 4, 4) * 0.1
        yield "concat", NetworkGraph(ModelDescriptor("ts"), [two], (1, 5, 5)), rng(6).standard_normal((1, 1, 5, 5))
        yield "softmax2", L.Softmax2("s"), rng(7).standard_normal((4, 2))


@pytest.mark.criterion(1, "Gradient correctness")
def test_c1_every_layer_kind():
    start = time.perf_counter()
    worst = {}
    for kind, layer, x in _layer_cases():
        out_shape = layer.forward(x).shape
        result = grad_check(layer, x, weighted_sum_loss(out_shape, 9), samples=None)
        worst[kind] = result.max_rel_error
    assert max(worst.values()) < 1e-4, worst
    assert time.perf_counter() - start < 120
    verdict("C1[layers]", True, " ".join(f"{k}={v:.1e}" for k, v in worst.items()))


@pytest.mark.criterion(1, "Gradient correctness")
def test_c1_linear_nets():
    with precision(F64):
        fc = NetworkGraph(ModelDescriptor("lin"), [L.Flatten("f"), L.FullyConnected("fc0", 16, 8, seed=1),
                                                   L.FullyConnected("fc1", 8, 3, seed=2)], (1, 4, 4))
        conv = NetworkGraph(ModelDescriptor("lin"), [L.Deconv2d("up", 4), L.Conv2d("c", 1, 2, 5, seed=3)],
                            (1, 3, 3))
    errors = []
    for net, x in ((fc, rng(1).standard_normal((2, 1, 4, 4))), (conv, rng(2).standard_normal((2, 1, 3, 3)))):
        target = rng(3).standard_normal((2,) + net.output_shape)
        errors.append(grad_check(net, x, SquaredLoss(target), samples=None).max_rel_error)
    assert max(errors) < 1e-7, errors
    verdict("C1[linear]", True, f"max rel err {max(errors):.1e}")


@pytest.mark.criterion(1, "Gradient correctness")
def test_c1_composed_gln_toy():
    start = time.perf_counter()
    with precision(F64):
        model = build_gln(8, 4, seed=0, hr_size=64)
    x = make_rng(1).random((2, 1, 8, 8))
    target = make_rng(2).random((2, 1, 64, 64))
    result = grad_check(model, x, SquaredLoss(target), h=1e-5, samples=100, seed=0)
    elapsed = time.perf_counter() - start
    ok = result.max_rel_error < 1e-4 and elapsed < 120
    verdict("C1[gln 8->64]", ok, f"max rel err {result.max_rel_error:.2e} over {result.checked} in {elapsed:.0f}s")
    assert ok, result


# ---------------------------------------------------------------------------
# 2. architecture fidelity


@pytest.mark.criterion(2, "Architecture fidelity")
def test_c2_shapes_and_receptive_fields(capsys):
    start = time.perf_counter()
    ln_stacks = {
        4: [(5, 16), (7, 64), (5, 16), (5, 1)],
        6: [(5, 16), (7, 32), (7, 64), (7, 32), (5, 16), (5, 1)],
        8: [(5, 16), (7, 32), (7, 64), (7, 64), (7, 64), (7, 32), (5, 16), (5, 1)],
    }
    for depth, stack in ln_stacks.items():
        ln = build_ln(depth, hr_size=16)
        assert [(c.spec.kernel, c.spec.out_channels) for c in ln.layers() if c.spec.kind == "conv"] == stack
    for d, widths in ((4, [1024, 512, 256, 512, 16384]), (8, [256, 256, 256, 256, 16384])):
        gn = build_gn(d)
        fcs = [f for f in gn.layers() if f.spec.kind == "fully_connected"]
        assert [fcs[0].spec.in_channels] + [f.spec.out_channels for f in fcs] == widths
        assert gn.input_shape == (1, 128 // d, 128 // d) and gn.output_shape == (2, 128, 128)
    for d in (4, 8):
        gln = build_gln(d, 8)
        assert gln.input_shape == (1, 128 // d, 128 // d) and gln.output_shape == (1, 128, 128)
    disc = build_discriminator()
    shapes, shape = [], (1, 1, 128, 128)
    for layer in disc.layers():
        shape = layer.output_shape(shape)
        shapes.append(shape[1:])
    assert shapes[2] == (16, 64, 64) and shapes[5] == (16, 32, 32) and shapes[-1] == (2,)
    rfs = {depth: receptive_field(build_ln(depth, hr_size=16)) for depth in (4, 6, 8)}
    assert rfs == {4: 19, 6: 31, 8: 43}
    outputs = []
    for depth in (8, 6, 4):
        assert main(["rf", "--ln", str(depth)]) == 0
        outputs.append(capsys.readouterr().out.strip())
    assert outputs == ["43", "31", "19"]
    elapsed = time.perf_counter() - start
    ok = elapsed < 1.0
    verdict("C2", ok, f"rf {rfs} in {elapsed:.2f}s")
    assert ok, elapsed


# ---------------------------------------------------------------------------
# 3. degradation operator equivalence


@pytest.mark.criterion(3, "Degradation-operator equivalence")
def test_c3_pipeline_equals_k_matrix():
    worst, worst_row = 0.0, 0.0
    r = rng(33)
    for i in range(20):
        size = 32 if i % 2 == 0 else 64
        d = 4 if i % 4 < 2 else 8
        op = DegradationOperator.for_factor(d)
        k = build_k_matrix(op, size, size)
        img = r.random((size, size))
        worst = max(worst, float(np.abs(k @ img.ravel() - degrade(img, op).ravel()).max()))
        worst_row = max(worst_row, float(np.abs(np.asarray(k.sum(axis=1)).ravel() - 1).max()))
    ok = worst < 1e-6 and worst_row <= 1e-9
    verdict("C3", ok, f"max |Kx - degrade(x)| {worst:.1e}, max |row sum - 1| {worst_row:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 4. bilinear deconvolution identity


@pytest.mark.criterion(4, "Bilinear-deconv identity")
@pytest.mark.parametrize("d", [4, 8])
def test_c4_bilinear_deconv(d):
    with precision(F64):
        layer = L.Deconv2d("up", d)
    img = rng(40 + d).random((16, 16))
    out = layer.forward(img[None, None])[0, 0]
    # direct interpolation at half-pixel sample positions, zero outside the image
    err = np.abs(out - oracles.bilinear_zero_extended(img, d))[2:-2, 2:-2].max()
    # against an edge-replicating interpolator the two agree once d/2 pixels in
    b = d // 2
    err_clamped = np.abs(out - oracles.bilinear_clamped(img, d))[b:-b, b:-b].max()
    ok = err < 1e-5 and err_clamped < 1e-5
    verdict(f"C4[d={d}]", ok, f"max err {err:.1e} (zero-extended), {err_clamped:.1e} (edge-clamped, {b}px border)")
    assert ok


# ---------------------------------------------------------------------------
# 5. desk-scale learning


@pytest.mark.slow
@pytest.mark.criterion(5, "Desk-scale learning")
def test_c5_training_beats_bicubic():
    start = time.perf_counter()
    pairs = toy_pairs()
    model = build_gln(4, 4, seed=0, hr_size=64)
    initial = dataset_loss(model, pairs)
    train_reconstruction(model, pairs, TrainConfig(iterations=400, learning_rate=1e-5, batch_size=5))
    final = dataset_loss(model, pairs)
    report = evaluate(model, pairs, 4)
    gln_psnr = report.mean["psnr"]
    bic_psnr = report.mean_of(report.baselines["bicubic"])["psnr"]
    elapsed = time.perf_counter() - start
    ok = final < 0.25 * initial and gln_psnr > bic_psnr and elapsed < 15 * 60
    verdict("C5", ok, f"L_MS {initial:.1f} -> {final:.2f} ({final / initial:.1%}); "
                      f"PSNR gln {gln_psnr:.2f} vs bicubic {bic_psnr:.2f} dB; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 6. adversarial mechanics


@pytest.fixture(scope="module")
def pretrained():
    pairs = toy_pairs()
    model = build_gln(4, 4, seed=0, hr_size=64)
    train_reconstruction(model, pairs, TrainConfig(iterations=150, learning_rate=1e-5))
    return model, pairs


@pytest.mark.slow
@pytest.mark.criterion(6, "Adversarial mechanics")
def test_c6_adversarial(pretrained):
    start = time.perf_counter()
    base, pairs = pretrained
    cfg = TrainConfig(iterations=150, learning_rate=1e-5, seed=7)
    schedule = dict(switches=3, d_steps=5, g_steps=50)  # 150 generator steps, same as the control

    control = copy.deepcopy(base)
    train_reconstruction(control, pairs, cfg)
    control_loss = dataset_loss(control, pairs)

    g0, _, _ = finetune_adversarial(copy.deepcopy(base), build_discriminator(5, 64), pairs, cfg,
                                    AdvConfig(lam=0.0, **schedule))
    zero_loss = dataset_loss(g0, pairs)
    zero_ok = abs(zero_loss - control_loss) <= 0.05 * control_loss

    g1, _, hist = finetune_adversarial(copy.deepcopy(base), build_discriminator(5, 64), pairs, cfg,
                                       AdvConfig(lambda_rule="tenth_of_mse", **schedule))
    adv_loss = dataset_loss(g1, pairs)
    probs_ok = all(0 < m < 1 for m in hist.mean_d)
    finite_ok = all(math.isfinite(v) for v in hist.d_loss)
    # a modest rise is allowed; a quarter more loss would be far beyond a fraction of a dB
    modest = adv_loss <= 1.25 * control_loss
    dpsnr = evaluate(g1, pairs, 4).mean["psnr"] - evaluate(control, pairs, 4).mean["psnr"]
    elapsed = time.perf_counter() - start
    ok = zero_ok and probs_ok and finite_ok and modest and elapsed < 20 * 60
    verdict("C6", ok, f"control {control_loss:.4f}, lambda=0 {zero_loss:.4f}; lambda={hist.lam:.3g} -> "
                      f"{adv_loss:.4f} (PSNR {dpsnr:+.3f} dB), mean D {['%.3f' % m for m in hist.mean_d]}, "
                      f"L_D {['%.3f' % v for v in hist.d_loss]}; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 7. metric oracles


@pytest.mark.criterion(7, "Metric oracles")
def test_c7_metric_oracles():
    a = np.full((64, 64), 100.0)
    value = psnr(a, a + 16, peak=255.0)
    closed_form = 20 * math.log10(255 / 16)
    x = rng(7).random((48, 48))
    c1, c2 = np.full((32, 32), 0.3), np.full((32, 32), 0.35)
    ok = (abs(value - closed_form) < 1e-12 and abs(ssim(x, x) - 1) < 1e-9
          and wpsnr(c1, c2) == psnr(c1, c2) and wpsnr(c1 * 255, c2 * 255, 255.0) == psnr(c1 * 255, c2 * 255, 255.0))
    verdict("C7[closed forms]", ok, f"psnr(uniform 16) = {value:.4f} dB = 20 log10(255/16); ssim(x, x) = {ssim(x, x)!r}")
    assert ok


@pytest.mark.criterion(7, "Metric oracles")
@pytest.mark.xfail(strict=True, reason="24.066 is not 20*log10(255/16) = 24.0484; kept red, see decisions ledger")
def test_c7_psnr_literal_24_066():
    a = np.full((64, 64), 100.0)
    value = psnr(a, a + 16, peak=255.0)
    verdict("C7[24.066 literal]", abs(value - 24.066) <= 0.001, f"got {value:.4f}")
    assert abs(value - 24.066) <= 0.001


# ---------------------------------------------------------------------------
# 8. determinism and serialisation


@pytest.mark.criterion(8, "Determinism & serialization")
def test_c8_loss_logs_bitwise():
    pairs = toy_pairs(6, 32)
    logs = []
    for _ in range(2):
        buf = io.StringIO()
        train_reconstruction(build_gln(4, 4, seed=3, hr_size=32), pairs,
                             TrainConfig(iterations=20, learning_rate=1e-5, seed=3), buf)
        logs.append(buf.getvalue())
    ok = logs[0] == logs[1] and len(logs[0].splitlines()) >= 20
    verdict("C8[logs]", ok, f"{len(logs[0])} bytes identical")
    assert ok


@pytest.mark.criterion(8, "Determinism & serialization")
@pytest.mark.parametrize("d,depth", [(4, 8), (8, 8)])
def test_c8_checkpoint_forward_bitwise(d, depth, tmp_path):
    model = build_gln(d, depth, seed=11)
    for _, p in model.named_parameters():
        p += rng(1).normal(0, 0.01, p.shape).astype(p.dtype)
    path = str(tmp_path / "m.glnc")
    ckpt.save(path, model, optimizer_state=True)
    loaded = ckpt.load(path)
    x = rng(2).random((2,) + model.input_shape).astype(np.float32)
    ok = model.forward(x).tobytes() == loaded.forward(x).tobytes()
    verdict(f"C8[checkpoint d={d}]", ok)
    assert ok
