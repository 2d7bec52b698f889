"""Acceptance gate: nine checks covering gradients, receptive fields,
convolution and metric equivalences, normalization behavior, the training
recipe, desk-scale convergence, bitwise determinism, and the study harness.

Each test prints one PASS line with its measured numbers; run with -s (or
read captured output) to see them.
"""

import math
import subprocess
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from vesselseg import ops
from vesselseg.cli import main as cli_main
from vesselseg.data import write_pnm
from vesselseg.metrics import (auc, basic_metrics, confusion, evaluate_image,
                               iou_foreground, mcc, miou, ConfusionCounts)
from vesselseg.models import NetworkSpec, build_network
from vesselseg.norm import (batch_norm, group_norm, instance_norm,
                            make_norm_state)
from vesselseg.ops import ConvParams
from vesselseg.receptive import receptive_field_mask, stack_from_rates
from vesselseg.rng import Rng
from vesselseg.synthetic import make_dataset
from vesselseg.tensor import Tensor, grad_check
from vesselseg.training import TrainConfig, poly_lr, train


def probe_weights(shape, seed):
    """Functional weights bounded away from zero, in +-[1, 2]."""
    rng = Rng(seed)
    count = int(np.prod(shape))
    mag = 1.0 + rng.uniform_array(count)
    sign = np.where(rng.uniform_array(count) < 0.5, -1.0, 1.0)
    return (mag * sign).reshape(shape)


def off_kink(shape, seed):
    """Input values bounded away from zero so relu stays differentiable."""
    return Tensor(probe_weights(shape, seed), requires_grad=True)


def smooth_input(shape, seed):
    return Tensor(Rng(seed).normal_array(shape), requires_grad=True)


# --- criterion 1: gradient fidelity ---------------------------------------

def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    tol_layer = 1e-5
    worst = 0.0

    def check(name, f, x, tol=tol_layer):
        nonlocal worst
        err = grad_check(f, x)
        worst = max(worst, err)
        assert err < tol, f"{name}: {err:.3e} >= {tol:.0e}"

    conv_cases = [
        (3, 1, 1, 1, True), (3, 2, 1, 2, True), (5, 1, 2, 3, True),
        (1, 1, 0, 1, False), (3, 3, 3, 2, True),
    ]
    for i, (k, s, pad, r, bias) in enumerate(conv_cases):
        x = smooth_input((2, 3, 9, 9), seed=100 + i)
        w = Tensor(Rng(200 + i).normal_array((4, 3, k, k)) * 0.5, requires_grad=True)
        b = Tensor(Rng(300 + i).normal_array((1, 4, 1, 1)), requires_grad=True) if bias else None
        params = ConvParams(w, b, s, pad, r)
        out_shape = ops.conv2d(Tensor(x.data), params).shape
        pw = probe_weights(out_shape, seed=400 + i)

        def f_x(t, params=params, pw=pw):
            return ops.weighted_sum(ops.conv2d(t, params), pw)

        def f_w(_, x=x, params=params, pw=pw):
            return ops.weighted_sum(ops.conv2d(Tensor(x.data), params), pw)

        check(f"conv k{k}s{s}p{pad}r{r}/x", f_x, x)
        check(f"conv k{k}s{s}p{pad}r{r}/w", f_w, w)
        if bias:
            check(f"conv k{k}s{s}p{pad}r{r}/b", f_w, b)

    x = smooth_input((2, 2, 6, 6), seed=1)
    pw = probe_weights((2, 2, 3, 3), seed=2)
    check("max_pool", lambda t: ops.weighted_sum(ops.max_pool2d(t, 2, 2), pw), x)

    x = smooth_input((1, 3, 7, 5), seed=3)
    pw = probe_weights((1, 3, 3, 2), seed=4)
    check("adaptive_avg_pool",
          lambda t: ops.weighted_sum(ops.adaptive_avg_pool2d(t, 3, 2), pw), x)

    x = smooth_input((1, 2, 4, 5), seed=5)
    pw = probe_weights((1, 2, 8, 10), seed=6)
    check("upsample_x2",
          lambda t: ops.weighted_sum(ops.upsample_bilinear(t, 8, 10), pw), x)
    pw = probe_weights((1, 2, 7, 8), seed=7)
    check("upsample_ragged",
          lambda t: ops.weighted_sum(ops.upsample_bilinear(t, 7, 8), pw), x)

    xa = smooth_input((1, 2, 3, 3), seed=8)
    xb = smooth_input((1, 3, 3, 3), seed=9)
    pw = probe_weights((1, 5, 3, 3), seed=10)
    check("concat/a",
          lambda t: ops.weighted_sum(ops.concat_channels([t, Tensor(xb.data)]), pw), xa)
    check("concat/b",
          lambda t: ops.weighted_sum(ops.concat_channels([Tensor(xa.data), t]), pw), xb)

    x = off_kink((2, 3, 4, 4), seed=11)
    pw = probe_weights((2, 3, 4, 4), seed=12)
    check("relu", lambda t: ops.weighted_sum(ops.relu(t), pw), x)

    x = smooth_input((1, 4, 3, 3), seed=13)
    pw = probe_weights((1, 4, 3, 3), seed=14)
    check("softmax", lambda t: ops.weighted_sum(ops.softmax_channel(t), pw), x)

    labels = (Rng(15).uniform_array(2 * 5 * 5).reshape(2, 5, 5) < 0.5).astype(np.int64)
    x = smooth_input((2, 2, 5, 5), seed=16)
    check("cross_entropy", lambda t: ops.softmax_cross_entropy(t, labels), x)

    x = smooth_input((1, 2, 3, 3), seed=17)
    check("sum_squares", lambda t: ops.sum_squares(t), x)
    other = Rng(18).normal_array((1, 2, 3, 3))
    check("add+scale",
          lambda t: ops.scale(ops.tensor_sum(ops.add(t, Tensor(other))), 0.7), x)

    for kind, groups, shape in (("BN", 1, (2, 4, 4, 5)), ("GN", 2, (2, 4, 3, 3)),
                                ("IN", 1, (2, 3, 4, 4))):
        state = make_norm_state(kind, shape[1], groups=groups)
        state.gamma.data = probe_weights((1, shape[1], 1, 1), seed=20)
        state.beta.data = Rng(21).normal_array((1, shape[1], 1, 1))
        x = smooth_input(shape, seed=22)
        pw = probe_weights(shape, seed=23)

        def apply(t, kind=kind, state=state):
            if kind == "BN":
                return batch_norm(t, state, training=True)
            if kind == "GN":
                return group_norm(t, state)
            return instance_norm(t, state)

        check(f"{kind}/x", lambda t: ops.weighted_sum(apply(t), pw), x)
        check(f"{kind}/gamma",
              lambda _: ops.weighted_sum(apply(Tensor(x.data)), pw), state.gamma)
        check(f"{kind}/beta",
              lambda _: ops.weighted_sum(apply(Tensor(x.data)), pw), state.beta)

    bn_state = make_norm_state("BN", 3)
    bn_state.running_mean = Rng(24).normal_array((1, 3, 1, 1)).reshape(3)
    bn_state.running_var = 1.0 + Rng(25).uniform_array(3)
    x = smooth_input((1, 3, 4, 4), seed=26)
    pw = probe_weights((1, 3, 4, 4), seed=27)
    check("BN-eval/x",
          lambda t: ops.weighted_sum(batch_norm(t, bn_state, training=False), pw), x)

    spec = NetworkSpec(variant="cieunet", norm_kind="GN", gn_groups=2,
                       base_width=4, psp_bins=(1, 2))
    net = build_network(spec, seed=11)
    x = Tensor(Rng(13).normal_array((1, 3, 16, 16)), requires_grad=True)
    pw = probe_weights((1, 2, 16, 16), seed=17)
    composite = grad_check(lambda t: ops.weighted_sum(net(t, True), pw), x)
    worst = max(worst, composite)
    assert composite < 1e-4, f"composite: {composite:.3e}"

    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0
    print(f"PASS criterion 1: per-layer gradient checks < 1e-5 and composite "
          f"{composite:.2e} < 1e-4 (worst {worst:.2e}, {elapsed:.1f}s)")


# --- criterion 2: receptive-field coverage ---------------------------------

def test_criterion_2_receptive_field_densities():
    uniform2 = receptive_field_mask(stack_from_rates([2, 2, 2]))
    assert uniform2.extent == (13, 13)
    assert Fraction(uniform2.reachable, 13 * 13) == Fraction(49, 169)

    single_mixed = receptive_field_mask(stack_from_rates([1, 2, 1]))
    assert single_mixed.reachable == single_mixed.extent[0] * single_mixed.extent[1]
    assert single_mixed.density == 1.0

    cascade = receptive_field_mask(
        stack_from_rates([1, 2, 1, 2, 4, 2, 4, 8, 4]))
    assert cascade.density == 1.0

    uniform9 = receptive_field_mask(
        stack_from_rates([2, 2, 2, 4, 4, 4, 8, 8, 8]))
    assert uniform9.extent == (85, 85)
    assert Fraction(uniform9.reachable, 85 * 85) == Fraction(1849, 7225)
    assert uniform9.reachable == 43 * 43

    print("PASS criterion 2: gridding densities exact "
          f"(uniform triple {uniform2.reachable}/169, cascade 1.0, "
          f"uniform nine-layer {uniform9.reachable}/7225)")


# --- criterion 3: convolution against a brute-force oracle -----------------

def conv_oracle(x, w, b, stride, pad, dilation):
    n, c, h, wdt = x.shape
    oc, _, kh, kw = w.shape
    oh = (h + 2 * pad - ((kh - 1) * dilation + 1)) // stride + 1
    ow = (wdt + 2 * pad - ((kw - 1) * dilation + 1)) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for ni in range(n):
        for oi in range(oc):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else b[0, oi, 0, 0]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                ii = i * stride - pad + u * dilation
                                jj = j * stride - pad + v * dilation
                                if 0 <= ii < h and 0 <= jj < wdt:
                                    acc += x[ni, ci, ii, jj] * w[oi, ci, u, v]
                    out[ni, oi, i, j] = acc
    return out


def test_criterion_3_convolution_oracle_sweep():
    t0 = time.perf_counter()
    rng = Rng(2024)
    done = 0
    worst = 0.0
    while done < 100:
        k = (1, 3, 5)[rng.randint(3)]
        stride = 1 + rng.randint(3)
        dilation = 1 + rng.randint(3)
        pad = rng.randint(4)
        n = 1 + rng.randint(2)
        ci = 1 + rng.randint(3)
        co = 1 + rng.randint(4)
        h = 1 + rng.randint(9)
        w = 1 + rng.randint(9)
        span = (k - 1) * dilation + 1
        if h + 2 * pad < span or w + 2 * pad < span:
            continue
        x = Rng(done).normal_array((n, ci, h, w))
        wgt = Rng(1000 + done).normal_array((co, ci, k, k))
        use_bias = rng.uniform() < 0.5
        bias = Rng(2000 + done).normal_array((1, co, 1, 1)) if use_bias else None
        params = ConvParams(
            Tensor(wgt), Tensor(bias) if use_bias else None, stride, pad, dilation)
        got = ops.conv2d(Tensor(x), params).data
        want = conv_oracle(x, wgt, bias, stride, pad, dilation)
        assert got.shape == want.shape
        diff = float(np.max(np.abs(got - want))) if got.size else 0.0
        worst = max(worst, diff)
        assert diff < 1e-12, f"config {done}: {diff:.3e}"
        done += 1
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    print(f"PASS criterion 3: 100 random convolution configs match the "
          f"brute-force oracle (worst {worst:.2e}, {elapsed:.1f}s)")


# --- criterion 4: metric equivalences ---------------------------------------

def test_criterion_4_metric_equivalences():
    t0 = time.perf_counter()
    rng = Rng(77)
    worst_mcc = worst_auc = worst_iou = 0.0
    for trial in range(1000):
        prob = rng.uniform_array(32 * 32).reshape(32, 32)
        rate = 0.05 + 0.9 * rng.uniform()
        gt = (rng.uniform_array(32 * 32).reshape(32, 32) < rate).astype(np.uint8)
        threshold = (0.3, 0.5, 0.7)[rng.randint(3)]

        c = confusion(prob, gt, threshold)
        pred = (prob >= threshold).astype(np.int64)
        counts = np.bincount(2 * gt.ravel().astype(np.int64) + pred.ravel(),
                             minlength=4)
        assert (c.tn, c.fp, c.fn, c.tp) == tuple(int(v) for v in counts)

        value, degenerate = mcc(c)
        den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
        if not degenerate:
            standard = (c.tp * c.tn - c.fp * c.fn) / math.sqrt(den)
            worst_mcc = max(worst_mcc, abs(value - standard))

        f1 = basic_metrics(c).f1
        fg, deg_fg = iou_foreground(c)
        if not deg_fg and f1 < 2.0:
            worst_iou = max(worst_iou, abs(fg - f1 / (2.0 - f1)))

        mean_iou, _ = miou(c)
        bg_den = c.tn + c.fp + c.fn
        if bg_den and (c.tp + c.fp + c.fn):
            direct = 0.5 * (c.tp / (c.tp + c.fp + c.fn) + c.tn / bg_den)
            assert abs(mean_iou - direct) < 1e-15

        if trial % 4 == 0:
            got_auc, deg_auc = auc(prob, gt)
            if not deg_auc:
                pos = prob[gt == 1]
                neg = prob[gt == 0]
                wins = np.sum(pos[:, None] > neg[None, :])
                ties = np.sum(pos[:, None] == neg[None, :])
                want = (wins + 0.5 * ties) / (pos.size * neg.size)
                worst_auc = max(worst_auc, abs(got_auc - want))

    assert worst_mcc < 1e-12
    assert worst_auc < 1e-12
    assert worst_iou < 1e-12
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    print(f"PASS criterion 4: 1000 random maps agree across independent "
          f"metric routes (mcc {worst_mcc:.1e}, auc {worst_auc:.1e}, "
          f"iou {worst_iou:.1e}, {elapsed:.1f}s)")


# --- criterion 5: normalization behavior ------------------------------------

def test_criterion_5_normalization_behavior():
    rng = Rng(5)
    x = Tensor(100.0 * rng.normal_array((4, 3, 8, 8)) + 50.0)
    state = make_norm_state("BN", 3)
    out = batch_norm(x, state, training=True).data
    for c in range(3):
        assert abs(out[:, c].mean()) < 1e-10
        assert abs(out[:, c].var() - 1.0) < 1e-3

    momentum = state.momentum
    mean_ref = np.zeros(3)
    var_ref = np.ones(3)
    state2 = make_norm_state("BN", 3)
    for seed in (1, 2, 3):
        xb = Tensor(Rng(seed).normal_array((2, 3, 4, 4)) * (1 + seed))
        batch_norm(xb, state2, training=True)
        batch_mean = xb.data.mean(axis=(0, 2, 3))
        batch_var = xb.data.var(axis=(0, 2, 3))
        mean_ref = (1 - momentum) * mean_ref + momentum * batch_mean
        var_ref = (1 - momentum) * var_ref + momentum * batch_var
    assert np.allclose(state2.running_mean, mean_ref, atol=1e-12)
    assert np.allclose(state2.running_var, var_ref, atol=1e-12)

    xe = Tensor(Rng(9).normal_array((2, 3, 5, 5)))
    eval_out = batch_norm(xe, state2, training=False).data
    want = (xe.data - state2.running_mean.reshape(1, 3, 1, 1)) / np.sqrt(
        state2.running_var.reshape(1, 3, 1, 1) + state2.eps)
    want = want * state2.gamma.data + state2.beta.data
    assert np.allclose(eval_out, want, atol=1e-12)

    xg = Tensor(Rng(11).normal_array((2, 6, 5, 5)))
    gn_state = make_norm_state("GN", 6, groups=6)
    in_state = make_norm_state("IN", 6)
    gn_out = group_norm(Tensor(xg.data), gn_state).data
    in_out = instance_norm(Tensor(xg.data), in_state).data
    assert np.max(np.abs(gn_out - in_out)) < 1e-12

    base = (Rng(13).u64_array(2 * 3 * 4 * 4) % 32).astype(np.float64) / 8.0
    base = base.reshape(2, 3, 4, 4)
    in_s = make_norm_state("IN", 3)
    a = instance_norm(Tensor(base.copy()), in_s).data
    b = instance_norm(Tensor(base + 5.0), in_s).data
    assert a.tobytes() == b.tobytes()

    net = build_network(NetworkSpec(variant="cieunet", norm_kind="IN",
                                    base_width=8), seed=0)
    context_kinds = set()
    outside_kinds = set()
    for path, m in net.named_modules():
        if m.__class__.__name__ == "NormLayer":
            (context_kinds if m.in_context else outside_kinds).add(m.state.kind)
    assert context_kinds == {"BN"}
    assert outside_kinds == {"IN"}

    print("PASS criterion 5: batch statistics, running-average recurrence, "
          "group/instance equivalence, shift invariance, and per-sample "
          "fallback placement all hold")


# --- criterion 6: recipe constants ------------------------------------------

def test_criterion_6_recipe_constants():
    cfg = TrainConfig()
    frozen = (cfg.patch_size, cfg.batch_size, cfg.max_steps, cfg.base_lr,
              cfg.poly_power, cfg.weight_decay, cfg.clip_norm, cfg.beta1,
              cfg.beta2, cfg.adam_eps)
    assert frozen == (64, 64, 30000, 1e-3, 0.9, 1e-5, 0.5, 0.5, 0.999, 1e-8)
    assert poly_lr(15000, cfg) == pytest.approx(5.358867312681466e-4, rel=1e-12)

    spec = NetworkSpec()
    assert spec.variant == "cieunet"
    assert spec.base_width == 32
    assert spec.psp_bins == (1, 2, 3, 6)
    assert spec.aspp_rates == (6, 12, 18)
    assert spec.gn_groups == 8
    assert spec.multigrid
    assert spec.resolved_context() == "psp"

    net = build_network(NetworkSpec(base_width=8), seed=0)
    assert [m.rates for m in net.modules] == [(1, 2, 1), (2, 4, 2), (4, 8, 4)]

    print("PASS criterion 6: optimizer, schedule, and architecture defaults "
          "match the frozen recipe")


# --- criterion 7: desk-scale convergence ------------------------------------

def test_criterion_7_desk_scale_convergence():
    t0 = time.perf_counter()
    images, gts = make_dataset(0, 4, 128)
    train_imgs, train_gts = images[:3], gts[:3]
    hold_img, hold_gt = images[3], gts[3]

    spec = NetworkSpec(variant="cieunet", norm_kind="BN", base_width=16)
    net = build_network(spec, seed=1)
    cfg = TrainConfig(patch_size=64, batch_size=8, max_steps=500,
                      log_every=50, seed=2)
    rows = train(net, train_imgs, train_gts, cfg)
    assert 0.3 < rows[0].loss < 1.5, "initial loss should sit near ln 2"
    final_loss = rows[-1].loss
    record = evaluate_image(net, hold_img, hold_gt)
    f1 = record["f1"]
    assert final_loss < 0.05, f"final loss {final_loss:.4f}"
    assert f1 >= 0.95, f"held-out f1 {f1:.4f}"

    scores = {}
    for variant in ("backbone", "dilated4"):
        small = build_network(NetworkSpec(variant=variant, norm_kind="BN",
                                          base_width=16), seed=1)
        train(small, train_imgs, train_gts,
              TrainConfig(patch_size=64, batch_size=8, max_steps=120,
                          log_every=40, seed=2))
        scores[variant] = evaluate_image(small, hold_img, hold_gt)["f1"]
    assert scores["backbone"] < scores["dilated4"], scores

    elapsed = time.perf_counter() - t0
    assert elapsed < 1800.0
    print(f"PASS criterion 7: flagship overfit reaches loss "
          f"{final_loss:.4f} < 0.05 and held-out f1 {f1:.4f} >= 0.95; "
          f"coarse-stride baseline f1 {scores['backbone']:.3f} < dilated "
          f"f1 {scores['dilated4']:.3f} ({elapsed:.0f}s < 1800s)")


# --- criterion 8: bitwise determinism ---------------------------------------

def test_criterion_8_bitwise_determinism(tmp_path):
    data_root = tmp_path / "data"
    (data_root / "images").mkdir(parents=True)
    (data_root / "labels").mkdir()
    images, gts = make_dataset(5, 3, 64)
    for i, (img, gt) in enumerate(zip(images, gts)):
        write_pnm(data_root / "images" / f"s{i}.ppm", img)
        write_pnm(data_root / "labels" / f"s{i}.pgm", gt * 255)
    config = tmp_path / "run.cfg"
    config.write_text(
        "variant=cieunet\nnorm_kind=BN\nbase_width=8\npatch_size=32\n"
        f"batch_size=2\nmax_steps=6\nlog_every=2\ndata_root={data_root}\n")

    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        result = subprocess.run(
            [sys.executable, "-m", "vesselseg.cli", "train",
             "--config", str(config), "--out", str(out), "--serial"],
            capture_output=True, text=True, timeout=600)
        assert result.returncode == 0, result.stderr
        outputs.append(out)
    loss_a = (outputs[0] / "loss.csv").read_bytes()
    loss_b = (outputs[1] / "loss.csv").read_bytes()
    ckpt_a = (outputs[0] / "checkpoint.bin").read_bytes()
    ckpt_b = (outputs[1] / "checkpoint.bin").read_bytes()
    assert loss_a == loss_b
    assert ckpt_a == ckpt_b
    print(f"PASS criterion 8: two serial subprocess runs agree bitwise "
          f"({len(loss_a)} loss bytes, {len(ckpt_a)} checkpoint bytes)")


# --- criterion 9: study harness end to end ----------------------------------

def test_criterion_9_ablation_harness(tmp_path):
    data_root = tmp_path / "data"
    (data_root / "images").mkdir(parents=True)
    (data_root / "labels").mkdir()
    images, gts = make_dataset(6, 3, 64)
    for i, (img, gt) in enumerate(zip(images, gts)):
        write_pnm(data_root / "images" / f"s{i}.ppm", img)
        write_pnm(data_root / "labels" / f"s{i}.pgm", gt * 255)
    config = tmp_path / "abl.cfg"
    config.write_text(
        "base_width=4\ngn_groups=2\npatch_size=32\nbatch_size=2\n"
        f"max_steps=2\nlog_every=1\ndata_root={data_root}\n")
    out = tmp_path / "study"
    code = cli_main(["ablate", "--config", str(config), "--out", str(out)])
    assert code == 0
    lines = (out / "ablation.csv").read_text().strip().split("\n")
    names = [line.split(",")[0] for line in lines[1:]]
    assert names == ["backbone", "dilated16", "dilated8", "dilated4",
                     "dilated4_mg", "unet", "unet_cdm", "unet_cdm_aspp",
                     "cieunet_bn", "cieunet_gn", "cieunet_in"]
    for line in lines[1:]:
        cells = line.split(",")
        assert len(cells) == 14
        for cell in cells[5:]:
            assert math.isfinite(float(cell))
    print(f"PASS criterion 9: study harness trained and scored "
          f"{len(names)} variants end to end")
