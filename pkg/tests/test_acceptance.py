"""Acceptance criteria, one test each; outcomes are summarized after the run."""

import csv
import math
import time

import numpy as np
import pytest

from miniseg import metrics
from miniseg.blocks import AHSP
from miniseg.cli import main
from miniseg.data_io import synthetic_blobs, write_sample
from miniseg.model import (
    ABLATIONS,
    MiniSegConfig,
    ModelWeights,
    build,
    count_flops,
    count_parameters,
    load_checkpoint,
    load_model,
    save_checkpoint,
)
from miniseg.model.audit import FLOP_BAND, PAPER_FLOPS, PAPER_PARAMS, PARAM_BAND
from miniseg.tensor import ConvSpec, Tensor, conv2d
from miniseg.tensor.gradcheck import FD_STEP, REL_TOL, run_suite
from miniseg.training import TrainConfig, evaluate, fit, kfold_split

import oracles

pytestmark = pytest.mark.acceptance


def test_01_parameter_audit(criterion):
    with criterion(1, "parameter audit") as rec:
        t0 = time.perf_counter()
        report = count_parameters(build())
        sb = count_parameters(build(MiniSegConfig(flags={"single_branch"})))
        elapsed = time.perf_counter() - t0
        rec.detail = (
            f"total {report.total} vs {PAPER_PARAMS}, band {PARAM_BAND}; "
            f"single_branch {sb.total}; {elapsed:.2f}s"
        )
        assert set(report.by_module) >= {"stage1", "stage2", "stage3", "stage4", "decoder", "heads"}
        assert sum(report.by_module.values()) == report.total
        assert PARAM_BAND[0] <= report.total <= PARAM_BAND[1]
        assert sb.total < report.total
        assert elapsed < 1.0


def test_02_flop_audit(criterion):
    with criterion(2, "FLOP audit") as rec:
        t0 = time.perf_counter()
        model = build()
        f512 = count_flops(model, 512, 512)
        f256 = count_flops(model, 256, 256)
        elapsed = time.perf_counter() - t0
        ratio = f512.total / f256.total
        conv_macs = f512.by_op.get("conv2d", 0) / 2
        rec.detail = (
            f"{f512.total / 1e9:.3f}G vs {PAPER_FLOPS / 1e9:.2f}G, band "
            f"[{FLOP_BAND[0] / 1e9:.2f}G, {FLOP_BAND[1] / 1e9:.2f}G]; conv MACs {conv_macs / 1e9:.3f}G; "
            f"ratio {ratio:.3f}; {elapsed:.2f}s; convention: {f512.convention}"
        )
        print(f"FLOP convention: {f512.convention}")
        assert 3.8 <= ratio <= 4.2
        assert elapsed < 1.0
        assert FLOP_BAND[0] <= f512.total <= FLOP_BAND[1], (
            f"{f512.total / 1e9:.3f}G outside the band under the 2xMAC convention"
        )


def test_03_gradient_suite(criterion):
    with criterion(3, "gradient suite") as rec:
        t0 = time.perf_counter()
        results = run_suite(seed=0)
        elapsed = time.perf_counter() - t0
        worst = max(results, key=lambda r: r.max_rel_error)
        rec.detail = (
            f"{len(results)} ops, step {FD_STEP}, worst {worst.name} {worst.max_rel_error:.2e}; {elapsed:.1f}s"
        )
        failed = [r.name for r in results if r.max_rel_error >= REL_TOL]
        assert not failed, f"ops over tolerance: {failed}"
        assert elapsed < 120


def _conv_variants():
    """Every conv shape family the network uses, at small sizes."""
    v = [
        ("vanilla3x3", lambda c, o: ConvSpec(c, o, (3, 3), 1, 1)),
        ("vanilla3x3_s2", lambda c, o: ConvSpec(c, o, (3, 3), 2, 1)),
        ("pointwise", lambda c, o: ConvSpec(c, o, (1, 1))),
        ("pointwise_bias", lambda c, o: ConvSpec(c, o, (1, 1), has_bias=True)),
        ("grouped_fuse", lambda c, o: ConvSpec(4 * c, 4 * c, (1, 1), groups=4)),
        ("grouped_attention", lambda c, o: ConvSpec(4 * c, 4, (1, 1), groups=4, has_bias=True)),
        ("dw5x5", lambda c, o: ConvSpec(c, c, (5, 5), 1, 2, 1, c)),
        ("dw5x5_s2", lambda c, o: ConvSpec(c, c, (5, 5), 2, 2, 1, c)),
        ("dw3x3", lambda c, o: ConvSpec(c, c, (3, 3), 1, 1, 1, c)),
        ("dw3x3_s2", lambda c, o: ConvSpec(c, c, (3, 3), 2, 1, 1, c)),
    ]
    for d in (1, 2, 4, 8):
        for s in (1, 2):
            v.append((f"dw3x3_r{d}_s{s}", lambda c, o, d=d, s=s: ConvSpec(c, c, (3, 3), s, d, d, c)))
    return v


def test_04_conv_oracle(criterion):
    with criterion(4, "convolution oracle") as rec:
        rng = np.random.default_rng(2024)
        variants = _conv_variants()
        t0 = time.perf_counter()
        worst = 0.0
        n = 200
        for i in range(n):
            name, make = variants[i % len(variants)]
            spec = make(int(rng.integers(1, 5)), int(rng.integers(1, 5)))
            h, w = int(rng.integers(3, 12)), int(rng.integers(3, 12))
            batch = int(rng.integers(1, 3))
            # float64 path on gaussian data
            x = rng.standard_normal((batch, spec.in_channels, h, w))
            k = rng.standard_normal(spec.weight_shape)
            b = rng.standard_normal(spec.out_channels) if spec.has_bias else None
            got = conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64),
                         None if b is None else Tensor(b, dtype=np.float64), spec).data
            ref = oracles.conv2d_loops(x, k, b, spec.stride, spec.padding, spec.dilation, spec.groups)
            assert got.shape == ref.shape, f"{name}: shape {got.shape} vs {ref.shape}"
            worst = max(worst, float(np.abs(got - ref).max()))
            assert np.allclose(got, ref, atol=1e-5, rtol=0), f"{name}: max err {np.abs(got - ref).max():.2e}"
            # float32 path on dyadic data: every product and sum is exact
            xq = rng.integers(-16, 17, x.shape) / 8.0
            kq = rng.integers(-16, 17, k.shape) / 8.0
            bq = None if b is None else rng.integers(-16, 17, b.shape) / 8.0
            f32 = np.float32
            got32 = conv2d(Tensor(xq, dtype=f32), Tensor(kq, dtype=f32),
                           None if bq is None else Tensor(bq, dtype=f32), spec).data
            ref32 = oracles.conv2d_loops(xq, kq, bq, spec.stride, spec.padding, spec.dilation, spec.groups)
            assert got32.dtype == np.float32
            assert np.array_equal(got32, ref32), f"{name}: float32 dyadic mismatch"
        elapsed = time.perf_counter() - t0
        rec.detail = f"{n} instances over {len(variants)} variants, worst float64 err {worst:.1e}; {elapsed:.1f}s"
        assert elapsed < 60


def test_05_architecture_invariants(criterion):
    with criterion(5, "architecture invariants") as rec:
        t0 = time.perf_counter()
        model = build()
        for size in (64, 128, 256, 512):
            x = Tensor(np.random.default_rng(size).random((1, 3, size, size)).astype(np.float32))
            trace = {}
            p1 = model(x, trace=trace).data
            assert p1.shape == (1, 2, size, size)
            assert np.abs(p1.sum(axis=1) - 1).max() <= 1e-6
            for i, (es, c) in enumerate(zip(trace["E"], (8, 24, 32, 64))):
                scale = 2 ** (i + 1)
                assert es[-1].shape == (1, c, size // scale, size // scale)
                for q in trace["Q"][i]:
                    assert q.shape == es[-1].shape
        checked = []
        for flag in (None,) + ABLATIONS:
            cfg = MiniSegConfig(flags={flag} if flag else set())
            outs = build(cfg)(Tensor(np.random.default_rng(1).random((1, 3, 64, 64)).astype(np.float32)), mode="train")
            assert all(o.shape == (1, 2, 64, 64) for o in outs)
            checked.append(flag or "default")
        elapsed = time.perf_counter() - t0
        rec.detail = f"sizes 64-512 ok; {len(checked)} configs shape-checked; {elapsed:.1f}s"
        assert elapsed < 60


def test_06_ahsp_suite(criterion):
    with criterion(6, "AHSP unit suite") as rec:
        rng = np.random.default_rng(6)
        block = AHSP(24, 32, rng)
        x = Tensor(rng.standard_normal((2, 24, 16, 16)).astype(np.float32))
        trace = {}
        block(x, trace)
        a = trace["A"].data
        assert a.shape[1] == 4 and np.all((a > 0) & (a < 1))
        total = trace["F0"].data.astype(np.float64) + sum(f.data.astype(np.float64) for f in trace["F"])
        tele = float(np.abs(trace["F_dot"][-1].data - total).max())
        assert tele <= 1e-5

        block.attention.weight.data[:] = 0
        block.attention.bias.data[:] = 0
        trace = {}
        block(x, trace)
        for fd, fdd in zip(trace["F_dot"], trace["F_ddot"]):
            assert np.array_equal(fdd.data, 1.5 * fd.data)

        blocks = [b for s in build().stages[1:] for b in s.e]
        for b in blocks:
            assert b.fuse.weight.size == b.out_channels**2 // b.branches
        rec.detail = f"telescoping err {tele:.1e}; fuse count C'^2/K on {len(blocks)} blocks"


def test_07_metrics_oracle(criterion):
    with criterion(7, "metrics oracle") as rec:
        rng = np.random.default_rng(7)
        for _ in range(500):
            pred = oracles.random_mask(rng)
            gt = oracles.random_mask(rng) if rng.random() < 0.7 else pred.copy()
            if gt.shape != pred.shape:
                gt = oracles.random_mask(np.random.default_rng(int(rng.integers(1 << 30))), max_size=32)
                gt = np.resize(gt, pred.shape)
            c = metrics.confusion(pred, gt)
            assert (c.tp, c.fp, c.fn, c.tn) == oracles.confusion_loops(pred, gt)
            m = metrics.compute_metrics(c)
            for key, val in oracles.metrics_from_counts(c.tp, c.fp, c.fn, c.tn).items():
                assert m[key] == val, key
            assert math.isclose(m["DSC"], 2 * m["IoU_fg"] / (1 + m["IoU_fg"]), abs_tol=1e-12)
            assert metrics.hausdorff(pred, gt) == oracles.hausdorff_all_pairs(pred, gt)
            assert metrics.lesion_count(gt) == oracles.flood_fill_count(gt)

        gt = np.zeros((10, 10), np.uint8)
        pred = np.zeros((10, 10), np.uint8)
        gt.flat[:10] = 1
        pred.flat[2:12] = 1
        c = metrics.confusion(pred, gt)
        assert (c.tp, c.fp, c.fn, c.tn) == (8, 2, 2, 88)
        m = metrics.compute_metrics(c)
        assert math.isclose(m["DSC"], 0.80) and math.isclose(m["SEN"], 0.80)
        assert abs(m["SPC"] - 0.9778) < 5e-5 and abs(m["mIoU"] - 0.8116) < 5e-5
        rec.detail = f"500 mask pairs exact; fixture DSC {m['DSC']:.2f} SPC {m['SPC']:.4f} mIoU {m['mIoU']:.4f}"


@pytest.mark.slow
def test_08_overfit_sanity(criterion):
    with criterion(8, "overfit sanity") as rec:
        data = synthetic_blobs(8, size=128, seed=0)
        cfg = TrainConfig(epochs=50, batch_size=2, crop_size=None, seed=0)
        model = build(seed=0)
        t0 = time.perf_counter()
        _, log = fit(model, data, cfg)
        dsc, miou = evaluate(model, data)
        elapsed = time.perf_counter() - t0
        first, last = log[0].mean_train_loss, log[-1].mean_train_loss
        rec.detail = f"{len(log)} epochs, loss {first:.3f} -> {last:.3f}, train DSC {dsc:.3f}; {elapsed:.0f}s"
        assert len(log) <= 50
        assert first > last
        assert dsc > 0.9
        assert elapsed < 15 * 60


def test_09_determinism_and_persistence(criterion, tmp_path):
    with criterion(9, "determinism and persistence") as rec:
        data = synthetic_blobs(4, size=32, seed=9)
        cfg = TrainConfig(epochs=2, batch_size=2, crop_size=16, seed=9)
        curves, finals = [], []
        for _ in range(2):
            model = build(seed=9)
            weights, log = fit(model, data, cfg)
            curves.append([e.mean_train_loss for e in log])
            finals.append(weights)
        assert curves[0] == curves[1], "loss curves differ"
        assert finals[0].equals(finals[1])

        path = tmp_path / "m.msg"
        save_checkpoint(model, path)
        cfg_loaded, loaded = load_checkpoint(path)
        assert cfg_loaded == model.config
        assert loaded.equals(ModelWeights.from_model(model))

        x = Tensor(np.random.default_rng(1).random((1, 3, 64, 64)).astype(np.float32))
        p_a = model(x).data
        p_b = model(x).data
        p_c = load_model(path)(x).data
        assert p_a.tobytes() == p_b.tobytes() == p_c.tobytes()
        rec.detail = f"loss curve {[round(v, 5) for v in curves[0]]} reproduced; checkpoint and infer bit-exact"


def test_10_cross_validation(criterion, tmp_path):
    with criterion(10, "cross-validation harness") as rec:
        for n in (5, 7, 23, 100):
            ids = [f"s{i:03d}" for i in range(n)]
            folds = kfold_split(ids, 5, seed=1)
            vals = [v for _, v in folds]
            assert sorted(sum(vals, [])) == ids
            assert max(map(len, vals)) - min(map(len, vals)) <= 1
            for train, val in folds:
                assert not set(train) & set(val) and len(train) + len(val) == n

        root = tmp_path / "data"
        for s in synthetic_blobs(10, size=32, seed=10):
            write_sample(root, s)
        out = tmp_path / "run"
        assert main(["train", "--data", str(root), "--out", str(out), "--fold", "2", "--epochs", "1",
                     "--crop-size", "0", "--seed", "4"]) == 0
        assert sorted(p.name for p in out.glob("fold*")) == ["fold2.msg", "fold2_log.csv"]
        with open(out / "metrics.csv") as fh:
            table = list(csv.reader(fh))
        evaluated = [r[0] for r in table[1:] if not r[0].startswith(("fold", "all_"))]
        expected = kfold_split(sorted(s.id for s in synthetic_blobs(10, size=32, seed=10)), 5, seed=4)[2][1]
        assert evaluated == expected
        rec.detail = f"partitions ok for n in 5,7,23,100; --fold 2 trained once, evaluated {evaluated}"
