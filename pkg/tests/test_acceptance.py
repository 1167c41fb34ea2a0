"""End-to-end acceptance checks, one test per criterion.

By default the MNIST criteria run on the desk-scale smoke setup (first 10k
training and first 2k test images). ``BCPNN_FULL=1`` switches to the full
60k/10k sets and the stricter accuracy target. Every criterion reports a
single PASS/FAIL line in the terminal summary.

Optional medical datasets for the mixed-precision ordering check are read from
``$BCPNN_MEDICAL_DIR/{pneumonia,breast}/`` containing ``train-images.raw``,
``train-labels.csv``, ``test-images.raw`` and ``test-labels.csv``.
"""

import contextlib
import math
import os
import random
import struct
import threading
import time
from pathlib import Path

import numpy as np
import pytest

from bcpnn import _kernels as K
from bcpnn.bench import measure, synthetic_images, synthetic_net
from bcpnn.config import breast_config, mnist_config, pneumonia_config
from bcpnn.encoding import load_raw_gray
from bcpnn.errors import ParamFileError
from bcpnn.inference import InferenceKernel, evaluate, op_count, soft_wta
from bcpnn.learning import SUPERVISED, FullKernel, TrainingParams, derive_weights, rewire, train_full, update_traces
from bcpnn.model_io import decode_params, encode_params, roundtrip
from bcpnn.network import build_network
from bcpnn.pipeline import INFER, INFER_STAGES, TRAIN, TRAIN_STAGES, PipelineSpec, build_pipeline, run_sequential, run_stream
from bcpnn.precision import FP16, FP32, MIXED, PrecisionMode, from_half, from_q312, to_half, to_q312

from . import oracles
from .conftest import ACCEPTANCE_LINES, random_images, tiny_config

FULL = os.environ.get("BCPNN_FULL") == "1"
N_TRAIN, N_TEST = (60000, 10000) if FULL else (10000, 2000)
TARGET_ACC = 0.926 if FULL else 0.88
TIME_LIMIT_S = 30 * 60 if FULL else 5 * 60
SCALE = "full 60k/10k" if FULL else "smoke 10k/2k"


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record PASS/FAIL for one criterion; the body sets ``info['detail']``."""
    info = {"detail": ""}
    try:
        yield info
    except pytest.skip.Exception:
        ACCEPTANCE_LINES[number] = f"criterion {number} SKIP  {title}: {info['detail']}"
        raise
    except BaseException as exc:
        msg = " ".join(str(exc).split())[:160]
        ACCEPTANCE_LINES[number] = f"criterion {number} FAIL  {title}: {info['detail']} {msg}".rstrip()
        print(ACCEPTANCE_LINES[number])
        raise
    ACCEPTANCE_LINES[number] = f"criterion {number} PASS  {title}: {info['detail']}"
    print(ACCEPTANCE_LINES[number])


# ---------------------------------------------------------------- shared trained model


@pytest.fixture(scope="module")
def trained(mnist):
    train, test = mnist
    train, test = train.subset(N_TRAIN), test.subset(N_TEST)
    net = build_network(mnist_config())
    t0 = time.perf_counter()
    result = train_full(net, train, test=test)
    wall = time.perf_counter() - t0
    return dict(net=net, train=train, test=test, result=result, wall=wall)


@pytest.fixture(scope="module")
def fp32_report(trained):
    return evaluate(trained["net"], trained["test"], FP32)


def test_criterion_1_mnist_accuracy(trained):
    with criterion(1, f"MNIST end-to-end accuracy ({SCALE})") as info:
        acc = trained["result"].final_accuracy
        info["detail"] = f"accuracy {acc:.4f} (target >= {TARGET_ACC}), train+eval {trained['wall']:.0f}s (limit {TIME_LIMIT_S}s)"
        assert acc >= TARGET_ACC
        assert trained["wall"] <= TIME_LIMIT_S


def test_criterion_2_fp16_parity(trained, fp32_report):
    with criterion(2, "FP16 strict parity") as info:
        r16 = evaluate(trained["net"], trained["test"], FP16)
        agree = float(np.mean(r16.predictions == fp32_report.predictions))
        gap = abs(r16.accuracy - fp32_report.accuracy)
        info["detail"] = (f"fp32 {fp32_report.accuracy:.4f}, fp16 {r16.accuracy:.4f}, gap {100 * gap:.2f}pp, "
                          f"argmax agreement {100 * agree:.2f}%")
        assert gap <= 0.005
        assert agree >= 0.99


def _medical_sets():
    root = os.environ.get("BCPNN_MEDICAL_DIR")
    out = []
    if not root:
        return out
    for name, cfg, side in (("pneumonia", pneumonia_config(), 64), ("breast", breast_config(), 128)):
        d = Path(root) / name
        if (d / "train-images.raw").is_file():
            tr = load_raw_gray(d / "train-images.raw", d / "train-labels.csv", side, side, 2)
            te = load_raw_gray(d / "test-images.raw", d / "test-labels.csv", side, side, 2, "test")
            out.append((name, cfg, tr, te))
    return out


def test_criterion_3_mixed_degradation(trained, fp32_report):
    with criterion(3, "mixed Q3.12 degradation") as info:
        rmx = evaluate(trained["net"], trained["test"], MIXED)
        drop = fp32_report.accuracy - rmx.accuracy
        info["detail"] = (f"fp32 {fp32_report.accuracy:.4f}, mixed {rmx.accuracy:.4f}, drop {100 * drop:.2f}pp, "
                          f"saturations {rmx.saturations}")
        assert isinstance(rmx.saturations, int) and rmx.saturations >= 0
        assert rmx.accuracy <= fp32_report.accuracy + 0.005
        assert drop <= 0.005
        for name, cfg, tr, te in _medical_sets():
            net = build_network(cfg)
            train_full(net, tr)
            a32 = evaluate(net, te, FP32).accuracy
            amx = evaluate(net, te, MIXED)
            info["detail"] += f"; {name} fp32 {a32:.4f} mixed {amx.accuracy:.4f} sat {amx.saturations}"
            assert amx.accuracy <= a32 + 0.005


def test_criterion_4_kernel_equivalence(trained):
    with criterion(4, "inference-only vs full-kernel argmax") as info:
        net, test = trained["net"], trained["test"]
        full = FullKernel(net.copy(), TrainingParams.from_config(net.config, N_TRAIN), SUPERVISED)
        parts = []
        for mode in (FP32, FP16, MIXED):
            deployed = InferenceKernel(decode_params(encode_params(net, mode)), mode)
            sub = full.inference_kernel(mode)
            a = np.array([deployed.predict(img).predicted_class for img in test.images])
            b = np.array([sub.predict(img).predicted_class for img in test.images])
            same = float(np.mean(a == b))
            parts.append(f"{mode} {100 * same:.2f}%")
            assert same == 1.0, f"{mode}: {np.count_nonzero(a != b)} mismatches"
        info["detail"] = "identical argmax " + ", ".join(parts) + f" over {len(test)} samples"


def _run_with_timeout(fn, timeout):
    box = {}

    def target():
        try:
            box["value"] = fn()
        except BaseException as exc:
            box["error"] = exc

    t = threading.Thread(target=target, daemon=True)
    t.start()
    t.join(timeout)
    if t.is_alive():
        return "deadlock", None
    if "error" in box:
        raise box["error"]
    return "ok", box["value"]


def _same(a, b):
    return len(a) == len(b) and all(
        x.predicted_class == y.predicted_class and np.array_equal(x.output_probabilities, y.output_probabilities)
        for x, y in zip(a, b)
    )


def test_criterion_5_pipeline_oracle(trained):
    with criterion(5, "pipeline vs sequential + soak") as info:
        net, test = trained["net"], trained["test"]
        imgs = test.images
        seq = [InferenceKernel(net, FP32, 1).predict(img) for img in imgs]
        for pf in (1, 8, 16):
            for cap in (1, 64):
                pipe = build_pipeline(net, INFER, PipelineSpec(INFER_STAGES, cap, pf), precision=FP32)
                out = run_stream(pipe, imgs).outputs
                assert _same(out, seq), f"pf={pf} cap={cap} differs"
        sub = imgs[:300]
        seq16 = [InferenceKernel(net, FP16, 1).predict(img) for img in sub]
        for pf in (8, 16):
            pipe = build_pipeline(net, INFER, PipelineSpec(INFER_STAGES, 1, pf), precision=FP16)
            assert _same(run_stream(pipe, sub).outputs, seq16)

        rng = random.Random(2024)
        small = build_network(tiny_config())
        small_imgs = random_images(40)
        runs = deadlocks = 0
        t_end = time.perf_counter() + 30.0
        while time.perf_counter() < t_end:
            cap = rng.choice([1, 2, 3, 7, 16, 64, 128])
            pf = rng.choice([1, 2, 4, 8, 16, 32])
            if rng.random() < 0.25:
                cfg = small.config
                p = TrainingParams.from_config(cfg, 40, rewire_period=rng.randint(1, 20))
                n = rng.randint(0, 40)
                samples = [(img, None) for img in small_imgs[:n]]
                a_net, b_net = small.copy(), small.copy()
                status, res = _run_with_timeout(
                    lambda: run_stream(build_pipeline(a_net, TRAIN, PipelineSpec(TRAIN_STAGES, cap, pf), params=p), samples), 20)
                ref = run_sequential(build_pipeline(b_net, TRAIN, PipelineSpec(TRAIN_STAGES, cap, pf), params=p), samples)
                if status == "ok":
                    assert a_net.checksum() == b_net.checksum()
                    assert all(np.array_equal(x.output_probabilities, y.output_probabilities)
                               for x, y in zip(res.outputs, ref))
            else:
                mode = rng.choice([FP32, FP16, MIXED, PrecisionMode.parse("fp16", "storage")])
                start = rng.randint(0, len(imgs) - 1)
                chunk = imgs[start: start + rng.randint(0, 60)]
                pipe = build_pipeline(net, INFER, PipelineSpec(INFER_STAGES, cap, pf), precision=mode)
                status, res = _run_with_timeout(lambda: run_stream(pipe, chunk), 20)
                if status == "ok":
                    assert _same(res.outputs, run_sequential(pipe, chunk))
            runs += 1
            deadlocks += status == "deadlock"
        info["detail"] = (f"bit-identical at pf {{1,8,16}} x cap {{1,64}} on {len(imgs)} samples; "
                          f"soak {runs} random runs in 30s, {deadlocks} deadlocks")
        assert deadlocks == 0


def test_criterion_6_scaling_trend():
    with criterion(6, "Pneumonia scaling trend") as info:
        base = pneumonia_config()
        ops30, ops10 = op_count(base), op_count(base.replace(n_hidden_hcu=10))
        reduction = 1 - ops10 / ops30
        points = [
            ("hcu=30", base), ("hcu=20", base.replace(n_hidden_hcu=20)), ("hcu=10", base.replace(n_hidden_hcu=10)),
            ("mcu=300", base.replace(hidden_mcu_per_hcu=300)), ("mcu=200", base.replace(hidden_mcu_per_hcu=200)),
            ("nact=160/40", base.replace(n_act=160, n_sil=40, n_replace=10)),
        ]
        rows = []
        for cid, cfg in points:
            net = synthetic_net(cfg)
            row = measure(cid, net, synthetic_images(cfg, 15), FP32, repeats=3, warmup=3, with_accuracy=False)
            rows.append((cid, op_count(cfg), row.median_us))
            del net
        bad = []
        for i, (ca, oa, la) in enumerate(rows):
            for cb, ob, lb in rows[i + 1:]:
                if max(oa, ob) >= 1.10 * min(oa, ob) and (oa > ob) != (la > lb):
                    bad.append(f"{ca}({la:.0f}us) vs {cb}({lb:.0f}us)")
        lat = ", ".join(f"{c} {l / 1e3:.1f}ms" for c, _, l in rows)
        info["detail"] = f"op reduction HCU30->10 {100 * reduction:.1f}%; median latency {lat}"
        assert reduction >= 0.60
        assert not bad, "ordering mismatches: " + "; ".join(bad)


def test_criterion_7_precision_oracle():
    with criterion(7, "binary16 / Q3.12 emulation oracle") as info:
        rng = np.random.default_rng(7)
        n = 1_000_000
        pieces = [
            rng.normal(0, 1, n // 5),
            rng.normal(0, 1000, n // 5),
            np.ldexp(rng.uniform(1, 2, n // 5), rng.integers(-30, 18, n // 5)) * rng.choice([-1, 1], n // 5),
            # values at and around midpoints between adjacent halves
            (from_half(rng.integers(0, 0x7BFF, n // 5).astype(np.uint16)) * (1 + rng.choice([-1, 0, 1], n // 5) * 2.0**-11)),
            np.concatenate([rng.uniform(65504, 65600, n // 10), rng.uniform(-1e-7, 1e-7, n // 10)]),
        ]
        x = np.concatenate(pieces)
        assert x.size == n
        want_bits = np.fromiter((oracles.half_bits(float(v)) for v in x), dtype=np.uint16, count=n)
        got_bits = np.asarray(to_half(x), dtype=np.uint16)
        conv_mismatch = int(np.count_nonzero(got_bits != want_bits))
        want_vals = from_half(want_bits)
        kernel_vals = K.round_half_into(x, np.empty(n))
        kern_mismatch = int(np.count_nonzero(kernel_vals.view(np.uint64) != want_vals.view(np.uint64)))

        a = from_half(rng.integers(0, 0xFC00, 200_000).astype(np.uint16))
        b = from_half(rng.integers(0, 0xFC00, 200_000).astype(np.uint16))
        a, b = a[np.isfinite(a) & np.isfinite(b)], b[np.isfinite(a) & np.isfinite(b)]
        prod = K.round_half_into(a * b, np.empty(a.size))
        summ = K.round_half_into(a + b, np.empty(a.size))
        arith_mismatch = 0
        for i in range(a.size):
            pa, pb = float(a[i]), float(b[i])
            arith_mismatch += prod[i] != oracles.half(pa * pb)
            arith_mismatch += summ[i] != oracles.half(pa + pb)

        raw = np.arange(-32768, 32768)
        vals = from_q312(raw)
        q_ok = np.array_equal(to_q312(vals), raw) and np.all(np.diff(vals) > 0)
        mids = (raw[:-1] + 0.5) / 4096
        q_ok &= np.array_equal(to_q312(mids), [oracles.q312_raw(float(m)) for m in mids])
        big = np.concatenate([np.linspace(8, 1e6, 5000), -np.linspace(8, 1e6, 5000)])
        sat = from_q312(to_q312(big))
        q_ok &= bool(np.all(np.where(big > 0, sat == 32767 / 4096, sat == -8.0)))
        info["detail"] = (f"{n} conversions: {conv_mismatch} numpy-path and {kern_mismatch} kernel mismatches; "
                          f"{2 * a.size} products/sums: {arith_mismatch} mismatches; Q3.12 exhaustive ok={q_ok}")
        assert conv_mismatch == 0 and kern_mismatch == 0 and arith_mismatch == 0
        assert q_ok


def test_criterion_8_invariants(trained):
    with criterion(8, "invariant suites") as info:
        net, test = trained["net"], trained["test"]
        eps = 1e-8
        checks = []

        # trace bounds on random normalized activity
        rng = np.random.default_rng(8)
        probe = build_network(mnist_config())
        tr = probe.input_hidden.traces
        for _ in range(50):
            x = soft_wta(rng.normal(0, 3, (784, 2)))
            y = soft_wta(rng.normal(0, 3, (32, 128)))
            update_traces(tr, x, y, float(rng.uniform(0.01, 1.0)), probe.input_hidden.connectivity)
        assert all(a.min() >= 0 and a.max() <= 1 for a in (tr.p_pre, tr.p_post, tr.p_joint))
        for a in (net.input_hidden.traces.p_joint, net.hidden_output.traces.p_joint):
            assert a.min() >= 0 and a.max() <= 1
        checks.append("trace bounds")

        # weights and biases match the closed form of the trained traces
        worst = 0.0
        for proj in (net.input_hidden, net.hidden_output):
            t = proj.traces
            if proj.is_sparse:
                pre, post = t.p_pre[proj.connectivity.slots][..., :, None], t.p_post[:, None, None, :]
            else:
                pre, post = t.p_pre[:, None], t.p_post[None, :]
            lhs = np.exp(proj.weights) * (pre + eps) * (post + eps)
            worst = max(worst, float(np.max(np.abs(lhs / (t.p_joint + eps) - 1))))
        assert worst <= 1e-6
        checks.append(f"weight consistency (max rel err {worst:.1e})")

        # soft-WTA normalization of deployed activity
        k = InferenceKernel(net, FP32)
        for img in test.images[:200]:
            r = k.predict(img, keep_hidden=True)
            assert np.all(np.abs(r.hidden_activity.reshape(32, 128).sum(axis=1) - 1) <= 1e-6)
            assert abs(r.output_probabilities.sum() - 1) <= 1e-6
        checks.append("soft-WTA sums")

        # 100 random rewires on the MNIST configuration
        ih = probe.input_hidden
        params = TrainingParams(alpha=0.01, rewire_period=1, n_replace=16)
        for _ in range(100):
            ih.traces.p_joint[...] = rng.random(ih.traces.p_joint.shape) * 0.02
            derive_weights(ih)
            rewire(ih, params, rng)
            assert ih.connectivity.active.shape == (32, 64) and ih.connectivity.silent.shape == (32, 64)
            assert ih.connectivity.violations(784, 64, 64) == []
        checks.append("100 rewires")

        # bit-identical fp32 round trip
        back = roundtrip(net, FP32)
        for a, b in ((net.input_hidden.weights, back.input_hidden.weights),
                     (net.input_hidden.biases, back.input_hidden.biases),
                     (net.hidden_output.weights, back.hidden_output.weights),
                     (net.hidden_output.biases, back.hidden_output.biases)):
            assert np.array_equal(a.astype(np.float32), b.astype(np.float32))
        blob = encode_params(net, FP32)
        assert encode_params(back, FP32) == blob
        checks.append("fp32 file round trip")

        # single-bit corruption
        flips = 0
        for _ in range(300):
            pos = int(rng.integers(0, len(blob)))
            bad = bytearray(blob)
            bad[pos] ^= 1 << int(rng.integers(0, 8))
            with pytest.raises(ParamFileError):
                decode_params(bytes(bad))
            flips += 1
        checks.append(f"{flips} bit flips detected")
        info["detail"] = "; ".join(checks)
