"""Acceptance suite: one test per shipped exit criterion.

Each test prints a single pass/fail line.  Run with ``-s`` (or read the
captured output of a failure) to see them:

    pytest tests/test_acceptance.py -v -s
"""
import json
import math
from contextlib import contextmanager

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from instedit.cli import main as cli_main
from instedit.dms import InstanceEdit, InvertedTrajectory, SamplingPlan, run_edit, run_sns_phase
from instedit.io import RunConfig
from instedit.ipr import (
    CrossAttentionMap,
    FeatureMask,
    IprConfig,
    TokenLayout,
    apply_ipr,
    compute_lambda_s,
    ipr_active,
    make_ipr_hook,
)
from instedit.metrics import cia_score, ssim
from instedit.predictor import (
    Caption,
    ConstantPredictor,
    PredictorRequest,
    TinyAttentionPredictor,
    ToyGaussianPredictor,
    with_attention_hook,
)
from instedit.schedule import LatentSequence, denoise_sequence, invert_sequence

from conftest import square_mask


@contextmanager
def criterion(number: int, title: str):
    try:
        yield
    except Exception:
        print(f"ACCEPTANCE {number:02d}: FAIL - {title}")
        raise
    print(f"ACCEPTANCE {number:02d}: PASS - {title}")


H = W = 16
N = 3


def scene_with_edits(cap1="a red ball", cap2="a blue cube"):
    frame = np.full((H, W, 1), 0.2)
    frame[2:7, 2:7] = 0.5
    frame[9:14, 9:14] = 0.7
    z0 = LatentSequence(np.repeat(frame[None], N, axis=0), 0)
    m1 = square_mask(N, H, W, 2, 7, 2, 7)
    m2 = square_mask(N, H, W, 9, 14, 9, 14)
    edits = [
        InstanceEdit(m1, Caption.from_text(cap1), "one"),
        InstanceEdit(m2, Caption.from_text(cap2), "two"),
    ]
    return z0, m1, m2, edits


def gaussian(sched, sigma=0.0):
    frame = scene_with_edits()[0].frames[0]
    registry = {
        "": (frame, sigma),
        "a red ball": (np.full((H, W, 1), 0.9), sigma),
        "a blue cube": (np.full((H, W, 1), 0.1), sigma),
    }
    return ToyGaussianPredictor(registry, sched)


def test_01_ipr_conservation(rng):
    with criterion(1, "attention rewrite conserves rows, padding, confinement, positivity (1000 cases)"):
        checked = 0
        while checked < 1000:
            n_ctx = int(rng.integers(4, 17))
            n_text = int(rng.integers(1, n_ctx - 1))
            layout = TokenLayout(n_ctx=n_ctx, n_text=n_text)
            h, w = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            amap = CrossAttentionMap(rng.dirichlet(np.ones(n_ctx), size=h * w), (h, w))
            mask = FeatureMask(rng.integers(0, 2, h * w).astype(bool), (h, w))
            cfg = IprConfig(
                lambda_=float(rng.uniform(0, 1)),
                lambda_r=float(rng.uniform(0, 1)),
                warmup_fraction=float(rng.uniform(0, 1)),
                ipr_fraction=float(rng.uniform(0, 1)),
            )
            total = int(rng.integers(1, 61))
            step = int(rng.integers(0, total))
            t = int(rng.integers(0, 1001))
            out = apply_ipr(amap, mask, layout, cfg, step, total, t, 1000)
            if not ipr_active(cfg, step, total):
                assert out is amap
                continue
            checked += 1
            assert np.abs(out.values.sum(axis=1) - 1.0).max() < 1e-6
            assert np.all(out.values >= 0.0)
            p_cols = list(layout.indices_P)
            assert np.array_equal(out.values[:, p_cols], amap.values[:, p_cols])
            te = list(layout.indices_T) + [layout.index_E]
            outside = ~mask.bits
            assert np.all(out.values[np.ix_(outside, te)] == 0.0)


def test_02_lambda_s_oracle(rng):
    with criterion(2, "redistribution amount matches the independent 64-bit rule (1000 cases)"):
        for _ in range(1000):
            a = rng.uniform(0.0, 1.0, size=int(rng.integers(1, 21)))
            t = int(rng.integers(0, 1001))
            w_val = float(rng.uniform(0.0, 1.0))
            got = compute_lambda_s(a, t, 1000, w_val)
            vals = [float(v) for v in a]
            mean = math.fsum(vals) / len(vals)
            assert abs(got - (t / 1000) * (min(mean, min(vals)) + w_val)) <= 1e-12
            assert abs(got - (t / 1000) * (min(vals) + w_val)) <= 1e-12


def test_03_ddim_exact_inverse(sched, rng):
    with criterion(3, "constant-noise inversion then denoising reproduces the input (<= 1e-5)"):
        z0 = LatentSequence(rng.standard_normal((2, 8, 8, 1)), 0)
        pred = ConstantPredictor(0.3)
        top = invert_sequence(z0, pred, sched, 50)[-1]
        back = denoise_sequence(top, pred, sched, 50)[-1]
        assert np.abs(back.frames - z0.frames).max() <= 1e-5


def test_04_closed_form_convergence(sched):
    with criterion(4, "spread-0 predictor terminates exactly on the caption mean (<= 1e-5)"):
        mu = np.random.default_rng(11).uniform(0, 1, (H, W, 1))
        pred = ToyGaussianPredictor({"x": (mu, 0.0)}, sched)
        for seed in (0, 1, 2, 3):
            start = LatentSequence(
                np.random.default_rng(seed).standard_normal((2, H, W, 1)) * 4.0,
                int(sched.denoise_timeline(50)[0]),
            )
            final = denoise_sequence(start, pred, sched, 50, Caption.from_text("x"))[-1]
            assert np.abs(final.frames - mu).max() <= 1e-5


def test_05_dms_disentanglement(sched):
    with criterion(5, "two-instance run hits both means, preserves background, swaps with captions"):
        z0, m1, m2, edits = scene_with_edits()
        pred = gaussian(sched)
        plan = SamplingPlan(cfg_scale=1.0)  # defaults T=50, sns 0.4, l=2
        assert (plan.total_steps, plan.sns_fraction, plan.reinversion_steps) == (50, 0.4, 2)
        final, _ = run_edit(z0, edits, plan, pred, sched)
        recon, _ = run_edit(z0, [], plan, pred, sched)
        sel1 = np.broadcast_to(m1[..., None] > 0, final.frames.shape)
        sel2 = np.broadcast_to(m2[..., None] > 0, final.frames.shape)
        bg = np.broadcast_to((1 - m1 - m2)[..., None] > 0, final.frames.shape)
        assert abs(final.frames[sel1].mean() - 0.9) <= 1e-3
        assert abs(final.frames[sel2].mean() - 0.1) <= 1e-3
        assert np.abs(final.frames - recon.frames)[bg].max() <= 1e-5

        swapped, _ = run_edit(
            z0, scene_with_edits(cap1="a blue cube", cap2="a red ball")[3], plan, pred, sched
        )
        assert np.array_equal(swapped.frames[sel1], np.full(int(sel1.sum()), 0.1))
        assert np.array_equal(swapped.frames[sel2], np.full(int(sel2.sum()), 0.9))


def test_06_sns_branch_independence(sched):
    with criterion(6, "branch latents are bit-identical under changes to the other caption"):
        z0, m1, m2, _ = scene_with_edits()
        frame = z0.frames[0]
        registry = {
            "": (frame, 0.0),
            "a red ball": (np.full((H, W, 1), 0.9), 0.0),
            "a blue cube": (np.full((H, W, 1), 0.1), 0.0),
            "a golden fish": (np.full((H, W, 1), 0.55), 0.0),
        }
        pred = ToyGaussianPredictor(registry, sched)
        plan = SamplingPlan(cfg_scale=1.0)
        traj = InvertedTrajectory(invert_sequence(z0, pred, sched, plan.inversion_steps))
        start = traj.nearest(int(sched.denoise_timeline(50)[0]))
        histories = []
        for cap2 in ("a blue cube", "a golden fish"):
            edits = [
                InstanceEdit(m1, Caption.from_text("a red ball"), "one"),
                InstanceEdit(m2, Caption.from_text(cap2), "two"),
            ]
            hist = []
            run_sns_phase(start, traj, edits, plan, pred, sched,
                          on_step=lambda s, t, bs: hist.append(bs[0].frames))
            histories.append(hist)
        assert len(histories[0]) == plan.n_sns_steps > 0
        for a, b in zip(*histories):
            assert np.array_equal(a, b)


def test_07_ipr_in_situ_confinement(rng):
    with criterion(7, "10% text perturbation changes outside-mask noise by exactly 0 (<= 1e-12)"):
        pred = TinyAttentionPredictor(channels=2, seed=21)
        cap = Caption.from_text("a glowing lantern")
        mask = np.zeros((2, 10, 10))
        mask[:, 2:6, 3:7] = 1
        z = LatentSequence(rng.uniform(0, 1, (2, 10, 10, 2)), 941)
        req = PredictorRequest(latents=z, caption=cap, t=941, instance_mask=mask)
        text_ids = cap.token_ids[1 : 1 + cap.n_text]
        overrides = {tid: 1.1 * pred.value_vector(tid) for tid in text_ids}
        for step_index in range(5):  # every active step at the defaults
            hook = make_ipr_hook(IprConfig(), step_index, 50, 1000)
            base = with_attention_hook(pred, hook).predict(req)
            pert = with_attention_hook(pred.with_value_overrides(overrides), hook).predict(req)
            diff = np.abs(pert - base)
            outside = np.broadcast_to((mask == 0)[..., None], diff.shape)
            assert diff[outside].max() <= 1e-12


def test_08_cia_oracle(rng):
    with criterion(8, "cross-instance accuracy: one-hot, constructed, and monotone-invariant"):
        assert cia_score(np.eye(3)) == 1.0
        assert cia_score(np.array([[0.9, 0.8], [0.85, 0.7]])) == 0.5
        base = rng.uniform(-1, 1, (5, 5))
        reference = cia_score(base)
        for _ in range(100):
            a, b, c = rng.uniform(0.05, 2.0, 3)
            mapped = a * base + b * base**3 + c * np.arctan(base)
            mapped /= np.abs(mapped).max() + 1e-9
            assert cia_score(mapped) == reference


def test_09_ablation_mode_reachability(sched):
    with criterion(9, "pure-series, pure-parallel, and no-re-inversion modes run and differ (> 1e-6)"):
        z0, _, _, edits = scene_with_edits()
        z0 = LatentSequence(np.random.default_rng(7).uniform(0, 1, (N, H, W, 1)), 0)
        pred = TinyAttentionPredictor(channels=1, seed=3)
        outputs, labels = [], []
        for kwargs in (
            dict(sns_fraction=1.0, reinversion_steps=0),
            dict(sns_fraction=0.0),
            dict(reinversion_steps=0),
        ):
            plan = SamplingPlan(cfg_scale=1.0, **kwargs)
            final, report = run_edit(z0, edits, plan, pred, sched)
            assert final.timestep == 0
            outputs.append(final.frames)
            labels.append(report["mode_label"])
        assert labels == ["pure SNS", "pure PNS", "SNS + PNS (no re-inversion)"]
        for i in range(3):
            for j in range(i + 1, 3):
                assert np.abs(outputs[i] - outputs[j]).max() > 1e-6


def test_10_defaults_conformance():
    with criterion(10, "shipped defaults: T=50, guidance 12.5, 10%/40% windows, l=2, 0.5/0.5"):
        snapshot = RunConfig().to_dict()
        expected = {
            "total_steps": 50,
            "cfg_scale": 12.5,
            "ipr_fraction": 0.1,
            "sns_fraction": 0.4,
            "reinversion_steps": 2,
            "lambda": 0.5,
            "lambda_r": 0.5,
            "warmup_fraction": 0.1,
            "inversion_steps": 100,
        }
        for key, value in expected.items():
            assert snapshot[key] == value, f"default {key} is {snapshot[key]}, shipped spec says {value}"
        plan = SamplingPlan()
        assert (plan.total_steps, plan.cfg_scale, plan.sns_fraction, plan.reinversion_steps) == (50, 12.5, 0.4, 2)
        ipr = IprConfig()
        assert (ipr.lambda_, ipr.lambda_r, ipr.warmup_fraction, ipr.ipr_fraction) == (0.5, 0.5, 0.1, 0.1)


def test_11_ssim_reference_agreement(rng):
    with criterion(11, "structural similarity: identity is 1.0, reference agreement <= 1e-6 (20 pairs)"):
        frame = rng.uniform(0, 1, (24, 24))
        assert ssim(frame, frame) == 1.0
        for _ in range(20):
            a = rng.uniform(0, 1, (26, 26))
            b = np.clip(a + rng.normal(0, rng.uniform(0.02, 0.3), a.shape), 0, 1)
            ref = structural_similarity(
                a, b, win_size=11, gaussian_weights=True, sigma=1.5,
                use_sample_covariance=False, data_range=1.0,
            )
            assert abs(ssim(a, b) - ref) <= 1e-6


def test_12_determinism_under_parallelism(tmp_path):
    with criterion(12, "edit command emits byte-identical latents for 1 and 8 worker threads"):
        assert cli_main(["demo", "--out", str(tmp_path / "seed")]) == 0
        scenario = tmp_path / "seed" / "scenario"
        payloads = []
        for threads in ("1", "8"):
            out = tmp_path / f"run{threads}"
            code = cli_main([
                "edit", "--out", str(out), "--threads", threads,
                "--set", f"manifest={scenario / 'manifest.json'}",
                "--set", f"predictor_registry={scenario / 'registry.json'}",
            ])
            assert code == 0
            payloads.append((out / "latents" / "final.f32").read_bytes())
        assert payloads[0] == payloads[1]
        report = json.loads((tmp_path / "run1" / "report.json").read_text())
        assert report["mode_label"] == "full DMS"
