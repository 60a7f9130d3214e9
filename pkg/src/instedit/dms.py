"""Disentangled multi-instance sampling.

Each instance edit denoises on its own branch first (series phase): the
branch noise is the guided conditional prediction inside the instance mask
and the reconstruction noise, predicted on the stored inverted latent with
the empty caption, everywhere else.  The branches are then mask-fused with
the inverted background latent, re-inverted a few steps to harmonize the
seams, and the remaining steps run on the single fused latent (parallel
phase) with the per-instance noises mask-combined at every step.

Because the background always receives the reconstruction noise, the region
outside every mask contractually tracks the pure-reconstruction run.
"""
from __future__ import annotations

import bisect
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .ipr import IprConfig, make_ipr_hook
from .predictor import Caption, PredictorRequest
from .schedule import (
    LatentSequence,
    NoiseSchedule,
    cfg_combine,
    ddim_denoise_step,
    ddim_invert_step,
    denoise_sequence,
    invert_sequence,
)

BACKGROUND_KEY = "__background__"


@dataclass(frozen=True)
class InstanceEdit:
    """One instance's target: per-frame binary masks plus its edit caption."""

    masks: np.ndarray
    caption: Caption
    instance_id: str

    def __post_init__(self):
        masks = np.asarray(self.masks)
        if masks.ndim != 3:
            raise DataError(f"instance {self.instance_id!r}: masks must be (N, h, w), got {masks.shape}")
        if not np.isin(masks, (0, 1)).all():
            raise DataError(f"instance {self.instance_id!r}: masks must be binary")
        if self.caption.n_text < 1:
            raise DataError(f"instance {self.instance_id!r}: edit caption must contain text")
        object.__setattr__(self, "masks", masks.astype(np.float64))


@dataclass(frozen=True)
class SamplingPlan:
    """Step counts, phase fractions, and guidance for one editing run."""

    total_steps: int = 50
    sns_fraction: float = 0.4
    reinversion_steps: int = 2
    cfg_scale: float = 12.5
    inversion_steps: int = 100
    ipr: IprConfig | None = field(default_factory=IprConfig)
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise DataError("total_steps must be >= 1")
        if not 0.0 <= self.sns_fraction <= 1.0:
            raise DataError("sns_fraction must lie in [0, 1]")
        if self.reinversion_steps < 0:
            raise DataError("reinversion_steps must be >= 0")
        if self.cfg_scale < 0:
            raise DataError("cfg_scale must be >= 0")
        if self.inversion_steps < 0:
            raise DataError("inversion_steps must be >= 0")

    @property
    def n_sns_steps(self) -> int:
        return int(math.ceil(round(self.sns_fraction * self.total_steps, 12)))

    def mode_label(self) -> str:
        if self.n_sns_steps == 0:
            return "pure PNS"
        if self.n_sns_steps == self.total_steps and self.reinversion_steps == 0:
            return "pure SNS"
        if self.reinversion_steps == 0:
            return "SNS + PNS (no re-inversion)"
        return "full DMS"


class InvertedTrajectory:
    """Inverted latents keyed by timestep with nearest-timestep lookup."""

    def __init__(self, latents: list[LatentSequence]):
        if not latents:
            raise DataError("trajectory needs at least one latent sequence")
        by_t = {z.timestep: z for z in latents}
        self._timesteps = sorted(by_t)
        self._latents = by_t

    @property
    def timesteps(self) -> list[int]:
        return list(self._timesteps)

    def nearest(self, t: int) -> LatentSequence:
        """Stored latents closest to t, restamped at t (ties pick the lower)."""
        ts = self._timesteps
        i = bisect.bisect_left(ts, t)
        if i == 0:
            best = ts[0]
        elif i == len(ts):
            best = ts[-1]
        else:
            best = ts[i - 1] if t - ts[i - 1] <= ts[i] - t else ts[i]
        z = self._latents[best]
        return z if z.timestep == t else LatentSequence(z.frames, t)


def background_mask(edits: list[InstanceEdit], shape: tuple[int, int, int]) -> np.ndarray:
    """Complement of the union of instance masks; rejects overlaps loudly."""
    n, h, w = shape
    if not edits:
        return np.ones((n, h, w), dtype=np.float64)
    total = np.zeros((n, h, w), dtype=np.float64)
    for edit in edits:
        if edit.masks.shape != (n, h, w):
            raise DataError(
                f"instance {edit.instance_id!r}: masks {edit.masks.shape} do not match frames {(n, h, w)}"
            )
        total += edit.masks
    if np.any(total > 1.0):
        frames = sorted(int(k) for k in np.unique(np.nonzero(total > 1.0)[0]))
        offenders = sorted(
            e.instance_id for e in edits if np.any(e.masks[total > 1.0] > 0)
        )
        raise DataError(f"instance masks overlap: instances {offenders} on frames {frames}")
    return 1.0 - total


def _reconstruction_noise(trajectory: InvertedTrajectory, predictor, t: int) -> np.ndarray:
    z_tilde = trajectory.nearest(t)
    req = PredictorRequest(latents=z_tilde, caption=Caption.from_text(""), t=t)
    return predictor.predict(req)


def _conditional_predictor(predictor, plan: SamplingPlan, step_index: int, t_model: int, on_lambda=None):
    """Attach the redistribution hook when the predictor exposes attention."""
    if plan.ipr is None or not hasattr(predictor, "with_hook"):
        return predictor
    hook = make_ipr_hook(plan.ipr, step_index, plan.total_steps, t_model, on_lambda=on_lambda)
    return predictor.with_hook(hook)


def _instance_noise(
    z: LatentSequence,
    edit: InstanceEdit,
    plan: SamplingPlan,
    predictor,
    t: int,
    step_index: int,
    t_model: int,
    control=None,
    on_lambda=None,
    eps_uncond: np.ndarray | None = None,
) -> np.ndarray:
    """Guided conditional noise for one instance, hook active per plan."""
    cond = _conditional_predictor(predictor, plan, step_index, t_model, on_lambda=on_lambda)
    eps_cond = cond.predict(
        PredictorRequest(latents=z, caption=edit.caption, t=t, instance_mask=edit.masks, control=control)
    )
    if plan.cfg_scale == 1.0:
        return eps_cond
    if eps_uncond is None:
        eps_uncond = predictor.predict(PredictorRequest(latents=z, caption=Caption.from_text(""), t=t))
    return cfg_combine(eps_uncond, eps_cond, plan.cfg_scale)


def sns_step(
    branch: LatentSequence,
    trajectory: InvertedTrajectory,
    edit: InstanceEdit,
    plan: SamplingPlan,
    predictor,
    sched: NoiseSchedule,
    t: int,
    t_next: int,
    step_index: int,
    *,
    control=None,
    background_noise: np.ndarray | None = None,
    on_lambda=None,
) -> LatentSequence:
    """One branch step: guided noise inside the mask, reconstruction outside."""
    if branch.timestep != t:
        raise DataError(f"branch is at timestep {branch.timestep}, step expects {t}")
    if background_noise is None:
        background_noise = _reconstruction_noise(trajectory, predictor, t)
    n_hat = _instance_noise(
        branch, edit, plan, predictor, t, step_index, sched.t_model, control=control, on_lambda=on_lambda
    )
    m = edit.masks[..., None]
    fused_noise = n_hat * m + background_noise * (1.0 - m)
    return ddim_denoise_step(branch, fused_noise, t, sched, t_prev=t_next)


def latent_fusion(
    branches: list[LatentSequence],
    trajectory: InvertedTrajectory,
    edits: list[InstanceEdit],
    t: int,
) -> LatentSequence:
    """Mask-weighted merge of branch latents over the inverted background."""
    if len(branches) != len(edits):
        raise DataError(f"{len(branches)} branches for {len(edits)} edits")
    for branch in branches:
        if branch.timestep != t:
            raise DataError(f"branch at timestep {branch.timestep} cannot fuse at {t}")
    z_tilde = trajectory.nearest(t)
    shape = z_tilde.frames.shape
    m_b = background_mask(edits, shape[:3])
    fused = z_tilde.frames * m_b[..., None]
    for branch, edit in zip(branches, edits):
        fused = fused + branch.frames * edit.masks[..., None]
    return LatentSequence(fused, t)


def reinvert(
    fused: LatentSequence,
    predictor,
    sched: NoiseSchedule,
    l: int,
    n_steps: int,
) -> LatentSequence:
    """Walk the fused latent l sampling steps back up the noise trajectory.

    Runs with the empty caption at guidance scale 1, matching the initial
    inversion; no attention rewrite is active.
    """
    if l == 0:
        return fused
    grid = sched.sampling_timesteps(n_steps)
    pos = int(np.searchsorted(grid, fused.timestep, side="right"))
    if pos + l > grid.size:
        raise DataError(
            f"re-inversion of {l} steps from timestep {fused.timestep} overflows the {n_steps}-step grid"
        )
    empty = Caption.from_text("")
    z = fused
    for i in range(l):
        t_target = int(grid[pos + i])
        eps = predictor.predict(PredictorRequest(latents=z, caption=empty, t=z.timestep))
        z = ddim_invert_step(z, eps, t_target, sched, t_prev=z.timestep)
    return z


def pns_step(
    z: LatentSequence,
    trajectory: InvertedTrajectory,
    edits: list[InstanceEdit],
    plan: SamplingPlan,
    predictor,
    sched: NoiseSchedule,
    t: int,
    t_next: int,
    step_index: int,
    *,
    control=None,
    threads: int = 1,
    lambda_callbacks: dict | None = None,
    capture: dict | None = None,
) -> LatentSequence:
    """One shared-latent step with per-instance noises mask-combined."""
    if z.timestep != t:
        raise DataError(f"latents are at timestep {z.timestep}, step expects {t}")
    background_noise = _reconstruction_noise(trajectory, predictor, t)
    eps_uncond = None
    if plan.cfg_scale != 1.0 and edits:
        eps_uncond = predictor.predict(PredictorRequest(latents=z, caption=Caption.from_text(""), t=t))

    def one(edit: InstanceEdit) -> np.ndarray:
        cb = lambda_callbacks.get(edit.instance_id) if lambda_callbacks else None
        return _instance_noise(
            z, edit, plan, predictor, t, step_index, sched.t_model,
            control=control, on_lambda=cb, eps_uncond=eps_uncond,
        )

    if threads > 1 and len(edits) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            noises = list(pool.map(one, edits))
    else:
        noises = [one(edit) for edit in edits]

    m_b = background_mask(edits, z.frames.shape[:3])
    combined = background_noise * m_b[..., None]
    for noise, edit in zip(noises, edits):
        combined = combined + noise * edit.masks[..., None]
    if capture is not None:
        capture["instance_noises"] = {e.instance_id: n for e, n in zip(edits, noises)}
        capture["background_noise"] = background_noise
        capture["combined"] = combined
    return ddim_denoise_step(z, combined, t, sched, t_prev=t_next)


def run_sns_phase(
    z_start: LatentSequence,
    trajectory: InvertedTrajectory,
    edits: list[InstanceEdit],
    plan: SamplingPlan,
    predictor,
    sched: NoiseSchedule,
    *,
    control=None,
    threads: int = 1,
    lambda_callbacks: dict | None = None,
    on_step=None,
) -> list[LatentSequence]:
    """Run every instance branch through the series phase.

    Branches share no state: branch i never sees another instance's caption
    or mask, so its latents are invariant under changes to the other edits.
    """
    timeline = sched.denoise_timeline(plan.total_steps)
    branches = [z_start for _ in edits]
    n_sns = plan.n_sns_steps

    def one(args) -> LatentSequence:
        branch, edit, t, t_next, s, bg = args
        cb = lambda_callbacks.get(edit.instance_id) if lambda_callbacks else None
        return sns_step(
            branch, trajectory, edit, plan, predictor, sched, t, t_next, s,
            control=control, background_noise=bg, on_lambda=cb,
        )

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 and len(edits) > 1 else None
    try:
        for s in range(n_sns):
            t, t_next = int(timeline[s]), int(timeline[s + 1])
            bg = _reconstruction_noise(trajectory, predictor, t)
            jobs = [(branches[i], edits[i], t, t_next, s, bg) for i in range(len(edits))]
            branches = list(pool.map(one, jobs)) if pool else [one(j) for j in jobs]
            if on_step is not None:
                on_step(s, t_next, branches)
    finally:
        if pool:
            pool.shutdown()
    return branches


def _region_means(frames: np.ndarray, edits: list[InstanceEdit], m_b: np.ndarray) -> dict[str, float]:
    means = {}
    for edit in edits:
        sel = edit.masks[..., None] > 0
        sel = np.broadcast_to(sel, frames.shape)
        means[edit.instance_id] = float(frames[sel].mean()) if sel.any() else float("nan")
    bg = np.broadcast_to(m_b[..., None] > 0, frames.shape)
    means[BACKGROUND_KEY] = float(frames[bg].mean()) if bg.any() else float("nan")
    return means


def run_edit(
    z_0: LatentSequence,
    edits: list[InstanceEdit],
    plan: SamplingPlan,
    predictor,
    sched: NoiseSchedule,
    *,
    control=None,
    threads: int = 1,
) -> tuple[LatentSequence, dict]:
    """Full pipeline: invert, branch, fuse, re-invert, harmonize.

    Returns the edited latents at step 0 plus a run report with per-phase
    step ranges, wall-clock timings, per-instance redistribution traces, and
    per-step region means.
    """
    shape = z_0.frames.shape
    m_b = background_mask(edits, shape[:3])
    timeline = sched.denoise_timeline(plan.total_steps)

    phases: list[dict] = []
    region_trace: list[dict] = []
    lambda_traces: dict[str, list] = {e.instance_id: [] for e in edits}

    def trace_step(step_index: int, timestep: int, phase: str, frames: np.ndarray) -> None:
        region_trace.append(
            {
                "step": int(step_index),
                "timestep": int(timestep),
                "phase": phase,
                "means": _region_means(frames, edits, m_b),
            }
        )

    clock = time.perf_counter
    t_start = clock()
    trajectory = InvertedTrajectory(invert_sequence(z_0, predictor, sched, plan.inversion_steps))
    inversion_time = clock() - t_start
    phases.append(
        {
            "name": "inversion",
            "steps": plan.inversion_steps,
            "timesteps": [trajectory.timesteps[0], trajectory.timesteps[-1]],
        }
    )

    start = trajectory.nearest(int(timeline[0]))
    trace_step(-1, start.timestep, "start", start.frames)

    timings = {"inversion": inversion_time}
    if not edits:
        # zero edits: every pixel is background, so the run is the pipeline's
        # reconstruction path itself (noise predicted on the stored inverted
        # latents) rather than a free-running denoise
        z = start
        t0 = clock()
        for s in range(plan.total_steps):
            t, t_next = int(timeline[s]), int(timeline[s + 1])
            z = pns_step(z, trajectory, [], plan, predictor, sched, t, t_next, s, control=control)
            trace_step(s, t_next, "reconstruction", z.frames)
        timings["reconstruction"] = clock() - t0
        phases.append({"name": "reconstruction", "steps": plan.total_steps, "timesteps": [int(timeline[0]), 0]})
        final = z
    else:
        n_sns = plan.n_sns_steps
        step_box = {"s": 0}

        def make_lambda_cb(trace: list):
            def cb(frame: int, lam: float) -> None:
                trace.append({"step": step_box["s"], "frame": int(frame), "lambda_s": float(lam)})

            return cb

        lambda_callbacks = {iid: make_lambda_cb(trace) for iid, trace in lambda_traces.items()}

        def on_sns_step(s: int, t_next: int, branches: list[LatentSequence]) -> None:
            trace_step(s, t_next, "sns", latent_fusion(branches, trajectory, edits, t_next).frames)
            step_box["s"] = s + 1

        t0 = clock()
        branches = run_sns_phase(
            start, trajectory, edits, plan, predictor, sched,
            control=control, threads=threads, lambda_callbacks=lambda_callbacks,
            on_step=on_sns_step,
        )
        timings["sns"] = clock() - t0
        if n_sns:
            phases.append(
                {"name": "sns", "steps": n_sns, "timesteps": [int(timeline[0]), int(timeline[n_sns])]}
            )

        t_fuse = int(timeline[n_sns])
        t0 = clock()
        fused = latent_fusion(branches, trajectory, edits, t_fuse)
        timings["fusion"] = clock() - t0
        phases.append({"name": "fusion", "steps": 0, "timesteps": [t_fuse, t_fuse]})

        # clamp to the grid headroom created by the series phase so the
        # pure-parallel configuration still runs
        l_eff = min(plan.reinversion_steps, n_sns)
        t0 = clock()
        z = reinvert(fused, predictor, sched, l_eff, plan.total_steps)
        timings["reinversion"] = clock() - t0
        if l_eff:
            phases.append({"name": "reinversion", "steps": l_eff, "timesteps": [t_fuse, z.timestep]})

        s_resume = n_sns - l_eff
        t0 = clock()
        for s in range(s_resume, plan.total_steps):
            step_box["s"] = s
            t, t_next = int(timeline[s]), int(timeline[s + 1])
            z = pns_step(
                z, trajectory, edits, plan, predictor, sched, t, t_next, s,
                control=control, threads=threads, lambda_callbacks=lambda_callbacks,
            )
            trace_step(s, t_next, "pns", z.frames)
        timings["pns"] = clock() - t0
        if s_resume < plan.total_steps:
            phases.append(
                {
                    "name": "pns",
                    "steps": plan.total_steps - s_resume,
                    "timesteps": [int(timeline[s_resume]), 0],
                }
            )
        final = z

    for trace in lambda_traces.values():
        trace.sort(key=lambda row: (row["step"], row["frame"]))

    report = {
        "mode_label": plan.mode_label(),
        "total_steps": plan.total_steps,
        "sns_steps": plan.n_sns_steps if edits else 0,
        "reinversion_steps_effective": (min(plan.reinversion_steps, plan.n_sns_steps) if edits else 0),
        "instances": [e.instance_id for e in edits],
        "phases": phases,
        "lambda_s_traces": lambda_traces,
        "region_trace": region_trace,
        "timing": timings,
    }
    return final, report
