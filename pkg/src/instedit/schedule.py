"""Noise schedule and deterministic DDIM stepping.

The denoising update for a predicted noise ``eps`` is

    z_prev = sqrt(abar_prev) * (z - sqrt(1 - abar) * eps) / sqrt(abar)
             + sqrt(1 - abar_prev) * eps

and, because it is affine in ``z`` for fixed ``eps``, it has an exact
algebraic inverse that encodes a clean latent back into the noise
trajectory.  Classifier-free guidance is the usual affine extrapolation
from the unconditional toward the conditional prediction.

All arithmetic runs in float64; file I/O (see :mod:`instedit.io`) is
float32.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

DEFAULT_T_MODEL = 1000
DEFAULT_BETA_START = 8.5e-4
DEFAULT_BETA_END = 1.2e-2


@dataclass(frozen=True)
class LatentSequence:
    """Per-frame latent grids living at a single timestep.

    ``frames`` has shape (N, h, w, c) with N >= 1; every frame shares one
    shape.  ``timestep`` records where on the schedule the sequence lives.
    """

    frames: np.ndarray
    timestep: int

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 4:
            raise DataError(f"latent frames must be (N, h, w, c), got shape {frames.shape}")
        if frames.shape[0] < 1:
            raise DataError("latent sequence needs at least one frame")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return self.frames.shape[1:]

    def with_frames(self, frames: np.ndarray, timestep: int | None = None) -> "LatentSequence":
        return LatentSequence(frames, self.timestep if timestep is None else timestep)


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative noise coefficients abar_t for t = 0..t_model.

    Invariants: abar_0 == 1 exactly, strictly decreasing, all values in
    (0, 1].
    """

    alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise DataError("alpha_bar must be a 1-D sequence with at least two entries")
        if ab[0] != 1.0:
            raise DataError(f"alpha_bar[0] must be exactly 1.0, got {ab[0]!r}")
        if np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise DataError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0.0):
            raise DataError("alpha_bar must be strictly decreasing")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def t_model(self) -> int:
        return self.alpha_bar.size - 1

    def alpha_bar_at(self, t: int) -> float:
        if not 0 <= t <= self.t_model:
            raise DataError(f"timestep {t} outside schedule range [0, {self.t_model}]")
        return float(self.alpha_bar[t])

    @classmethod
    def linear_beta(
        cls,
        t_model: int = DEFAULT_T_MODEL,
        beta_start: float = DEFAULT_BETA_START,
        beta_end: float = DEFAULT_BETA_END,
    ) -> "NoiseSchedule":
        """Linear beta ramp; abar_t is the running product of (1 - beta)."""
        betas = np.linspace(beta_start, beta_end, t_model, dtype=np.float64)
        ab = np.empty(t_model + 1, dtype=np.float64)
        ab[0] = 1.0
        ab[1:] = np.cumprod(1.0 - betas)
        return cls(ab)

    @classmethod
    def from_table(cls, path) -> "NoiseSchedule":
        """One decimal per line, line index = model timestep, line 0 = 1.0."""
        values = []
        with open(path, "r", encoding="ascii") as fh:
            for lineno, line in enumerate(fh):
                line = line.strip()
                if not line:
                    continue
                try:
                    values.append(float(line))
                except ValueError as exc:
                    raise DataError(f"{path}: line {lineno} is not a decimal value: {line!r}") from exc
        return cls(np.asarray(values))

    def sampling_timesteps(self, n_steps: int) -> np.ndarray:
        """Strictly increasing model timesteps visited by an n-step run.

        Uniform stride over the model schedule; the lowest visited step is
        t=1 so the final denoising step closes the trajectory at abar_0=1.
        """
        if not 1 <= n_steps <= self.t_model:
            raise DataError(f"n_steps must be in [1, {self.t_model}], got {n_steps}")
        stride = self.t_model // n_steps
        return 1 + stride * np.arange(n_steps, dtype=np.int64)

    def denoise_timeline(self, n_steps: int) -> np.ndarray:
        """Descending timesteps a full denoising run walks, ending at 0."""
        ts = self.sampling_timesteps(n_steps)
        return np.concatenate([ts[::-1], [0]])


def _check_step(z: LatentSequence, eps: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z.frames.shape:
        raise DataError(f"eps shape {eps.shape} does not match latents {z.frames.shape}")
    if t < 1:
        raise DataError(f"step requires t >= 1, got {t}")
    if not 0 <= t_prev < t:
        raise DataError(f"need 0 <= t_prev < t, got t_prev={t_prev}, t={t}")
    sched.alpha_bar_at(t)
    return eps


def ddim_denoise_step(
    z_t: LatentSequence,
    eps: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    t_prev: int | None = None,
) -> LatentSequence:
    """One deterministic denoising step t -> t_prev (default t-1)."""
    t_prev = t - 1 if t_prev is None else t_prev
    eps = _check_step(z_t, eps, t, t_prev, sched)
    if z_t.timestep != t:
        raise DataError(f"latents are at timestep {z_t.timestep}, step expects {t}")
    ab_t = sched.alpha_bar_at(t)
    ab_prev = sched.alpha_bar_at(t_prev)
    x0 = (z_t.frames - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    frames = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
    return LatentSequence(frames, t_prev)


def ddim_invert_step(
    z_prev: LatentSequence,
    eps: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    t_prev: int | None = None,
) -> LatentSequence:
    """Exact algebraic inverse of :func:`ddim_denoise_step` for fixed eps."""
    t_prev = t - 1 if t_prev is None else t_prev
    eps = _check_step(z_prev, eps, t, t_prev, sched)
    if z_prev.timestep != t_prev:
        raise DataError(f"latents are at timestep {z_prev.timestep}, inversion expects {t_prev}")
    ab_t = sched.alpha_bar_at(t)
    ab_prev = sched.alpha_bar_at(t_prev)
    x0 = (z_prev.frames - math.sqrt(1.0 - ab_prev) * eps) / math.sqrt(ab_prev)
    frames = math.sqrt(ab_t) * x0 + math.sqrt(1.0 - ab_t) * eps
    return LatentSequence(frames, t)


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    """eps_uncond + scale * (eps_cond - eps_uncond), exact at scale 0 and 1."""
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    if eps_uncond.shape != eps_cond.shape:
        raise DataError(f"guidance shapes differ: {eps_uncond.shape} vs {eps_cond.shape}")
    if scale < 0:
        raise DataError(f"guidance scale must be >= 0, got {scale}")
    if scale == 0.0:
        return eps_uncond.copy()
    if scale == 1.0:
        return eps_cond.copy()
    return eps_uncond + scale * (eps_cond - eps_uncond)


def invert_sequence(z_0: LatentSequence, predictor, sched: NoiseSchedule, n_steps: int) -> list[LatentSequence]:
    """Encode a clean latent sequence into its noise trajectory.

    Runs the inversion with the empty caption at guidance scale 1 and
    returns one latent sequence per visited timestep; entry 0 is the input
    itself.  The noise for the step t_prev -> t is predicted at t_prev.
    """
    from .predictor import Caption, PredictorRequest  # deferred: predictor imports this module

    if z_0.timestep != 0:
        raise DataError(f"inversion starts from timestep 0, latents are at {z_0.timestep}")
    if n_steps == 0:
        return [z_0]
    empty = Caption.from_text("")
    timesteps = sched.sampling_timesteps(n_steps)
    out = [z_0]
    t_prev = 0
    for t in timesteps:
        z = out[-1]
        eps = predictor.predict(PredictorRequest(latents=z, caption=empty, t=t_prev))
        out.append(ddim_invert_step(z, eps, int(t), sched, t_prev=t_prev))
        t_prev = int(t)
    return out


def denoise_sequence(
    z_top: LatentSequence,
    predictor,
    sched: NoiseSchedule,
    n_steps: int,
    caption=None,
    cfg_scale: float = 1.0,
) -> list[LatentSequence]:
    """Plain denoising loop; the reconstruction path when caption is empty.

    The noise at each step is predicted on the current latents; guidance
    above 1 adds a second, unconditional prediction per step.
    """
    from .predictor import Caption, PredictorRequest

    caption = Caption.from_text("") if caption is None else caption
    timeline = sched.denoise_timeline(n_steps)
    if z_top.timestep != timeline[0]:
        raise DataError(f"denoising starts at timestep {timeline[0]}, latents are at {z_top.timestep}")
    empty = Caption.from_text("")
    out = [z_top]
    for t, t_prev in zip(timeline[:-1], timeline[1:]):
        z = out[-1]
        eps_cond = predictor.predict(PredictorRequest(latents=z, caption=caption, t=int(t)))
        if cfg_scale == 1.0:
            eps = eps_cond
        else:
            eps_uncond = predictor.predict(PredictorRequest(latents=z, caption=empty, t=int(t)))
            eps = cfg_combine(eps_uncond, eps_cond, cfg_scale)
        out.append(ddim_denoise_step(z, eps, int(t), sched, t_prev=int(t_prev)))
    return out
