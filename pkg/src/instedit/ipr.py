"""Instance-centric probability redistribution on cross-attention maps.

A post-softmax cross-attention map is row-stochastic over the caption
context (start token S, text tokens T, end token E, padding P).  To confine
an instance edit to its mask, rows outside the mask have their T and E mass
zeroed and reallocated to S, while rows inside the mask move an amount
lambda_S from S to the T and E columns:

    lambda_S = (t / T_model) * (min(mean(a_IS), min(a_IS)) + W)

with a_IS the S column over inside-mask rows and W a warm-up value that
decays linearly from ``lam`` to 0 over the first ``warmup_fraction`` of the
sampling steps.  lambda_S is split lambda_r : (1 - lambda_r) between the T
columns (evenly) and E.  Padding columns are never touched, and a per-row
clamp keeps every entry non-negative while preserving row sums.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DataError

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class TokenLayout:
    """Column roles of a tokenized caption context.

    S sits at column 0, the text columns follow, E comes right after the
    last text column, and padding fills the rest.  Captions without text
    tokens (the empty caption) are representable but cannot be targets of
    the inside redistribution rule.
    """

    n_ctx: int
    n_text: int

    def __post_init__(self):
        if self.n_text < 0:
            raise DataError("n_text must be >= 0")
        if self.n_ctx < self.n_text + 2:
            raise DataError(f"n_ctx={self.n_ctx} too small for {self.n_text} text tokens plus S and E")

    @property
    def index_S(self) -> int:
        return 0

    @property
    def indices_T(self) -> tuple[int, ...]:
        return tuple(range(1, 1 + self.n_text))

    @property
    def index_E(self) -> int:
        return 1 + self.n_text

    @property
    def indices_P(self) -> tuple[int, ...]:
        return tuple(range(2 + self.n_text, self.n_ctx))


@dataclass(frozen=True)
class CrossAttentionMap:
    """Row-stochastic attention probabilities, hw rows by n_ctx columns."""

    values: np.ndarray = field(repr=False)
    feature_shape: tuple[int, int]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        h, w = self.feature_shape
        if values.ndim != 2 or values.shape[0] != h * w:
            raise DataError(f"map must have {h * w} rows for feature shape {self.feature_shape}, got {values.shape}")
        if np.any(values < 0.0) or np.any(values > 1.0 + ROW_SUM_TOL):
            raise DataError("attention probabilities must lie in [0, 1]")
        sums = values.sum(axis=1)
        worst = float(np.abs(sums - 1.0).max()) if sums.size else 0.0
        if worst > ROW_SUM_TOL:
            raise DataError(f"attention rows must sum to 1 within {ROW_SUM_TOL}, worst deviation {worst:.3e}")
        object.__setattr__(self, "values", values)

    @property
    def n_ctx(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FeatureMask:
    """Boolean row selector aligned to a CrossAttentionMap's feature grid."""

    bits: np.ndarray = field(repr=False)
    feature_shape: tuple[int, int]

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool).ravel()
        h, w = self.feature_shape
        if bits.size != h * w:
            raise DataError(f"mask has {bits.size} bits, feature grid {self.feature_shape} needs {h * w}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def any_inside(self) -> bool:
        return bool(self.bits.any())


@dataclass(frozen=True)
class IprConfig:
    """Redistribution strengths and the step windows they act over.

    ``lambda_`` is the warm-up magnitude, ``lambda_r`` the text/E split,
    ``warmup_fraction`` the share of sampling steps the warm-up decays
    over, and ``ipr_fraction`` the share of sampling steps the rewrite is
    active for.
    """

    lambda_: float = 0.5
    lambda_r: float = 0.5
    warmup_fraction: float = 0.1
    ipr_fraction: float = 0.1

    def __post_init__(self):
        for name in ("lambda_", "lambda_r", "warmup_fraction", "ipr_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name} must lie in [0, 1], got {v}")


def _window(fraction: float, total_steps: int) -> float:
    # round kills float noise like 0.1 * 30 = 3.0000000000000004
    return round(fraction * total_steps, 12)


def warmup_value(step_index: int, total_steps: int, cfg: IprConfig) -> float:
    """Linear decay from lambda_ at step 0 to 0 at the end of the warm-up window."""
    if not 0 <= step_index < total_steps:
        raise DataError(f"step_index {step_index} outside [0, {total_steps})")
    span = _window(cfg.warmup_fraction, total_steps)
    if span <= 0.0:
        return 0.0
    return cfg.lambda_ * max(0.0, 1.0 - step_index / span)


def compute_lambda_s(a_IS: Sequence[float] | np.ndarray, t: int, t_model: int, w: float) -> float:
    """Amount of S mass to redistribute inside the mask at timestep t.

    An empty inside-mask region means the instance is absent from the frame
    at this resolution; the redistribution amount is then 0.
    """
    a = np.asarray(a_IS, dtype=np.float64)
    if a.size == 0:
        return 0.0
    if np.any(a < 0.0) or np.any(a > 1.0):
        raise DataError("S-column probabilities must lie in [0, 1]")
    return (t / t_model) * (min(float(a.mean()), float(a.min())) + w)


def redistribute_row_outside(row: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """Zero the T and E entries and hand their mass to S; padding untouched."""
    row = np.asarray(row, dtype=np.float64)
    out = row.copy()
    te = list(layout.indices_T) + [layout.index_E]
    moved = out[te].sum()
    out[te] = 0.0
    out[layout.index_S] += moved
    return out


def redistribute_row_inside(row: np.ndarray, layout: TokenLayout, lambda_s: float, lambda_r: float) -> np.ndarray:
    """Move min(lambda_s, row[S]) from S onto the T and E entries.

    The clamp keeps S non-negative; the moved amount is split
    lambda_r : (1 - lambda_r) between the text columns (evenly) and E.
    """
    if lambda_s < 0:
        raise DataError(f"lambda_s must be >= 0, got {lambda_s}")
    if layout.n_text < 1:
        raise DataError("inside redistribution needs at least one text token")
    row = np.asarray(row, dtype=np.float64)
    out = row.copy()
    delta = min(lambda_s, out[layout.index_S])
    out[layout.index_S] -= delta
    out[list(layout.indices_T)] += delta * lambda_r / layout.n_text
    out[layout.index_E] += delta * (1.0 - lambda_r)
    return out


def ipr_active(cfg: IprConfig, step_index: int, total_steps: int) -> bool:
    return step_index < _window(cfg.ipr_fraction, total_steps)


def apply_ipr(
    amap: CrossAttentionMap,
    mask: FeatureMask,
    layout: TokenLayout,
    cfg: IprConfig,
    step_index: int,
    total_steps: int,
    t: int,
    t_model: int,
    on_lambda: Callable[[float], None] | None = None,
) -> CrossAttentionMap:
    """Rewrite a full map: outside rows confine, inside rows strengthen.

    Outside the active step window the input is returned unchanged.
    lambda_S is computed once per map from the inside-mask S column.
    """
    if mask.feature_shape != amap.feature_shape:
        raise DataError(f"mask grid {mask.feature_shape} does not match map grid {amap.feature_shape}")
    if layout.n_ctx != amap.n_ctx:
        raise DataError(f"layout context {layout.n_ctx} does not match map columns {amap.n_ctx}")
    if not ipr_active(cfg, step_index, total_steps):
        return amap

    values = amap.values.copy()
    inside = mask.bits
    outside = ~inside
    te = list(layout.indices_T) + [layout.index_E]

    if outside.any():
        moved = values[np.ix_(outside, te)].sum(axis=1)
        values[outside, layout.index_S] += moved
        values[np.ix_(outside, te)] = 0.0

    a_is = amap.values[inside, layout.index_S]
    w = warmup_value(step_index, total_steps, cfg)
    lam_s = compute_lambda_s(a_is, t, t_model, w)
    if on_lambda is not None:
        on_lambda(lam_s)
    if inside.any() and lam_s > 0.0:
        if layout.n_text < 1:
            raise DataError("inside redistribution needs at least one text token")
        delta = np.minimum(lam_s, values[inside, layout.index_S])
        values[inside, layout.index_S] -= delta
        values[np.ix_(inside, list(layout.indices_T))] += (delta * cfg.lambda_r / layout.n_text)[:, None]
        values[inside, layout.index_E] += delta * (1.0 - cfg.lambda_r)

    return CrossAttentionMap(values, amap.feature_shape)


def make_ipr_hook(
    cfg: IprConfig,
    step_index: int,
    total_steps: int,
    t_model: int,
    on_lambda: Callable[[int, float], None] | None = None,
):
    """Attention hook wiring :func:`apply_ipr` into a predictor.

    The returned callable takes (map, ctx) where ctx carries the frame
    index, token layout, feature mask, and timestep (see
    :class:`instedit.predictor.AttentionContext`).  Maps without a mask
    pass through unchanged.
    """

    def hook(amap: CrossAttentionMap, ctx) -> CrossAttentionMap:
        if ctx.mask is None:
            return amap
        cb = None
        if on_lambda is not None:
            cb = lambda lam: on_lambda(ctx.frame_index, lam)
        return apply_ipr(amap, ctx.mask, ctx.layout, cfg, step_index, total_steps, ctx.t, t_model, on_lambda=cb)

    return hook
