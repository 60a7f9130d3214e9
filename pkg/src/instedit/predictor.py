"""Noise-predictor abstraction and the built-in toy predictors.

Two predictors make the sampling stack exactly verifiable at desk scale:

* :class:`ToyGaussianPredictor` — the closed-form optimal noise estimate
  for Gaussian data, one (mean, spread) pair per caption.  With spread 0
  every denoising run terminates exactly at the caption's mean, which turns
  the whole sampler into a checkable fixed point.
* :class:`TinyAttentionPredictor` — a single real cross-attention layer
  whose post-softmax map can be rewritten by a hook, so attention-level
  manipulation is exercised in situ.

A depth-like control channel is accepted and passed through untouched; the
toy predictors ignore it.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .errors import DataError
from .ipr import CrossAttentionMap, FeatureMask, TokenLayout
from .schedule import LatentSequence, NoiseSchedule

CONTEXT_LENGTH = 16
TOKEN_S = 1 << 16
TOKEN_E = (1 << 16) + 1
TOKEN_PAD = (1 << 16) + 2


def _word_id(word: str) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=2).digest()
    return int.from_bytes(digest, "big")


@dataclass(frozen=True)
class Caption:
    """Whitespace-tokenized caption padded to a fixed context length."""

    text: str
    token_ids: tuple[int, ...]
    n_text: int

    @classmethod
    def from_text(cls, text: str, n_ctx: int = CONTEXT_LENGTH) -> "Caption":
        words = text.lower().split()[: n_ctx - 2]
        ids = [TOKEN_S] + [_word_id(w) for w in words] + [TOKEN_E]
        ids += [TOKEN_PAD] * (n_ctx - len(ids))
        return cls(text=text, token_ids=tuple(ids), n_text=len(words))

    @property
    def is_empty(self) -> bool:
        return self.n_text == 0

    @property
    def n_ctx(self) -> int:
        return len(self.token_ids)

    def layout(self) -> TokenLayout:
        return TokenLayout(n_ctx=self.n_ctx, n_text=self.n_text)


@dataclass(frozen=True)
class PredictorRequest:
    """One prediction call: latents plus conditioning.

    ``instance_mask`` is a per-frame binary pixel mask (N, h, w) used only
    by attention hooks; ``control`` is a per-frame scalar grid (N, h, w)
    carried for backbone adapters and ignored by the toys.
    """

    latents: LatentSequence
    caption: Caption
    t: int
    instance_mask: np.ndarray | None = None
    control: np.ndarray | None = None

    def __post_init__(self):
        n = self.latents.n_frames
        for name in ("instance_mask", "control"):
            grid = getattr(self, name)
            if grid is not None:
                grid = np.asarray(grid)
                if grid.ndim != 3 or grid.shape[0] != n:
                    raise DataError(f"{name} must be (N, h, w) with N={n}, got {grid.shape}")
                object.__setattr__(self, name, grid)


@dataclass(frozen=True)
class AttentionContext:
    """What an attention hook gets to see alongside the map."""

    frame_index: int
    layout: TokenLayout
    mask: FeatureMask | None
    t: int


def predict(predictor, req: PredictorRequest) -> np.ndarray:
    """Dispatch to the predictor; result is latent-shaped predicted noise."""
    return predictor.predict(req)


def with_attention_hook(predictor, hook):
    """Copy of the predictor that routes post-softmax maps through ``hook``."""
    if not hasattr(predictor, "with_hook"):
        raise DataError(f"{type(predictor).__name__} has no attention maps to hook")
    return predictor.with_hook(hook)


@dataclass(frozen=True)
class ConstantPredictor:
    """Predicts a fixed noise value everywhere; the exact-inversion oracle."""

    value: float = 0.0

    def predict(self, req: PredictorRequest) -> np.ndarray:
        return np.full_like(req.latents.frames, self.value)


@dataclass(frozen=True)
class ToyGaussianPredictor:
    """Optimal noise estimate when each caption's data is Gaussian.

    For a caption with mean ``mu`` and spread ``sigma`` the posterior mean
    of the clean latent given z_t is

        E[x0 | z_t] = mu + (sqrt(ab) * sigma^2 / (ab * sigma^2 + 1 - ab))
                      * (z_t - sqrt(ab) * mu)

    and the predicted noise is (z_t - sqrt(ab) * E[x0 | z_t]) / sqrt(1 - ab).
    At t = 0 the latent is already clean and the prediction is defined as 0.
    """

    registry: Mapping[str, tuple[np.ndarray, float]]
    sched: NoiseSchedule

    def _entry(self, caption: Caption) -> tuple[np.ndarray, float]:
        try:
            return self.registry[caption.text]
        except KeyError:
            raise DataError(f"no mean/spread registered for caption {caption.text!r}") from None

    def predict(self, req: PredictorRequest) -> np.ndarray:
        mu, sigma = self._entry(req.caption)
        z = req.latents.frames
        mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), z.shape)
        ab = self.sched.alpha_bar_at(req.t)
        if 1.0 - ab < 1e-15:
            return np.zeros_like(z)
        sqrt_ab = math.sqrt(ab)
        gain = sqrt_ab * sigma**2 / (ab * sigma**2 + 1.0 - ab)
        x0 = mu + gain * (z - sqrt_ab * mu)
        return (z - sqrt_ab * x0) / math.sqrt(1.0 - ab)

    @classmethod
    def from_json(cls, path, sched: NoiseSchedule) -> "ToyGaussianPredictor":
        """Registry file: caption -> {"mu": flat list, "shape": [...], "sigma": s}."""
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        registry = {}
        for caption, entry in raw.items():
            try:
                mu = np.asarray(entry["mu"], dtype=np.float64).reshape(entry["shape"])
                sigma = float(entry["sigma"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"bad registry entry for caption {caption!r}: {exc}") from exc
            if sigma < 0:
                raise DataError(f"sigma must be >= 0 for caption {caption!r}")
            registry[caption] = (mu, sigma)
        return cls(registry=registry, sched=sched)


def _token_vector(seed: int, role: int, token_id: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng((seed, role, token_id))
    return rng.standard_normal(dim) / math.sqrt(dim)


def _box_blur(frame: np.ndarray) -> np.ndarray:
    """3x3 edge-replicated box blur; gives queries a spatial receptive field."""
    h, w = frame.shape[:2]
    padded = np.pad(frame, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(frame)
    for dy in range(3):
        for dx in range(3):
            out += padded[dy : dy + h, dx : dx + w]
    return out / 9.0


@dataclass(frozen=True)
class TinyAttentionPredictor:
    """Minimal noise predictor with one hookable cross-attention layer.

    Queries come from a fixed seeded projection of the latent channels, a
    blurred copy of them (so the prediction at a pixel sees its
    neighbourhood, like any convolutional backbone), and a time feature.
    Keys address tokens by identity (frozen per-id vectors); the caption
    content enters the output only through the per-token value vectors,
    which play the role of text embeddings and can be overridden to probe
    text sensitivity.
    """

    channels: int
    seed: int = 0
    d_k: int = 8
    t_model: int = 1000
    value_overrides: Mapping[int, np.ndarray] = field(default_factory=dict)
    hook: Callable[[CrossAttentionMap, AttentionContext], CrossAttentionMap] | None = None

    def key_vector(self, token_id: int) -> np.ndarray:
        return _token_vector(self.seed, 1, token_id, self.d_k)

    def value_vector(self, token_id: int) -> np.ndarray:
        if token_id in self.value_overrides:
            return np.asarray(self.value_overrides[token_id], dtype=np.float64)
        return _token_vector(self.seed, 2, token_id, self.channels)

    def with_hook(self, hook) -> "TinyAttentionPredictor":
        return replace(self, hook=hook)

    def with_value_overrides(self, overrides: Mapping[int, np.ndarray]) -> "TinyAttentionPredictor":
        merged = dict(self.value_overrides)
        merged.update(overrides)
        return replace(self, value_overrides=merged)

    def _query_projection(self) -> np.ndarray:
        rng = np.random.default_rng((self.seed, 3))
        n_feats = 2 * self.channels + 1
        return rng.standard_normal((self.d_k, n_feats)) / math.sqrt(n_feats)

    def _frame_mask(self, req: PredictorRequest, k: int, shape: tuple[int, int]) -> FeatureMask | None:
        if req.instance_mask is None:
            return None
        mask = req.instance_mask[k]
        if mask.shape != shape:
            from .io import downsample_mask  # deferred: io imports this module's siblings

            return downsample_mask(mask, shape)
        return FeatureMask(mask.astype(bool).ravel(), shape)

    def predict(self, req: PredictorRequest) -> np.ndarray:
        frames = req.latents.frames
        n, h, w, c = frames.shape
        if c != self.channels:
            raise DataError(f"predictor built for {self.channels} channels, latents have {c}")
        layout = req.caption.layout()
        w_q = self._query_projection()
        keys = np.stack([self.key_vector(tid) for tid in req.caption.token_ids])
        values = np.stack([self.value_vector(tid) for tid in req.caption.token_ids])
        if values.shape[1] != c:
            raise DataError("value vector dimension does not match latent channels")

        out = np.empty_like(frames)
        time_feat = req.t / self.t_model
        for k in range(n):
            feats = np.concatenate(
                [
                    frames[k].reshape(h * w, c),
                    _box_blur(frames[k]).reshape(h * w, c),
                    np.full((h * w, 1), time_feat),
                ],
                axis=1,
            )
            logits = (feats @ w_q.T) @ keys.T / math.sqrt(self.d_k)
            logits -= logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            amap = CrossAttentionMap(probs, (h, w))
            if self.hook is not None:
                ctx = AttentionContext(
                    frame_index=k, layout=layout, mask=self._frame_mask(req, k, (h, w)), t=req.t
                )
                amap = self.hook(amap, ctx)
                if not isinstance(amap, CrossAttentionMap) or amap.values.shape != probs.shape:
                    raise DataError("attention hook returned a map of the wrong shape")
            out[k] = (amap.values @ values).reshape(h, w, c)
        return out
