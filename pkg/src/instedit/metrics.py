"""Instance-level and global evaluation scores.

Image/text similarity runs through an embedding provider (two built-ins: a
hashed bag-of-words / channel-histogram toy, and a file-backed provider for
precomputed vectors).  Instance scores work on square zero-padded crops cut
from each mask's bounding box.  The cross-instance accuracy score binarizes
the instance-vs-caption similarity matrix by row argmax and averages the
diagonal, so it counts how many instances align best with their own caption
rather than a neighbour's.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DataError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


# ---------------------------------------------------------------------------
# embedding providers


def _unit(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise DataError("cannot normalize a zero embedding vector")
    return vec / norm


@dataclass(frozen=True)
class ToyEmbeddingProvider:
    """Deterministic stand-in embeddings: bag-of-words text, histogram images."""

    dim: int = 64
    bins_per_channel: int = 16

    def embed_text(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        words = text.lower().split()
        if not words:
            vec[0] = 1.0
            return vec
        for word in words:
            digest = hashlib.blake2b(word.encode("utf-8"), digest_size=4).digest()
            vec[int.from_bytes(digest, "big") % self.dim] += 1.0
        return _unit(vec)

    def embed_image(self, image: np.ndarray, key: str | None = None) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            image = image[:, :, None]
        channels = image.shape[2]
        if channels * self.bins_per_channel > self.dim:
            raise DataError(f"image with {channels} channels exceeds provider dimension {self.dim}")
        vec = np.zeros(self.dim)
        for c in range(channels):
            hist, _ = np.histogram(np.clip(image[:, :, c], 0.0, 1.0), bins=self.bins_per_channel, range=(0.0, 1.0))
            vec[c * self.bins_per_channel : (c + 1) * self.bins_per_channel] = hist
        return _unit(vec)


class FileEmbeddingProvider:
    """Precomputed vectors: float32 little-endian rows plus a JSON sidecar.

    The sidecar holds {"dim": d, "count": n, "ids": [...]}; ids follow the
    ``text:<caption>``, ``crop:<instance>:<frame>``, ``frame:<index>``
    convention the metrics pipeline uses as lookup keys.
    """

    def __init__(self, vectors: np.ndarray, ids: list[str]):
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise DataError("embedding table shape does not match id list")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms == 0.0):
            raise DataError("embedding table contains a zero vector")
        self._vectors = vectors / norms[:, None]
        self._index = {i: k for k, i in enumerate(ids)}

    @classmethod
    def from_files(cls, data_path) -> "FileEmbeddingProvider":
        data_path = Path(data_path)
        sidecar = Path(str(data_path) + ".json")
        if not sidecar.exists():
            raise DataError(f"missing embedding sidecar {sidecar}")
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        dim, count, ids = int(meta["dim"]), int(meta["count"]), list(meta["ids"])
        if len(ids) != count:
            raise DataError(f"{sidecar}: {len(ids)} ids for count {count}")
        raw = np.frombuffer(data_path.read_bytes(), dtype="<f4")
        if raw.size != dim * count:
            raise DataError(f"{data_path}: expected {dim * count} floats, found {raw.size}")
        return cls(raw.reshape(count, dim).astype(np.float64), ids)

    def _lookup(self, key: str) -> np.ndarray:
        if key not in self._index:
            raise DataError(f"no precomputed embedding for id {key!r}")
        return self._vectors[self._index[key]]

    def embed_text(self, text: str) -> np.ndarray:
        return self._lookup(f"text:{text}")

    def embed_image(self, image: np.ndarray, key: str | None = None) -> np.ndarray:
        if key is None:
            raise DataError("file-backed provider needs an image key")
        return self._lookup(key)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        raise DataError("cosine of a zero vector is undefined")
    return float(np.dot(a, b) / denom)


# ---------------------------------------------------------------------------
# instance crops


@dataclass(frozen=True)
class InstanceCrop:
    """Square zero-padded cutout of one instance in one frame."""

    pixels: np.ndarray = field(repr=False)
    frame_index: int
    instance_id: str
    bbox: tuple[int, int, int, int]

    @property
    def key(self) -> str:
        return f"crop:{self.instance_id}:{self.frame_index}"


def crop_instance(frame: np.ndarray, mask: np.ndarray, *, frame_index: int = 0, instance_id: str = "") -> InstanceCrop:
    """Tight bounding-box crop, padded to square with centered content."""
    frame = np.asarray(frame, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != frame.shape[:2]:
        raise DataError(f"mask shape {mask.shape} does not match frame {frame.shape[:2]}")
    if not mask.any():
        raise DataError("mask selects no pixels in this frame")
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    r0, r1 = int(rows[0]), int(rows[-1]) + 1
    c0, c1 = int(cols[0]), int(cols[-1]) + 1
    crop = frame[r0:r1, c0:c1]
    h, w = crop.shape[:2]
    side = max(h, w)
    canvas = np.zeros((side, side) + crop.shape[2:], dtype=np.float64)
    top = (side - h) // 2
    left = (side - w) // 2
    canvas[top : top + h, left : left + w] = crop
    return InstanceCrop(canvas, frame_index, instance_id, (r0, c0, r1, c1))


def crop_instance_frames(
    frames: np.ndarray, masks: np.ndarray, instance_id: str
) -> tuple[list[InstanceCrop], list[int]]:
    """Crop every frame; frames where the mask is empty are skipped."""
    crops, skipped = [], []
    for k in range(frames.shape[0]):
        if masks[k].astype(bool).any():
            crops.append(crop_instance(frames[k], masks[k], frame_index=k, instance_id=instance_id))
        else:
            skipped.append(k)
    return crops, skipped


def instance_embedding(crops: list[InstanceCrop], provider) -> np.ndarray:
    """One vector per instance: renormalized mean of per-frame crop embeddings."""
    if not crops:
        raise DataError("instance has no crops to embed")
    vecs = [provider.embed_image(c.pixels, key=c.key) for c in crops]
    return _unit(np.mean(vecs, axis=0))


# ---------------------------------------------------------------------------
# similarity and scores


@dataclass(frozen=True)
class SimilarityMatrix:
    """n x n cosine similarities, instance crops against captions."""

    values: np.ndarray
    instance_ids: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1] or values.shape[0] < 1:
            raise DataError(f"similarity matrix must be square and non-empty, got {values.shape}")
        if np.any(values < -1.0 - 1e-9) or np.any(values > 1.0 + 1e-9):
            raise DataError("similarities must lie in [-1, 1]")
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def similarity_matrix(crop_sets: list[list[InstanceCrop]], captions: list[str], provider) -> SimilarityMatrix:
    if len(crop_sets) != len(captions) or not crop_sets:
        raise DataError("need one caption per instance and at least one instance")
    image_vecs = [instance_embedding(crops, provider) for crops in crop_sets]
    text_vecs = [provider.embed_text(c) for c in captions]
    n = len(crop_sets)
    values = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            values[i, j] = cosine(image_vecs[i], text_vecs[j])
    ids = tuple(cs[0].instance_id for cs in crop_sets)
    return SimilarityMatrix(values, ids)


def cia_score(matrix: SimilarityMatrix | np.ndarray) -> float:
    """Mean of the diagonal after row-argmax binarization (leftmost ties win)."""
    values = matrix.values if isinstance(matrix, SimilarityMatrix) else np.asarray(matrix, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1] or values.shape[0] < 1:
        raise DataError(f"similarity matrix must be square and non-empty, got {values.shape}")
    hits = np.argmax(values, axis=1) == np.arange(values.shape[0])
    return float(hits.mean())


def local_textual_faithfulness(crops: list[InstanceCrop], caption: str, provider) -> float:
    """Mean per-frame cosine between crop embeddings and the caption embedding."""
    if not crops:
        raise DataError("no crops to score")
    text_vec = provider.embed_text(caption)
    sims = [cosine(provider.embed_image(c.pixels, key=c.key), text_vec) for c in crops]
    return float(np.mean(sims))


def local_temporal_consistency(crops: list[InstanceCrop], provider) -> float | None:
    """Mean cosine between crop embeddings of consecutive available frames."""
    if len(crops) < 2:
        return None
    ordered = sorted(crops, key=lambda c: c.frame_index)
    vecs = [provider.embed_image(c.pixels, key=c.key) for c in ordered]
    sims = [cosine(vecs[k], vecs[k + 1]) for k in range(len(vecs) - 1)]
    return float(np.mean(sims))


def instance_accuracy(
    crop_sets: list[list[InstanceCrop]],
    source_captions: list[str],
    target_captions: list[str],
    provider,
) -> float:
    """Fraction of instances closer to their target caption than their source."""
    if not crop_sets or len(crop_sets) != len(source_captions) or len(crop_sets) != len(target_captions):
        raise DataError("need matching source and target captions for every instance")
    hits = []
    for crops, src, tgt in zip(crop_sets, source_captions, target_captions):
        vec = instance_embedding(crops, provider)
        hits.append(cosine(vec, provider.embed_text(tgt)) > cosine(vec, provider.embed_text(src)))
    return float(np.mean(hits))


@dataclass(frozen=True)
class GlobalScores:
    gtc: float | None
    gtf: float | None
    fa: float | None


def global_scores(
    frames: np.ndarray,
    global_source_caption: str | None,
    global_target_caption: str | None,
    provider,
) -> GlobalScores:
    """Whole-frame temporal consistency, target faithfulness, frame accuracy."""
    frames = np.asarray(frames, dtype=np.float64)
    vecs = [provider.embed_image(frames[k], key=f"frame:{k}") for k in range(frames.shape[0])]
    gtc = None
    if len(vecs) >= 2:
        gtc = float(np.mean([cosine(vecs[k], vecs[k + 1]) for k in range(len(vecs) - 1)]))
    gtf = fa = None
    if global_target_caption is not None:
        tgt = provider.embed_text(global_target_caption)
        sims_tgt = [cosine(v, tgt) for v in vecs]
        gtf = float(np.mean(sims_tgt))
        if global_source_caption is not None:
            src = provider.embed_text(global_source_caption)
            sims_src = [cosine(v, src) for v in vecs]
            fa = float(np.mean([t > s for t, s in zip(sims_tgt, sims_src)]))
    return GlobalScores(gtc=gtc, gtf=gtf, fa=fa)


# ---------------------------------------------------------------------------
# structural similarity


def _gaussian_taps(size: int, sigma: float) -> np.ndarray:
    r = (size - 1) // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter2(image: np.ndarray, taps: np.ndarray) -> np.ndarray:
    out = correlate1d(image, taps, axis=0, mode="reflect")
    return correlate1d(out, taps, axis=1, mode="reflect")


def _ssim_single(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    taps = _gaussian_taps(SSIM_WINDOW, SSIM_SIGMA)
    pad = (SSIM_WINDOW - 1) // 2
    if min(a.shape) < SSIM_WINDOW:
        raise DataError(f"frames must be at least {SSIM_WINDOW} pixels per side, got {a.shape}")
    ua = _filter2(a, taps)
    ub = _filter2(b, taps)
    va = _filter2(a * a, taps) - ua * ua
    vb = _filter2(b * b, taps) - ub * ub
    cov = _filter2(a * b, taps) - ua * ub
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    ssim_map = ((2 * ua * ub + c1) * (2 * cov + c2)) / ((ua * ua + ub * ub + c1) * (va + vb + c2))
    return float(ssim_map[pad:-pad, pad:-pad].mean())


def ssim(frame_a: np.ndarray, frame_b: np.ndarray, data_range: float | None = None) -> float:
    """Single-scale structural similarity, Gaussian-weighted 11x11 window.

    The dynamic range defaults from the pixel format: 255 for uint8, 1.0
    for floats.  Multi-channel frames score per channel and average.
    """
    a = np.asarray(frame_a)
    b = np.asarray(frame_b)
    if a.shape != b.shape:
        raise DataError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if data_range is None:
        data_range = 255.0 if a.dtype == np.uint8 else 1.0
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    if a.ndim == 2:
        return _ssim_single(a, b, data_range)
    if a.ndim == 3:
        return float(np.mean([_ssim_single(a[:, :, c], b[:, :, c], data_range) for c in range(a.shape[2])]))
    raise DataError(f"frames must be 2-D or 3-D, got shape {a.shape}")


def background_ssim(
    frames_a: np.ndarray, frames_b: np.ndarray, instance_masks: list[np.ndarray], data_range: float = 1.0
) -> float:
    """SSIM over background regions with instance pixels zeroed on both sides."""
    frames_a = np.asarray(frames_a, dtype=np.float64)
    frames_b = np.asarray(frames_b, dtype=np.float64)
    if frames_a.shape != frames_b.shape:
        raise DataError(f"frame stacks differ: {frames_a.shape} vs {frames_b.shape}")
    total = np.zeros(frames_a.shape[:3])
    for m in instance_masks:
        total += np.asarray(m, dtype=np.float64)
    m_b = np.clip(1.0 - total, 0.0, 1.0)[..., None]
    scores = [
        ssim(frames_a[k] * m_b[k], frames_b[k] * m_b[k], data_range=data_range)
        for k in range(frames_a.shape[0])
    ]
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# full evaluation


@dataclass(frozen=True)
class InstanceEval:
    """Metric-side view of one instance: masks plus its captions."""

    instance_id: str
    caption: str
    masks: np.ndarray
    source_caption: str | None = None


def evaluate_edit(
    edited_frames: np.ndarray,
    instances: list[InstanceEval],
    provider,
    *,
    source_frames: np.ndarray | None = None,
    global_source_caption: str | None = None,
    global_target_caption: str | None = None,
    perceptual_distance=None,
) -> dict:
    """Every instance-level and global score for one edited clip.

    Scores that cannot be computed (single frame, missing captions, no
    perceptual model) are reported as null, never as 0.
    """
    edited_frames = np.asarray(edited_frames, dtype=np.float64)
    per_instance: dict[str, dict] = {}
    crop_sets, captions, ids = [], [], []
    for inst in instances:
        crops, skipped = crop_instance_frames(edited_frames, inst.masks, inst.instance_id)
        entry: dict = {"frames_used": [c.frame_index for c in crops], "frames_skipped": skipped}
        if crops:
            entry["ltf"] = local_textual_faithfulness(crops, inst.caption, provider)
            entry["ltc"] = local_temporal_consistency(crops, provider)
            vec = instance_embedding(crops, provider)
            if inst.source_caption is not None:
                entry["prefers_target"] = bool(
                    cosine(vec, provider.embed_text(inst.caption))
                    > cosine(vec, provider.embed_text(inst.source_caption))
                )
            else:
                entry["prefers_target"] = None
            crop_sets.append(crops)
            captions.append(inst.caption)
            ids.append(inst.instance_id)
        else:
            entry.update({"ltf": None, "ltc": None, "prefers_target": None})
        per_instance[inst.instance_id] = entry

    cia = cia_score(similarity_matrix(crop_sets, captions, provider)) if crop_sets else None

    ia_hits = [per_instance[i]["prefers_target"] for i in ids if per_instance[i]["prefers_target"] is not None]
    ia = float(np.mean(ia_hits)) if ia_hits else None

    gs = global_scores(edited_frames, global_source_caption, global_target_caption, provider)

    ssim_bg = None
    if source_frames is not None and instances:
        ssim_bg = background_ssim(source_frames, edited_frames, [i.masks for i in instances])

    lpips = None
    if perceptual_distance is not None and source_frames is not None:
        lpips = float(
            np.mean([perceptual_distance(source_frames[k], edited_frames[k]) for k in range(edited_frames.shape[0])])
        )

    return {
        "cia": cia,
        "instance_accuracy": ia,
        "instances": per_instance,
        "global": {"gtc": gs.gtc, "gtf": gs.gtf, "fa": gs.fa},
        "ssim_background": ssim_bg,
        "lpips": lpips,
    }
