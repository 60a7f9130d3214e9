"""Byte-level contracts: frames, masks, latents, manifests, configuration.

NetPBM (binary P5/P6, 8-bit) is the zero-dependency interchange format so
fixtures round-trip bit-exactly; PNG is read and written through Pillow.
Masks are thresholded at 128 and strictly binary afterwards.  Latents are
stored as raw little-endian float32, row-major (frame, h, w, channel), with
a JSON sidecar describing shape and timestep.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .ipr import FeatureMask
from .schedule import LatentSequence

MASK_THRESHOLD = 128


# ---------------------------------------------------------------------------
# images


def read_netpbm(path) -> np.ndarray:
    """Binary P5 (gray) or P6 (RGB), maxval 255; returns uint8 (h, w[, 3])."""
    data = Path(path).read_bytes()
    if data[:2] not in (b"P5", b"P6"):
        raise DataError(f"{path}: not a binary P5/P6 NetPBM file")
    fields_ = []
    pos = 2
    while len(fields_) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields_.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields_)
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    channels = 3 if data[:2] == b"P6" else 1
    if len(data) - pos < h * w * channels:
        raise DataError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w * channels, offset=pos)
    img = pixels.reshape(h, w, channels)
    return img[:, :, 0] if channels == 1 else img


def write_netpbm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise DataError("NetPBM writer expects uint8 pixels")
    if image.ndim == 2:
        magic, payload = b"P5", image
    elif image.ndim == 3 and image.shape[2] == 3:
        magic, payload = b"P6", image
    else:
        raise DataError(f"cannot write image of shape {image.shape} as NetPBM")
    h, w = image.shape[:2]
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + payload.tobytes())


def load_image(path) -> np.ndarray:
    """uint8 (h, w) or (h, w, 3) from NetPBM or PNG."""
    suffix = Path(path).suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        return read_netpbm(path)
    if suffix == ".png":
        from PIL import Image

        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P") else "L")
            return np.asarray(im, dtype=np.uint8)
    raise DataError(f"{path}: unsupported image format {suffix!r}")


def save_image(path, image: np.ndarray) -> None:
    suffix = Path(path).suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        write_netpbm(path, image)
        return
    if suffix == ".png":
        from PIL import Image

        Image.fromarray(image).save(path)
        return
    raise DataError(f"{path}: unsupported image format {suffix!r}")


def load_frames(paths) -> np.ndarray:
    """Stack of frames as float64 (N, h, w, c) scaled to [0, 1]."""
    if not paths:
        raise DataError("no frame paths given")
    frames = []
    for p in paths:
        img = load_image(p)
        if img.ndim == 2:
            img = img[:, :, None]
        frames.append(img.astype(np.float64) / 255.0)
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise DataError(f"frames disagree in shape: {sorted(shapes)}")
    return np.stack(frames)


def load_masks(paths, expect_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Binary masks (N, h, w) from gray images, thresholded at 128."""
    masks = []
    for p in paths:
        img = load_image(p)
        if img.ndim != 2:
            raise DataError(f"{p}: masks must be single-channel")
        if expect_shape is not None and img.shape != expect_shape:
            raise DataError(f"{p}: mask shape {img.shape} does not match frames {expect_shape}")
        masks.append((img >= MASK_THRESHOLD).astype(np.uint8))
    return np.stack(masks)


def latents_to_frames(latents: LatentSequence) -> np.ndarray:
    """Identity decode at toy scale: clip to [0, 1] and quantize to uint8."""
    clipped = np.clip(latents.frames, 0.0, 1.0)
    return np.round(clipped * 255.0).astype(np.uint8)


def downsample_mask(mask: np.ndarray, target: tuple[int, int]) -> FeatureMask:
    """Coverage pooling: a target cell is set iff any covered pixel is set.

    Cells partition the source grid by integer boxes, so single-pixel
    instances survive any downsampling ratio.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {mask.shape}")
    hs, ws = mask.shape
    ht, wt = target
    if ht > hs or wt > ws:
        raise DataError(f"target {target} larger than source {mask.shape}")
    row_edges = (np.arange(ht) * hs) // ht
    col_edges = (np.arange(wt) * ws) // wt
    pooled = np.add.reduceat(np.add.reduceat(mask.astype(np.int64), row_edges, axis=0), col_edges, axis=1)
    return FeatureMask((pooled > 0).ravel(), (ht, wt))


# ---------------------------------------------------------------------------
# latents


def save_latents(path, latents: LatentSequence) -> None:
    path = Path(path)
    data = latents.frames.astype("<f4")
    path.write_bytes(data.tobytes())
    sidecar = {"shape": list(latents.frames.shape), "dtype": "f32le", "timestep": int(latents.timestep)}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="ascii")


def load_latents(path) -> LatentSequence:
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.exists():
        raise DataError(f"missing latent sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text(encoding="ascii"))
    if sidecar.get("dtype") != "f32le":
        raise DataError(f"{sidecar_path}: unsupported dtype {sidecar.get('dtype')!r}")
    shape = tuple(int(s) for s in sidecar["shape"])
    if len(shape) != 4 or shape[0] < 1:
        raise DataError(f"{sidecar_path}: latent shape must be (N, h, w, c), got {shape}")
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise DataError(f"{path}: payload has {raw.size} floats, sidecar shape {shape} needs {int(np.prod(shape))}")
    return LatentSequence(raw.reshape(shape).astype(np.float64), int(sidecar["timestep"]))


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestInstance:
    instance_id: str
    caption: str
    mask_paths: tuple[Path, ...]
    source_caption: str | None = None


@dataclass(frozen=True)
class VideoManifest:
    """Validated description of one editing job's inputs."""

    frame_paths: tuple[Path, ...]
    instances: tuple[ManifestInstance, ...]
    global_source_caption: str | None = None
    global_target_caption: str | None = None
    control_paths: tuple[Path, ...] | None = None

    @property
    def n_frames(self) -> int:
        return len(self.frame_paths)


def load_manifest(path) -> VideoManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("frames"), list) or not doc["frames"]:
        raise DataError(f"{path}: manifest needs a non-empty 'frames' list")
    base = path.parent

    def resolve(rel):
        p = base / rel
        if not p.exists():
            raise DataError(f"{path}: referenced file does not exist: {p}")
        return p

    frame_paths = tuple(resolve(f) for f in doc["frames"])
    n = len(frame_paths)

    instances = []
    seen = set()
    for entry in doc.get("instances", []):
        iid = entry.get("id")
        if not iid or not isinstance(iid, str):
            raise DataError(f"{path}: every instance needs a string 'id'")
        if iid in seen:
            raise DataError(f"{path}: duplicate instance id {iid!r}")
        seen.add(iid)
        caption = entry.get("caption")
        if not caption or not isinstance(caption, str):
            raise DataError(f"{path}: instance {iid!r} needs a non-empty 'caption'")
        masks = entry.get("masks", [])
        if len(masks) != n:
            raise DataError(f"{path}: instance {iid!r} has {len(masks)} masks for {n} frames")
        instances.append(
            ManifestInstance(
                instance_id=iid,
                caption=caption,
                mask_paths=tuple(resolve(m) for m in masks),
                source_caption=entry.get("source_caption"),
            )
        )

    control = doc.get("control")
    control_paths = None
    if control is not None:
        if len(control) != n:
            raise DataError(f"{path}: {len(control)} control maps for {n} frames")
        control_paths = tuple(resolve(c) for c in control)

    return VideoManifest(
        frame_paths=frame_paths,
        instances=tuple(instances),
        global_source_caption=doc.get("global_source_caption"),
        global_target_caption=doc.get("global_target_caption"),
        control_paths=control_paths,
    )


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Flat key/value configuration; defaults are the shipped run settings."""

    total_steps: int = 50
    inversion_steps: int = 100
    cfg_scale: float = 12.5
    sns_fraction: float = 0.4
    reinversion_steps: int = 2
    lambda_: float = 0.5
    lambda_r: float = 0.5
    warmup_fraction: float = 0.1
    ipr_fraction: float = 0.1
    t_model: int = 1000
    seed: int = 0
    threads: int = 1
    manifest: str | None = None
    out_dir: str = "out"
    predictor: str = "gaussian"
    predictor_registry: str | None = None
    predictor_seed: int = 0
    alpha_bar_table: str | None = None
    edited_dir: str | None = None
    embeddings: str | None = None
    sigma: float = 0.0
    demo_overlap: bool = False

    # "lambda" is a Python keyword; accept it as the natural config spelling
    ALIASES = {"lambda": "lambda_"}

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def apply(self, mapping: dict) -> None:
        for key, value in mapping.items():
            name = self.ALIASES.get(key, key)
            if name not in self.field_names():
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(self, name)
            if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if current is not None and not isinstance(value, type(current)):
                raise ConfigError(
                    f"config key {key!r} expects {type(current).__name__}, got {type(value).__name__}"
                )
            if isinstance(current, bool) and not isinstance(value, bool):
                raise ConfigError(f"config key {key!r} expects bool, got {type(value).__name__}")
            setattr(self, name, value)

    @classmethod
    def load(cls, config_path=None, overrides: dict | None = None) -> "RunConfig":
        """Precedence: overrides > file > defaults."""
        cfg = cls()
        if config_path is not None:
            try:
                doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
            if not isinstance(doc, dict):
                raise ConfigError(f"{config_path}: config must be a JSON object")
            cfg.apply(doc)
        if overrides:
            cfg.apply(overrides)
        return cfg

    def to_dict(self) -> dict:
        out = {}
        for name in self.field_names():
            key = "lambda" if name == "lambda_" else name
            out[key] = getattr(self, name)
        return out


def parse_set_option(text: str) -> tuple[str, object]:
    """Parse one ``--set key=value``; values are JSON literals or strings."""
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, _, raw = text.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
