"""Self-contained two-instance toy scenario.

Builds a tiny synthetic clip (two squares on a flat background), a matching
manifest, and a spread-0 Gaussian predictor registry whose closed form
makes every pipeline property checkable: each instance region must land
exactly on its own target mean, the background must track the
pure-reconstruction run, and swapping the two captions must swap the two
region outcomes bit-for-bit.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dms import InstanceEdit, run_edit
from .errors import NumericsError
from .io import VideoManifest, latents_to_frames, load_frames, load_manifest, load_masks, write_netpbm
from .predictor import Caption, ToyGaussianPredictor
from .schedule import LatentSequence

CAPTION_ONE = "a glowing red ball"
CAPTION_TWO = "a deep blue cube"
SOURCE_ONE = "a gray square"
SOURCE_TWO = "a dark square"
MEAN_ONE = 0.9
MEAN_TWO = 0.1
BACKGROUND_VALUE = 0.2

BG_TOLERANCE = 1e-5
MEAN_TOLERANCE = 1e-3


def build_toy_scenario(
    scene_dir,
    *,
    n_frames: int = 3,
    size: int = 16,
    sigma: float = 0.0,
    overlap: bool = False,
) -> Path:
    """Write frames, masks, registry, and manifest; returns the manifest path."""
    scene_dir = Path(scene_dir)
    (scene_dir / "frames").mkdir(parents=True, exist_ok=True)
    (scene_dir / "masks").mkdir(exist_ok=True)

    lo = size // 8
    hi = size // 2 - 1
    lo2 = size // 2 + 1
    hi2 = size - size // 8
    if overlap:
        lo2 = hi - 2  # second square intrudes into the first

    frame = np.full((size, size), BACKGROUND_VALUE)
    frame[lo:hi, lo:hi] = 0.5
    frame[lo2:hi2, lo2:hi2] = 0.65
    mask1 = np.zeros((size, size), dtype=np.uint8)
    mask1[lo:hi, lo:hi] = 1
    mask2 = np.zeros((size, size), dtype=np.uint8)
    mask2[lo2:hi2, lo2:hi2] = 1

    frame_u8 = np.round(frame * 255.0).astype(np.uint8)
    frames, masks1, masks2 = [], [], []
    for k in range(n_frames):
        frames.append(f"frames/{k:03d}.pgm")
        write_netpbm(scene_dir / frames[-1], frame_u8)
        masks1.append(f"masks/one_{k:03d}.pgm")
        write_netpbm(scene_dir / masks1[-1], mask1 * 255)
        masks2.append(f"masks/two_{k:03d}.pgm")
        write_netpbm(scene_dir / masks2[-1], mask2 * 255)

    # the registry means live in latent units; the source mean is the
    # quantized frame so reconstruction is self-consistent
    source_mu = (frame_u8.astype(np.float64) / 255.0)[:, :, None]
    registry = {
        "": {"mu": source_mu.ravel().tolist(), "shape": list(source_mu.shape), "sigma": sigma},
        CAPTION_ONE: {
            "mu": np.full(source_mu.shape, MEAN_ONE).ravel().tolist(),
            "shape": list(source_mu.shape),
            "sigma": sigma,
        },
        CAPTION_TWO: {
            "mu": np.full(source_mu.shape, MEAN_TWO).ravel().tolist(),
            "shape": list(source_mu.shape),
            "sigma": sigma,
        },
    }
    (scene_dir / "registry.json").write_text(json.dumps(registry), encoding="utf-8")

    manifest = {
        "frames": frames,
        "instances": [
            {"id": "one", "caption": CAPTION_ONE, "source_caption": SOURCE_ONE, "masks": masks1},
            {"id": "two", "caption": CAPTION_TWO, "source_caption": SOURCE_TWO, "masks": masks2},
        ],
        "global_source_caption": "two squares on a flat background",
        "global_target_caption": f"{CAPTION_ONE} and {CAPTION_TWO}",
    }
    manifest_path = scene_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest_path


def load_scenario(manifest_path) -> tuple[VideoManifest, LatentSequence, list[InstanceEdit]]:
    manifest = load_manifest(manifest_path)
    frames = load_frames(manifest.frame_paths)
    z0 = LatentSequence(frames, 0)
    edits = []
    for inst in manifest.instances:
        masks = load_masks(inst.mask_paths, expect_shape=frames.shape[1:3])
        edits.append(InstanceEdit(masks, Caption.from_text(inst.caption), inst.instance_id))
    return manifest, z0, edits


def _region_values(frames: np.ndarray, masks: np.ndarray) -> np.ndarray:
    sel = np.broadcast_to((masks > 0)[..., None], frames.shape)
    return frames[sel]


def run_demo(scene_dir, plan, sched, *, sigma: float = 0.0, overlap: bool = False, threads: int = 1) -> dict:
    """Build the scenario, run the edit plus its oracles, check the properties.

    Returns the combined run report; raises NumericsError when a property
    is violated.
    """
    manifest_path = build_toy_scenario(scene_dir, sigma=sigma, overlap=overlap)
    manifest, z0, edits = load_scenario(manifest_path)
    predictor = ToyGaussianPredictor.from_json(Path(scene_dir) / "registry.json", sched)

    final, report = run_edit(z0, edits, plan, predictor, sched, threads=threads)
    recon, _ = run_edit(z0, [], plan, predictor, sched, threads=threads)

    swapped_edits = [
        InstanceEdit(edits[0].masks, edits[1].caption, edits[0].instance_id),
        InstanceEdit(edits[1].masks, edits[0].caption, edits[1].instance_id),
    ]
    swapped, _ = run_edit(z0, swapped_edits, plan, predictor, sched, threads=threads)

    bg = (1.0 - edits[0].masks - edits[1].masks) > 0
    bg_sel = np.broadcast_to(bg[..., None], final.frames.shape)
    bg_dev = float(np.abs(final.frames - recon.frames)[bg_sel].max())

    checks = {
        "background_max_abs_deviation": bg_dev,
        "background_ok": bg_dev < BG_TOLERANCE,
        "instance_mean_errors": {},
        "instance_means_ok": True,
        "caption_swap_exact": True,
    }
    if sigma == 0.0:
        targets = {"one": MEAN_ONE, "two": MEAN_TWO}
        for edit in edits:
            err = float(abs(_region_values(final.frames, edit.masks).mean() - targets[edit.instance_id]))
            checks["instance_mean_errors"][edit.instance_id] = err
            if err >= MEAN_TOLERANCE:
                checks["instance_means_ok"] = False
        region_one = _region_values(swapped.frames, edits[0].masks)
        region_two = _region_values(swapped.frames, edits[1].masks)
        checks["caption_swap_exact"] = (
            bool(np.array_equal(region_one, np.full_like(region_one, MEAN_TWO)))
            and bool(np.array_equal(region_two, np.full_like(region_two, MEAN_ONE)))
            and bool(np.array_equal(swapped.frames[bg_sel], final.frames[bg_sel]))
        )

    report["checks"] = checks
    report["edited_latents"] = final
    report["edited_frames"] = latents_to_frames(final)

    failed = [
        name
        for name, ok in (
            ("background", checks["background_ok"]),
            ("instance_means", checks["instance_means_ok"]),
            ("caption_swap", checks["caption_swap_exact"]),
        )
        if not ok
    ]
    if failed:
        raise NumericsError(f"demo property checks failed: {', '.join(failed)}")
    return report
