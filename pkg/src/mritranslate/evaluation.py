"""Evaluation, ablation, and visualization.

Evaluation is read-only with respect to checkpoints and manifests: the
generator runs in inference mode over the manifest's test side, outputs are
mapped back to 8-bit, and the six metrics are scored per sample and
aggregated. Evaluating a checkpoint against a manifest from a different
dataset directory is the zero-shot workflow; it is flagged in the provenance
record but never blocks scoring. Report CSVs contain no timestamps and
regenerate bit-identically from the same inputs.

Error heatmaps render channel-mean absolute error through a monotone
colormap (dark means small error); feature panels tile channel-mean node
activations, individually min-max scaled (constant maps render mid-gray).
"""

from __future__ import annotations

import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image, ImageDraw, ImageFont

from .dataio import DatasetManifest, PairedSlabs, to_model_space, to_uint8
from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig, TranslationGenerator, count_parameters
from .metrics import (
    LpipsBackend,
    LpipsBackendError,
    MetricReport,
    SampleScore,
    aggregate,
    max_feasible_scales,
    mse,
    ms_ssim,
    nmse,
    psnr,
    ssim,
)
from .training import TrainConfig, Trainer, load_checkpoint

# Ablation grid in its canonical reporting order: plain/attention encoders
# crossed with plain/nested decoders.
ABLATION_GRID = (
    ("plain_residual", "unet"),
    ("se_residual", "unet"),
    ("plain_residual", "unetpp"),
    ("se_residual", "unetpp"),
)

ERROR_COLORMAP = "inferno"


def score_pair(
    sample_id: str,
    generated: np.ndarray,
    target: np.ndarray,
    scales: int,
    lpips_value: Optional[float] = None,
    lpips_note: str = "",
) -> SampleScore:
    """All analytic metrics for one 8-bit pair (LPIPS is passed through)."""
    return SampleScore(
        sample_id=sample_id,
        psnr=psnr(generated, target),
        ssim=ssim(generated, target),
        ms_ssim=ms_ssim(generated, target, scales=scales),
        mse=mse(generated, target),
        nmse=nmse(generated, target),
        lpips=lpips_value,
        lpips_note=lpips_note,
    )


def evaluate_pairs(
    model: Callable[[torch.Tensor], torch.Tensor],
    pairs: PairedSlabs,
    out_dir=None,
    lpips_backend: Optional[LpipsBackend] = None,
    save_images: bool = False,
) -> MetricReport:
    """Score a generator over every pair served by ``pairs``."""
    if len(pairs) == 0:
        raise ValueError(f"no samples in the {pairs.split} split")
    scales = min(5, max_feasible_scales(pairs.resolution, pairs.resolution))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if save_images:
            (out_dir / "generated").mkdir(exist_ok=True)
    scores = []
    for pid in pairs.ids:
        src, tgt = pairs.load_pair_uint8(pid)
        with torch.no_grad():
            gen = model(to_model_space(src).unsqueeze(0))
        gen_u8 = to_uint8(gen[0])
        if out_dir is not None and save_images:
            Image.fromarray(gen_u8, mode="RGB").save(out_dir / "generated" / f"{pid}.png")
        lpips_value, lpips_note = None, ""
        if lpips_backend is not None:
            lpips_value, lpips_note = _lpips_score(lpips_backend, gen_u8, tgt)
        scores.append(score_pair(pid, gen_u8, tgt, scales, lpips_value, lpips_note))
    report = aggregate(scores)
    if out_dir is not None:
        report.write_per_sample_csv(out_dir / "report_per_sample.csv")
        report.write_aggregate_csv(out_dir / "report_aggregate.csv")
    return report


def _lpips_score(backend: LpipsBackend, generated: np.ndarray, target: np.ndarray):
    with tempfile.TemporaryDirectory(prefix="lpips_") as tmp:
        a = Path(tmp) / "generated.png"
        b = Path(tmp) / "target.png"
        Image.fromarray(generated, mode="RGB").save(a)
        Image.fromarray(target, mode="RGB").save(b)
        try:
            return backend.score(a, b), ""
        except LpipsBackendError as exc:
            return None, str(exc)


def evaluate_checkpoint(
    checkpoint_path,
    manifest_path,
    resolution: Optional[int] = None,
    out_dir=None,
    lpips_backend: Optional[LpipsBackend] = None,
    save_images: bool = False,
) -> MetricReport:
    """Score a trained checkpoint on a manifest's test side.

    A manifest living outside the checkpoint's training dataset directory is
    evaluated as-is (zero-shot); the provenance record notes it along with
    any resolution mismatch.
    """
    checkpoint_path = Path(checkpoint_path)
    manifest_path = Path(manifest_path)
    trainer = load_checkpoint(checkpoint_path)
    manifest = DatasetManifest.read(manifest_path)
    resolution = resolution or trainer.config.resolution
    pairs = PairedSlabs(
        manifest_path.parent, manifest, trainer.task, "test", resolution
    )
    notes = []
    trained_root = trainer.slab_root
    if trained_root and Path(trained_root).resolve() != manifest_path.parent.resolve():
        notes.append(
            f"zero-shot: manifest directory {manifest_path.parent} differs from "
            f"training data directory {trained_root}"
        )
    if resolution != trainer.config.resolution:
        notes.append(
            f"resolution mismatch: checkpoint trained at {trainer.config.resolution}, "
            f"evaluating at {resolution}"
        )
    trainer.generator.eval()
    report = evaluate_pairs(
        trainer.generator,
        pairs,
        out_dir=out_dir,
        lpips_backend=lpips_backend,
        save_images=save_images,
    )
    if out_dir is not None:
        lines = [
            f"checkpoint: {checkpoint_path}",
            f"manifest: {manifest_path}",
            f"task: {trainer.task[0]}->{trainer.task[1]}",
            f"resolution: {resolution}",
            f"samples: {len(pairs)}",
        ] + notes
        (Path(out_dir) / "provenance.txt").write_text("\n".join(lines) + "\n")
    return report


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = (
    "config,encoder,decoder,n_params,psnr,ssim,lpips,ms_ssim,mse,nmse"
)


def run_ablation(
    slab_root,
    manifest: DatasetManifest,
    out_dir,
    base_gen: GeneratorConfig = GeneratorConfig(),
    disc_config: DiscriminatorConfig = DiscriminatorConfig(),
    train_config: TrainConfig = TrainConfig(),
    task: tuple[str, str] = ("T1", "T2"),
    dry_run: bool = False,
    lpips_backend: Optional[LpipsBackend] = None,
) -> Path:
    """Train (or, in a dry run, just initialize) all four encoder/decoder
    combinations on the same manifest and seed, then score each.

    Per-configuration failures are logged to ``ablation_failures.log``;
    surviving rows are still emitted in the canonical grid order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, failures = [], []
    for encoder, decoder in ABLATION_GRID:
        label = f"{encoder}+{decoder}"
        gen_config = replace(base_gen, encoder=encoder, decoder=decoder)
        run_dir = out_dir / label.replace("+", "_")
        try:
            trainer = Trainer(gen_config, disc_config, train_config, task=task)
            if not dry_run:
                trainer.train(slab_root, manifest, run_dir)
            trainer.generator.eval()
            pairs = PairedSlabs(
                slab_root, manifest, task, "test", train_config.resolution
            )
            report = evaluate_pairs(
                trainer.generator,
                pairs,
                out_dir=run_dir / "eval",
                lpips_backend=lpips_backend,
            )
            agg = report.aggregate
            cells = [label, encoder, decoder, str(count_parameters(trainer.generator))]
            for name in ("psnr", "ssim", "lpips", "ms_ssim", "mse", "nmse"):
                stat = agg[name]
                cells.append("unavailable" if stat.mean is None else f"{stat.mean:.10g}")
            rows.append(",".join(cells))
        except Exception as exc:  # noqa: BLE001 - keep surviving rows
            failures.append(f"{label}: {exc}")
    table_path = out_dir / "ablation_table.csv"
    table_path.write_text("\n".join([ABLATION_COLUMNS, *rows]) + "\n")
    if failures:
        (out_dir / "ablation_failures.log").write_text(
            "".join(line + "\n" for line in failures)
        )
    return table_path


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------


def apply_error_colormap(values01: np.ndarray) -> np.ndarray:
    """Map [0, 1] error intensities through the monotone colormap to RGB."""
    cmap = colormaps[ERROR_COLORMAP]
    rgba = cmap(np.clip(values01, 0.0, 1.0))
    return (rgba[..., :3] * 255.0 + 0.5).astype(np.uint8)


def error_heatmap_array(
    generated: np.ndarray,
    target: np.ndarray,
    shared_scale: Optional[float] = None,
) -> np.ndarray:
    """Channel-mean |generated - target| rendered as an RGB heatmap.

    Per-image min-max scaling by default; pass ``shared_scale`` to normalize
    several heatmaps onto one scale for fair side-by-side panels.
    """
    if generated.shape != target.shape:
        raise ValueError(f"shape mismatch: {generated.shape} vs {target.shape}")
    err = np.abs(generated.astype(np.float64) - target.astype(np.float64))
    if err.ndim == 3:
        err = err.mean(axis=2)
    if shared_scale is not None:
        norm = err / shared_scale if shared_scale > 0 else np.zeros_like(err)
    else:
        lo, hi = err.min(), err.max()
        norm = (err - lo) / (hi - lo) if hi > lo else np.zeros_like(err)
    return apply_error_colormap(norm)


def render_error_heatmap(
    source: np.ndarray,
    target: np.ndarray,
    generated: np.ndarray,
    out_path,
    shared_scale: Optional[float] = None,
) -> Path:
    """Write the (source | target | generated | heatmap) panel."""
    heat = error_heatmap_array(generated, target, shared_scale)
    tiles = [np.ascontiguousarray(t) for t in (source, target, generated, heat)]
    panel = _tile_images(tiles, labels=["source", "target", "generated", "|error|"])
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    panel.save(out_path)
    return out_path


def feature_map_tile(values: np.ndarray) -> np.ndarray:
    """Min-max scale one channel-mean map to uint8; constant maps render
    mid-gray."""
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.rint(255.0 * (values - lo) / (hi - lo)).astype(np.uint8)


def render_feature_panels(
    generator: TranslationGenerator,
    sample: torch.Tensor,
    nodes: Sequence[str],
    out_path,
) -> Path:
    """Tile channel-mean activations of the requested grid nodes."""
    maps = generator.dump_feature_maps(sample, nodes)
    size = max(m.shape[0] for m in maps.values())
    tiles = []
    for name in maps:
        gray = feature_map_tile(maps[name])
        img = Image.fromarray(gray, mode="L").resize((size, size), Image.NEAREST)
        tiles.append(np.asarray(img.convert("RGB")))
    panel = _tile_images(tiles, labels=list(maps))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    panel.save(out_path)
    return out_path


_LABEL_BAND = 14


def _tile_images(tiles: list[np.ndarray], labels: list[str], gap: int = 4) -> Image.Image:
    height = max(t.shape[0] for t in tiles)
    width = sum(t.shape[1] for t in tiles) + gap * (len(tiles) - 1)
    canvas = np.full((height + _LABEL_BAND, width, 3), 255, dtype=np.uint8)
    x = 0
    for tile in tiles:
        canvas[_LABEL_BAND : _LABEL_BAND + tile.shape[0], x : x + tile.shape[1]] = tile
        x += tile.shape[1] + gap
    image = Image.fromarray(canvas, mode="RGB")
    draw = ImageDraw.Draw(image)
    font = ImageFont.load_default()
    x = 0
    for tile, label in zip(tiles, labels):
        draw.text((x + 2, 1), label, fill=(0, 0, 0), font=font)
        x += tile.shape[1] + gap
    return image
