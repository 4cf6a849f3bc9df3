"""2.5D data pipeline: volumes -> paired pseudo-RGB slabs -> model tensors.

Conventions (fixed here, referenced by the tests):

* Per-slice normalization maps ``[min, max]`` linearly onto ``[0, 255]`` and
  rounds half to even; a uniform slice maps to all zeros.
* Bilinear resize samples at half-pixel centers: source coordinate
  ``(i + 0.5) * in/out - 0.5``, clamped to ``[0, in - 1]``; interpolation is
  separable, horizontal lerp first, then vertical.
* Slabs are stored as 512x512 8-bit RGB PNGs named
  ``<patient_id>_<modality>.png`` under ``train/`` and ``test/`` split
  directories; training-time resolutions (256/128) are resized on load.
* Model space is ``[-1, 1]`` via ``x / 127.5 - 1``; the inverse map is
  ``round((x + 1) * 127.5)`` clipped to ``[0, 255]``.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import DataError
from .nifti import read_volume

SLAB_SIZE = 512
SUPPORTED_RESOLUTIONS = (128, 256, 512)

# Filename fragments for the common public naming schemes (BraTS-style
# t1n/t2w/t2f and plain _t1/_t2/_flair/_pd). Override per dataset as needed.
DEFAULT_MODALITY_PATTERNS = {
    "T1": r"(?i)[_-]t1n?\.",
    "T2": r"(?i)[_-]t2w?\.",
    "FLAIR": r"(?i)(flair|[_-]t2f\.)",
    "PD": r"(?i)[_-]pd\.",
}


@dataclass(frozen=True)
class VolumeRecord:
    """One discovered 3D volume file."""

    patient_id: str
    modality: str
    path: Path
    shape: tuple[int, int, int]

    def __post_init__(self):
        if not self.modality:
            raise ValueError("modality tag must be nonempty")
        if self.shape[2] < 3:
            raise DataError(
                f"volume {self.path} has only {self.shape[2]} axial slices; need >= 3"
            )


@dataclass(frozen=True)
class Slab25D:
    """Three consecutive axial slices stacked as a pseudo-RGB image.

    ``pixels`` is (H, W, 3) uint8; channel c holds slice ``z_center - 1 + c``.
    """

    pixels: np.ndarray
    patient_id: str
    modality: str
    z_center: int

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.shape[2:] != (3,):
            raise ValueError("slab pixels must be (H, W, 3) uint8")


@dataclass(frozen=True)
class PairedSample:
    source: Slab25D
    target: Slab25D

    def __post_init__(self):
        if self.source.patient_id != self.target.patient_id:
            raise DataError(
                f"pairing violation: {self.source.patient_id} vs {self.target.patient_id}"
            )
        if self.source.z_center != self.target.z_center:
            raise DataError(
                f"pairing violation for {self.source.patient_id}: "
                f"z={self.source.z_center} vs z={self.target.z_center}"
            )
        if self.source.pixels.shape != self.target.pixels.shape:
            raise DataError("paired slabs must share height and width")

    @property
    def task(self) -> tuple[str, str]:
        return (self.source.modality, self.target.modality)


def normalize_slice(raw: np.ndarray, name: str = "slice") -> np.ndarray:
    """Linearly map one slice onto [0, 255] as uint8.

    Uniform slices map to all zeros. NaN or Inf anywhere is a data-integrity
    failure naming the offending slice.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(raw).all():
        raise DataError(f"non-finite values in {name}")
    lo = raw.min()
    hi = raw.max()
    if hi == lo:
        return np.zeros(raw.shape, dtype=np.uint8)
    scaled = 255.0 * (raw - lo) / (hi - lo)
    return np.rint(scaled).astype(np.uint8)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2D float array (half-pixel centers, clamped).

    Horizontal lerp first, then vertical, in float64.
    """
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5, 0.0, in_h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = ys - y0
    wx = xs - x0
    left = img[:, x0]
    right = img[:, x1]
    rows = left + (right - left) * wx  # horizontal lerp
    out = rows[y0, :] + (rows[y1, :] - rows[y0, :]) * wy[:, None]
    return out


def default_center(nz: int) -> int:
    """Central axial slice index, clamped so both neighbors exist."""
    if nz < 3:
        raise DataError(f"need at least 3 axial slices, got {nz}")
    return min(max(nz // 2, 1), nz - 2)


def build_slab(
    volume: VolumeRecord, z_center: int, size: int = SLAB_SIZE
) -> Slab25D:
    """Extract slices z-1, z, z+1, normalize each, resize, stack as RGB."""
    nz = volume.shape[2]
    if not 1 <= z_center <= nz - 2:
        raise IndexError(
            f"slice {z_center} out of range [1, {nz - 2}] for {volume.path}"
        )
    data = read_volume(volume.path)
    if data.shape != volume.shape:
        raise DataError(
            f"volume {volume.path} changed shape: recorded {volume.shape}, "
            f"read {data.shape}"
        )
    channels = []
    for offset in (-1, 0, 1):
        z = z_center + offset
        plane = normalize_slice(data[:, :, z], name=f"{volume.path}[z={z}]")
        resized = resize_bilinear(plane.astype(np.float64), size, size)
        channels.append(np.rint(np.clip(resized, 0.0, 255.0)).astype(np.uint8))
    pixels = np.stack(channels, axis=-1)
    return Slab25D(
        pixels=pixels,
        patient_id=volume.patient_id,
        modality=volume.modality,
        z_center=z_center,
    )


# ---------------------------------------------------------------------------
# Volume discovery
# ---------------------------------------------------------------------------


def discover_volumes(
    volume_root,
    patterns: Optional[dict[str, str]] = None,
) -> tuple[list[VolumeRecord], list[str]]:
    """Find NIfTI volumes under ``volume_root`` and tag them by modality.

    Returns (records, anomalies). A file matching no pattern is ignored; a
    file that cannot be opened is logged as an anomaly. The patient id is the
    filename with the matched fragment and NIfTI suffixes stripped, falling
    back to the parent directory name when that leaves nothing.
    """
    volume_root = Path(volume_root)
    if not volume_root.is_dir():
        raise DataError(f"volume root {volume_root} does not exist")
    patterns = patterns or DEFAULT_MODALITY_PATTERNS
    compiled = {mod: re.compile(pat) for mod, pat in patterns.items()}
    records: list[VolumeRecord] = []
    anomalies: list[str] = []
    paths = sorted(
        p
        for p in volume_root.rglob("*")
        if p.is_file() and (p.name.endswith(".nii") or p.name.endswith(".nii.gz"))
    )
    for path in paths:
        modality = None
        match = None
        for mod, rx in compiled.items():
            m = rx.search(path.name)
            if m:
                modality, match = mod, m
                break
        if modality is None:
            continue
        stem = re.sub(r"\.nii(\.gz)?$", "", path.name)
        pid = (stem[: match.start()] + stem[match.end() :]).strip("_-.")
        if not pid:
            pid = path.parent.name
        try:
            data = read_volume(path)
            record = VolumeRecord(
                patient_id=pid,
                modality=modality,
                path=path,
                shape=tuple(int(d) for d in data.shape),
            )
        except (DataError, ValueError) as exc:
            anomalies.append(f"{path}: {exc}")
            continue
        records.append(record)
    return records, anomalies


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

_MANIFEST_HEADER = "# slab-manifest v1"


@dataclass
class DatasetManifest:
    """Reproducible record of split membership."""

    train_ids: list[str]
    test_ids: list[str]
    split_ratio: float
    rng_seed: int
    few_shot_cap: Optional[int] = None

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise ValueError(f"train/test overlap: {sorted(overlap)}")

    def ids(self, split: str) -> list[str]:
        if split == "train":
            return self.train_ids
        if split == "test":
            return self.test_ids
        raise ValueError(f"unknown split {split!r}")

    def to_text(self) -> str:
        cap = "-" if self.few_shot_cap is None else str(self.few_shot_cap)
        lines = [
            _MANIFEST_HEADER,
            f"# ratio={self.split_ratio:.6f} seed={self.rng_seed} cap={cap}",
        ]
        lines += [f"train {pid}" for pid in self.train_ids]
        lines += [f"test {pid}" for pid in self.test_ids]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"manifest {path} not found")
        lines = path.read_text().splitlines()
        if not lines or lines[0] != _MANIFEST_HEADER:
            raise DataError(f"{path} is not a slab manifest")
        m = re.match(r"# ratio=([\d.]+) seed=(-?\d+) cap=(-|\d+)", lines[1])
        if not m:
            raise DataError(f"malformed manifest header in {path}")
        train_ids, test_ids = [], []
        for line in lines[2:]:
            if not line.strip():
                continue
            split, pid = line.split(None, 1)
            (train_ids if split == "train" else test_ids).append(pid)
        cap = None if m.group(3) == "-" else int(m.group(3))
        return cls(
            train_ids=train_ids,
            test_ids=test_ids,
            split_ratio=float(m.group(1)),
            rng_seed=int(m.group(2)),
            few_shot_cap=cap,
        )

    def with_cap(self, cap: Optional[int]) -> "DatasetManifest":
        """Return a copy whose train list is truncated to ``cap`` samples."""
        if cap is None:
            return self
        return DatasetManifest(
            train_ids=self.train_ids[:cap],
            test_ids=list(self.test_ids),
            split_ratio=self.split_ratio,
            rng_seed=self.rng_seed,
            few_shot_cap=cap,
        )


def split_dataset(
    sample_ids: Sequence[str],
    ratio: float,
    seed: int,
    few_shot_cap: Optional[int] = None,
) -> DatasetManifest:
    """Deterministic random split; the few-shot cap truncates only train."""
    if not sample_ids:
        raise ValueError("cannot split an empty sample list")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    ids = sorted(sample_ids)
    if len(ids) != len(set(ids)):
        raise ValueError("duplicate sample ids")
    rng = random.Random(seed)
    rng.shuffle(ids)
    n_train = int(round(len(ids) * ratio))
    if len(ids) >= 2:
        n_train = min(max(n_train, 1), len(ids) - 1)
    train_ids = ids[:n_train]
    test_ids = ids[n_train:]
    if few_shot_cap is not None:
        if few_shot_cap < 1:
            raise ValueError("few-shot cap must be >= 1")
        train_ids = train_ids[:few_shot_cap]
    return DatasetManifest(
        train_ids=train_ids,
        test_ids=test_ids,
        split_ratio=ratio,
        rng_seed=seed,
        few_shot_cap=few_shot_cap,
    )


# ---------------------------------------------------------------------------
# Slab storage and batch loading
# ---------------------------------------------------------------------------


def slab_filename(patient_id: str, modality: str) -> str:
    return f"{patient_id}_{modality}.png"


def save_slab(slab: Slab25D, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / slab_filename(slab.patient_id, slab.modality)
    Image.fromarray(slab.pixels, mode="RGB").save(path)
    return path


def load_slab_pixels(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"slab file {path} is missing")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def to_model_space(pixels: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [-1, 1]."""
    arr = pixels.astype(np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def to_uint8(tensor: torch.Tensor) -> np.ndarray:
    """(3, H, W) or (N, 3, H, W) model-space tensor -> uint8 HWC array(s)."""
    arr = tensor.detach().cpu().numpy()
    arr = np.rint((arr + 1.0) * 127.5)
    arr = np.clip(arr, 0, 255).astype(np.uint8)
    if arr.ndim == 3:
        return arr.transpose(1, 2, 0)
    return arr.transpose(0, 2, 3, 1)


def resize_slab(pixels: np.ndarray, resolution: int) -> np.ndarray:
    """Resize an (H, W, 3) uint8 slab to the requested resolution."""
    if pixels.shape[0] == resolution and pixels.shape[1] == resolution:
        return pixels
    out = np.empty((resolution, resolution, 3), dtype=np.uint8)
    for c in range(3):
        plane = resize_bilinear(pixels[:, :, c].astype(np.float64), resolution, resolution)
        out[:, :, c] = np.rint(np.clip(plane, 0.0, 255.0)).astype(np.uint8)
    return out


class PairedSlabs:
    """Serves paired (source, target) model-space batches for one split.

    ``root`` is the slab tree written by preprocessing (``train/`` and
    ``test/`` directories next to the manifest).
    """

    def __init__(
        self,
        root,
        manifest: DatasetManifest,
        task: tuple[str, str],
        split: str,
        resolution: int,
    ):
        if resolution not in SUPPORTED_RESOLUTIONS:
            raise ValueError(
                f"resolution {resolution} not in {SUPPORTED_RESOLUTIONS}"
            )
        self.root = Path(root)
        self.manifest = manifest
        self.task = task
        self.split = split
        self.resolution = resolution
        self.ids = list(manifest.ids(split))

    def __len__(self) -> int:
        return len(self.ids)

    def _slab_path(self, pid: str, modality: str) -> Path:
        return self.root / self.split / slab_filename(pid, modality)

    def load_pair_uint8(self, pid: str) -> tuple[np.ndarray, np.ndarray]:
        src_mod, tgt_mod = self.task
        try:
            src = load_slab_pixels(self._slab_path(pid, src_mod))
            tgt = load_slab_pixels(self._slab_path(pid, tgt_mod))
        except DataError as exc:
            raise DataError(f"sample {pid}: {exc}") from exc
        return resize_slab(src, self.resolution), resize_slab(tgt, self.resolution)

    def batch(self, indices: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
        """Load samples by index into (N, 3, H, W) tensors in [-1, 1]."""
        sources, targets = [], []
        for i in indices:
            src, tgt = self.load_pair_uint8(self.ids[i])
            sources.append(to_model_space(src))
            targets.append(to_model_space(tgt))
        return torch.stack(sources), torch.stack(targets)


# ---------------------------------------------------------------------------
# Preprocessing run
# ---------------------------------------------------------------------------


@dataclass
class PreprocessResult:
    manifest: DatasetManifest
    manifest_path: Path
    n_slabs: int
    anomalies: list[str] = field(default_factory=list)


def preprocess_volumes(
    volume_root,
    out_root,
    ratio: float,
    seed: int,
    few_shot_cap: Optional[int] = None,
    patterns: Optional[dict[str, str]] = None,
) -> PreprocessResult:
    """Build the slab tree: discover volumes, extract one central slab per
    volume, split patients, and persist slabs + manifest + anomaly log.

    Patients whose modalities disagree on slice count are skipped (logged);
    per-volume failures are logged and do not abort the run.
    """
    out_root = Path(out_root)
    records, anomalies = discover_volumes(volume_root, patterns)
    if not records:
        used = patterns or DEFAULT_MODALITY_PATTERNS
        raise DataError(
            f"no volumes matched under {volume_root}; patterns tried: {used}"
        )
    by_patient: dict[str, list[VolumeRecord]] = {}
    for rec in records:
        by_patient.setdefault(rec.patient_id, []).append(rec)

    slabs: dict[str, list[Slab25D]] = {}
    for pid, recs in sorted(by_patient.items()):
        slice_counts = {r.shape[2] for r in recs}
        if len(slice_counts) > 1:
            anomalies.append(
                f"{pid}: modalities disagree on slice count {sorted(slice_counts)}; skipped"
            )
            continue
        z_center = default_center(next(iter(slice_counts)))
        built = []
        failed = False
        for rec in recs:
            try:
                built.append(build_slab(rec, z_center))
            except (DataError, IndexError) as exc:
                anomalies.append(f"{rec.path}: {exc}")
                failed = True
                break
        if not failed and built:
            slabs[pid] = built

    if not slabs:
        raise DataError(f"all volumes under {volume_root} failed preprocessing")

    manifest = split_dataset(list(slabs), ratio, seed, few_shot_cap)
    out_root.mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        split_dir = out_root / split
        split_dir.mkdir(exist_ok=True)
        for pid in manifest.ids(split):
            for slab in slabs[pid]:
                save_slab(slab, split_dir)
    manifest_path = out_root / "manifest.txt"
    manifest.write(manifest_path)
    (out_root / "anomalies.log").write_text(
        "".join(line + "\n" for line in anomalies)
    )
    kept = set(manifest.train_ids) | set(manifest.test_ids)
    n_slabs = sum(len(v) for pid, v in slabs.items() if pid in kept)
    return PreprocessResult(
        manifest=manifest,
        manifest_path=manifest_path,
        n_slabs=n_slabs,
        anomalies=anomalies,
    )
