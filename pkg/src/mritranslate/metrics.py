"""Six-metric image quality evaluation between 8-bit image pairs.

PSNR, SSIM, MS-SSIM, MSE and NMSE are computed here in float64; LPIPS is
delegated to an external backend and never fabricated. SSIM uses an 11-tap
Gaussian window (sigma 1.5), stabilizers K1=0.01 / K2=0.03, and averages the
map over valid (unpadded) window positions only. MS-SSIM multiplies per-scale
contrast-structure terms (luminance enters only at the coarsest scale), each
raised to the canonical exponents renormalized to sum to one over the active
scales; scales are linked by 2x2 average pooling with floor truncation.
Negative contrast-structure responses are clamped to zero before
exponentiation.

The same torch core drives the differentiable MS-SSIM training loss.
"""

from __future__ import annotations

import math
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

PEAK = 255.0
MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
METRIC_NAMES = ("psnr", "ssim", "ms_ssim", "mse", "nmse", "lpips")


@dataclass(frozen=True)
class SsimParams:
    win_size: int = 11
    win_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = PEAK
    ms_weights: tuple[float, ...] = MS_WEIGHTS

    def __post_init__(self):
        if self.win_size % 2 != 1:
            raise ValueError("window size must be odd")


DEFAULT_SSIM_PARAMS = SsimParams()


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    """Normalized 2D Gaussian window of shape (size, size)."""
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    win = g[:, None] * g[None, :]
    return win / win.sum()


def effective_ms_weights(weights: Sequence[float], scales: int) -> tuple[float, ...]:
    """First ``scales`` exponents, renormalized to sum to one."""
    if not 1 <= scales <= len(weights):
        raise ValueError(f"scales must be in [1, {len(weights)}], got {scales}")
    head = weights[:scales]
    total = sum(head)
    return tuple(w / total for w in head)


def max_feasible_scales(height: int, width: int, win_size: int = 11) -> int:
    """Largest scale count such that the coarsest level still fits the window."""
    side = min(height, width)
    if side < win_size:
        return 0
    return int(math.floor(math.log2(side / win_size))) + 1


def _ssim_and_cs(
    x: torch.Tensor,
    y: torch.Tensor,
    params: SsimParams,
    data_range: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean SSIM and contrast-structure over valid windows of (N, C, H, W)."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    n, c, h, w = x.shape
    if min(h, w) < params.win_size:
        raise ValueError(
            f"image {h}x{w} is smaller than the {params.win_size}-tap window"
        )
    win = gaussian_window(params.win_size, params.win_sigma, dtype=x.dtype)
    win = win.to(x.device).expand(c, 1, -1, -1)
    c1 = (params.k1 * data_range) ** 2
    c2 = (params.k2 * data_range) ** 2

    mu_x = F.conv2d(x, win, groups=c)
    mu_y = F.conv2d(y, win, groups=c)
    var_x = F.conv2d(x * x, win, groups=c) - mu_x * mu_x
    var_y = F.conv2d(y * y, win, groups=c) - mu_y * mu_y
    cov = F.conv2d(x * y, win, groups=c) - mu_x * mu_y

    cs_map = (2.0 * cov + c2) / (var_x + var_y + c2)
    lum_map = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    return (lum_map * cs_map).mean(), cs_map.mean()


def ms_ssim_torch(
    x: torch.Tensor,
    y: torch.Tensor,
    data_range: float,
    scales: int = 5,
    params: SsimParams = DEFAULT_SSIM_PARAMS,
) -> torch.Tensor:
    """Differentiable MS-SSIM of (N, C, H, W) tensors on ``data_range``."""
    h, w = x.shape[-2:]
    feasible = max_feasible_scales(h, w, params.win_size)
    if scales > feasible:
        raise ValueError(
            f"image {h}x{w} supports at most {feasible} scales with a "
            f"{params.win_size}-tap window; requested {scales}"
        )
    weights = effective_ms_weights(params.ms_weights, scales)
    terms = []
    for level in range(scales):
        ssim_val, cs_val = _ssim_and_cs(x, y, params, data_range)
        if level < scales - 1:
            terms.append(torch.relu(cs_val))
            x = F.avg_pool2d(x, kernel_size=2)
            y = F.avg_pool2d(y, kernel_size=2)
        else:
            terms.append(torch.relu(ssim_val))
    result = terms[0] ** weights[0]
    for term, weight in zip(terms[1:], weights[1:]):
        result = result * term**weight
    return result


def _as_nchw(a: np.ndarray) -> torch.Tensor:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected (H, W) or (H, W, C) image, got shape {a.shape}")
    return torch.from_numpy(a.transpose(2, 0, 1)).unsqueeze(0)


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared difference on the [0, 255] scale."""
    a, b = _check_pair(a, b)
    diff = a - b
    return float(np.mean(diff * diff))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = PEAK) -> float:
    """10 log10(peak^2 / MSE) in dB; +inf when the images are identical."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return float(10.0 * math.log10(peak * peak / err))


def nmse(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b||^2 / ||b||^2 with the reference image b in the denominator."""
    a, b = _check_pair(a, b)
    denom = float(np.sum(b * b))
    if denom == 0.0:
        raise ValueError("reference image has zero energy")
    diff = a - b
    return float(np.sum(diff * diff)) / denom


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    params: SsimParams = DEFAULT_SSIM_PARAMS,
) -> float:
    a, b = _check_pair(a, b)
    val, _ = _ssim_and_cs(_as_nchw(a), _as_nchw(b), params, params.data_range)
    return float(val)


def ms_ssim(
    a: np.ndarray,
    b: np.ndarray,
    params: SsimParams = DEFAULT_SSIM_PARAMS,
    scales: int = 5,
) -> float:
    a, b = _check_pair(a, b)
    val = ms_ssim_torch(
        _as_nchw(a), _as_nchw(b), params.data_range, scales=scales, params=params
    )
    return float(val)


# ---------------------------------------------------------------------------
# LPIPS backend adapter
# ---------------------------------------------------------------------------


class LpipsBackendError(Exception):
    pass


class LpipsBackend:
    """External perceptual scorer: ``cmd <image_a> <image_b>`` printing one
    decimal number on stdout."""

    def __init__(self, command: Sequence[str], timeout: float = 300.0):
        if not command:
            raise ValueError("empty LPIPS backend command")
        self.command = list(command)
        self.timeout = timeout

    def score(self, path_a, path_b) -> float:
        try:
            proc = subprocess.run(
                [*self.command, str(path_a), str(path_b)],
                capture_output=True,
                text=True,
                timeout=self.timeout,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise LpipsBackendError(f"backend failed to run: {exc}") from exc
        if proc.returncode != 0:
            raise LpipsBackendError(
                f"backend exited {proc.returncode}: {proc.stderr.strip()[:200]}"
            )
        out = proc.stdout.strip()
        try:
            return float(out)
        except ValueError as exc:
            raise LpipsBackendError(f"backend printed non-numeric output {out!r}") from exc


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class SampleScore:
    sample_id: str
    psnr: float
    ssim: float
    ms_ssim: float
    mse: float
    nmse: float
    lpips: Optional[float] = None
    lpips_note: str = ""


@dataclass
class AggregateStat:
    mean: Optional[float]
    std: Optional[float]
    n: int
    excluded: int


@dataclass
class MetricReport:
    per_sample: list[SampleScore]
    aggregate: dict[str, AggregateStat] = field(default_factory=dict)

    def write_per_sample_csv(self, path) -> None:
        lines = ["sample_id,psnr,ssim,ms_ssim,mse,nmse,lpips"]
        for s in self.per_sample:
            lpips_cell = "unavailable" if s.lpips is None else _fmt(s.lpips)
            lines.append(
                f"{s.sample_id},{_fmt(s.psnr)},{_fmt(s.ssim)},{_fmt(s.ms_ssim)},"
                f"{_fmt(s.mse)},{_fmt(s.nmse)},{lpips_cell}"
            )
        _write_lines(path, lines)

    def write_aggregate_csv(self, path) -> None:
        lines = ["metric,mean,std,n,excluded"]
        for name in METRIC_NAMES:
            stat = self.aggregate[name]
            mean = "unavailable" if stat.mean is None else _fmt(stat.mean)
            std = "unavailable" if stat.std is None else _fmt(stat.std)
            lines.append(f"{name},{mean},{std},{stat.n},{stat.excluded}")
        _write_lines(path, lines)


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf"
    return format(v, ".10g")


def _write_lines(path, lines: list[str]) -> None:
    Path(path).write_text("\n".join(lines) + "\n")


def aggregate(per_sample: list[SampleScore]) -> MetricReport:
    """Mean and population standard deviation per metric.

    Non-finite values (infinite PSNR) and unavailable LPIPS entries are
    excluded from the statistics; the exclusion count is reported.
    """
    if not per_sample:
        raise ValueError("cannot aggregate an empty score list")
    stats: dict[str, AggregateStat] = {}
    for name in METRIC_NAMES:
        values = [getattr(s, name) for s in per_sample]
        finite = [v for v in values if v is not None and math.isfinite(v)]
        excluded = len(values) - len(finite)
        if finite:
            mean = sum(finite) / len(finite)
            var = sum((v - mean) ** 2 for v in finite) / len(finite)
            stats[name] = AggregateStat(mean, math.sqrt(var), len(finite), excluded)
        else:
            stats[name] = AggregateStat(None, None, 0, excluded)
    return MetricReport(per_sample=list(per_sample), aggregate=stats)
