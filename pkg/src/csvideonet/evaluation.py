"""Frame quality metrics, noise sweeps over CR labels, and latency benchmarking."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy.signal import convolve2d

from .ingest import GopBlockSequence, assemble
from .model import CSVideoNet, cnn_only_forward, csvideonet_forward
from .sensing import NOISE_MODES, MeasurementGop, SensingMatrixSet, add_measurement_noise, sense_gop

PSNR_CAP = 100.0
SSIM_K1, SSIM_K2, SSIM_L = 0.01, 0.03, 255.0
SSIM_WIN, SSIM_SIGMA = 11, 1.5
REFERENCE_RUNTIME_MS_CR100 = 8.0  # reference hardware, context only


class MetricError(ValueError):
    pass


def _pair(x, xh):
    x = np.asarray(x, dtype=np.float64)
    xh = np.asarray(xh, dtype=np.float64)
    if x.shape != xh.shape:
        raise MetricError(f"shape mismatch: {x.shape} vs {xh.shape}")
    return x * 255.0, xh * 255.0


def psnr(x, xh) -> float:
    """PSNR in dB on the [0, 255] scale for frames given in [0, 1]; capped at 100 dB."""
    a, b = _pair(x, xh)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0**2 / mse))


def mae(x, xh) -> float:
    a, b = _pair(x, xh)
    return float(np.mean(np.abs(a - b)))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x, xh) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian windows (sigma 1.5, K1 .01, K2 .03, L 255)."""
    a, b = _pair(x, xh)
    if a.ndim != 2 or min(a.shape) < SSIM_WIN:
        raise MetricError(f"frame {a.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    w = gaussian_window()
    filt = lambda img: convolve2d(img, w, mode="valid")
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr_drop(psnr_low: float, psnr_high: float) -> float:
    """Percent PSNR lost going from the low-CR result to the high-CR result."""
    if not psnr_low > 0:
        raise MetricError("psnr_low must be positive")
    return 100.0 * (psnr_low - psnr_high) / psnr_low


# -- reports ------------------------------------------------------------------


def snr_value(label) -> float:
    """'clean' (or None/inf) means noise disabled."""
    if label is None or (isinstance(label, str) and label.lower() == "clean"):
        return math.inf
    return float(label)


def snr_label(value) -> str:
    v = snr_value(value)
    return "clean" if math.isinf(v) else f"{v:g}"


@dataclass
class MetricsCell:
    cr: float
    snr: str
    psnr: float
    ssim: float
    mae: float
    n: int
    frame_psnr: list = field(default_factory=list, repr=False)

    def record(self, with_frames: bool = False) -> dict:
        d = asdict(self)
        if not with_frames:
            d.pop("frame_psnr")
        return d


@dataclass
class MetricsReport:
    cells: list = field(default_factory=list)
    psnr_drop_percent: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)
    context: dict = field(default_factory=dict)

    def cell(self, cr, snr="clean") -> MetricsCell:
        for c in self.cells:
            if c.cr == cr and c.snr == snr_label(snr):
                return c
        raise KeyError((cr, snr))

    def to_records(self) -> list[dict]:
        return [c.record() for c in self.cells]

    def to_table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cr", "snr", "psnr", "ssim", "mae", "n"])
        for c in self.cells:
            w.writerow([f"{c.cr:g}", c.snr, repr(c.psnr), repr(c.ssim), repr(c.mae), c.n])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "cells": [c.record(with_frames=True) for c in self.cells],
            "psnr_drop_percent": self.psnr_drop_percent,
            "runtime": self.runtime,
            "context": self.context,
        }

    def write(self, directory) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = [d / "metrics.json", d / "metrics.jsonl", d / "metrics.csv"]
        files[0].write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        files[1].write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records()))
        files[2].write_text(self.to_table())
        return files


def plot_psnr_vs_snr(report: MetricsReport, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for cr in sorted({c.cr for c in report.cells}):
        noisy = sorted((snr_value(c.snr), c.psnr) for c in report.cells if c.cr == cr and c.snr != "clean")
        if noisy:
            ax.plot([s for s, _ in noisy], [p for _, p in noisy], marker="o", label=f"CR {cr:g}")
        clean = [c.psnr for c in report.cells if c.cr == cr and c.snr == "clean"]
        if clean:
            color = ax.lines[-1].get_color() if noisy else None
            ax.axhline(clean[0], ls=":", lw=0.8, color=color, label=f"CR {cr:g} clean")
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)
    return Path(path)


# -- pipeline -----------------------------------------------------------------


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def noisy_measurements(mats: SensingMatrixSet, gop: GopBlockSequence, snr_db: float, seed: int,
                       mode: str = "measurement") -> MeasurementGop:
    """Sense a GOP, adding noise per frame either to the measurements or to the pixels."""
    if mode not in NOISE_MODES:
        raise ValueError(f"noise mode must be one of {NOISE_MODES}")
    if math.isinf(snr_db):
        return sense_gop(mats, gop)
    if mode == "frame":
        noisy = np.stack(
            [add_measurement_noise(gop.blocks[t], snr_db, _seed(seed, t, 2)) for t in range(gop.T)]
        )
        return sense_gop(mats, GopBlockSequence(noisy, gop.source_id))
    mg = sense_gop(mats, gop)
    key = add_measurement_noise(mg.key, snr_db, _seed(seed, 0, 0))
    nonkey = np.stack(
        [add_measurement_noise(mg.nonkey[t], snr_db, _seed(seed, t + 1, 1)) for t in range(gop.T - 1)]
    )
    return MeasurementGop(key, nonkey, mg.n)


def reconstruct_frames(net: CSVideoNet, mg: MeasurementGop, arm: str = "full") -> np.ndarray:
    """Clamped (T, H, W) frames."""
    fwd = csvideonet_forward if arm == "full" else cnn_only_forward
    return np.clip(assemble(fwd(net, mg)), 0.0, 1.0)


def evaluate_model(
    models: Mapping,
    gops: Sequence[GopBlockSequence],
    cr_labels: Sequence,
    snr_levels: Sequence = ("clean",),
    seed: int = 0,
    noise_mode: str = "measurement",
    arm: str = "full",
) -> MetricsReport:
    """Sweep every (CR label, SNR) cell.

    ``models`` maps each CR label to ``(net, SensingMatrixSet)``. Metrics are
    per assembled frame and averaged uniformly over all frames of all GOPs.
    """
    if not gops:
        raise MetricError("empty evaluation dataset")
    report = MetricsReport()
    for cr in cr_labels:
        if cr not in models:
            raise MetricError(f"no checkpoint for CR label {cr}")
        net, mats = models[cr]
        net.eval()
        for snr in snr_levels:
            snr_db = snr_value(snr)
            p, s, m = [], [], []
            for g, gop in enumerate(gops):
                mg = noisy_measurements(mats, gop, snr_db, _seed(seed, g), noise_mode)
                rec = reconstruct_frames(net, mg, arm)
                for t in range(gop.T):
                    ref = gop.frame(t)
                    p.append(psnr(ref, rec[t]))
                    s.append(ssim(ref, rec[t]))
                    m.append(mae(ref, rec[t]))
            report.cells.append(
                MetricsCell(float(cr), snr_label(snr), float(np.mean(p)), float(np.mean(s)),
                            float(np.mean(m)), len(p), p)
            )
    clean = [c for c in report.cells if c.snr == "clean"]
    if len(clean) >= 2:
        lo = min(clean, key=lambda c: c.cr)
        hi = max(clean, key=lambda c: c.cr)
        report.psnr_drop_percent = {f"{lo.cr:g}->{hi.cr:g}": psnr_drop(lo.psnr, hi.psnr)}
    return report


def runtime_bench(net: CSVideoNet, repeats: int = 20, warmup: int = 3, grid=(5, 5), seed: int = 0) -> dict:
    """Milliseconds per reconstructed frame: one GOP pass over the grid, divided by T."""
    if repeats < 10:
        raise ValueError("repeats must be at least 10")
    c = net.config
    rng = np.random.Generator(np.random.PCG64(seed))
    rows, cols = grid
    mg = MeasurementGop(
        rng.standard_normal((rows, cols, c.m_key)).astype(np.float32),
        rng.standard_normal((c.T - 1, rows, cols, c.m_nonkey)).astype(np.float32),
        c.n,
    )
    net.eval()
    for _ in range(warmup):
        csvideonet_forward(net, mg)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        csvideonet_forward(net, mg)
        times.append((time.perf_counter() - t0) * 1000.0 / c.T)
    return {
        "mean_ms": float(np.mean(times)),
        "min_ms": float(np.min(times)),
        "max_ms": float(np.max(times)),
        "repeats": repeats,
        "frame": [rows * c.block_size, cols * c.block_size],
        "threads": torch.get_num_threads(),
        "reference_ms_cr100": REFERENCE_RUNTIME_MS_CR100,
    }
