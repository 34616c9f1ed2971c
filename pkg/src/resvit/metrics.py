"""Image quality metrics and test-set reports.

All metrics operate on images scaled to [0, 1] (peak 1).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DataError, DimensionError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(ref: np.ndarray, syn: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    ref = np.asarray(ref, dtype=np.float64)
    syn = np.asarray(syn, dtype=np.float64)
    if ref.shape != syn.shape:
        raise DimensionError(f"psnr: shapes {ref.shape} and {syn.shape} differ")
    if peak <= 0:
        raise ContractError("psnr: peak must be positive")
    mse = np.mean((ref - syn) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalised 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(img, taps.size, axis=1) @ taps
    return sliding_window_view(rows, taps.size, axis=0) @ taps


def ssim(ref: np.ndarray, syn: np.ndarray, data_range: float = 1.0) -> float:
    """Mean structural similarity over all fully contained 11x11 Gaussian windows."""
    x = np.asarray(ref, dtype=np.float64)
    y = np.asarray(syn, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"ssim: shapes {x.shape} and {y.shape} differ")
    if x.ndim != 2 or min(x.shape) < SSIM_WINDOW:
        raise ContractError(f"ssim needs 2-d images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# ------------------------------------------------------------ Frechet distance
def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _moments(x: np.ndarray, ridge: float):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError("Frechet distance needs at least two feature vectors per side")
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    if x.shape[0] < x.shape[1] + 1:
        cov = cov + ridge * np.eye(cov.shape[0])
    return mu, cov


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray,
                     ridge: float = 1e-6) -> float:
    """Frechet distance between Gaussians fitted to two feature sets.

    ``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)``, with
    symmetric square roots from clamped eigendecompositions.
    """
    mu_a, cov_a = _moments(features_a, ridge)
    mu_b, cov_b = _moments(features_b, ridge)
    if mu_a.shape != mu_b.shape:
        raise ContractError(f"feature dimensions differ: {mu_a.size} vs {mu_b.size}")
    root_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(root_a @ cov_b @ root_a)
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross)
    return float(max(value, 0.0))


class ProjectionFeatures:
    """Average-pool to ``pool x pool``, flatten, rotate by a seeded orthonormal matrix.

    A cheap, deterministic stand-in for Inception features.
    """

    def __init__(self, pool: int = 8, dims: int = 64, seed: int = 0):
        if dims > pool * pool:
            raise ContractError("projection cannot have more dims than pooled pixels")
        q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((pool * pool, pool * pool)))
        self.matrix = (q * np.sign(np.diag(r)))[:, :dims]
        self.pool = pool

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        n, h, w = images.shape
        p = self.pool
        if h % p or w % p:
            raise DimensionError(f"{h}x{w} images cannot be pooled to {p}x{p}")
        pooled = images.reshape(n, p, h // p, p, w // p).mean(axis=(2, 4))
        return pooled.reshape(n, -1) @ self.matrix


# ------------------------------------------------------------------ reports
@dataclass
class SubjectMetrics:
    subject: str
    task: str
    psnr: float
    ssim: float


@dataclass
class MetricReport:
    rows: List[SubjectMetrics] = field(default_factory=list)
    fid: Dict[str, float] = field(default_factory=dict)

    def summary(self) -> List[dict]:
        """Mean and std over subjects (each subject already slice-averaged)."""
        out = []
        for task in sorted({r.task for r in self.rows}):
            rows = [r for r in self.rows if r.task == task]
            p = np.array([r.psnr for r in rows])
            s = np.array([r.ssim for r in rows])
            out.append(dict(task=task, mean_psnr=_stat(np.mean, p), std_psnr=_stat(np.std, p),
                            mean_ssim=float(np.mean(s)), std_ssim=float(np.std(s)),
                            fid=self.fid.get(task, math.nan)))
        return out

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["subject", "task", "psnr", "ssim"])
            for r in self.rows:
                writer.writerow([r.subject, r.task, repr(r.psnr), repr(r.ssim)])
        summary = self.summary()
        (out_dir / "summary.json").write_text(
            json.dumps(summary[0] if len(summary) == 1 else summary, indent=1) + "\n")


def _stat(fn: Callable, values: np.ndarray) -> float:
    if np.isinf(values).any():
        return math.inf if fn is np.mean else math.nan
    return float(fn(values))


def evaluate_volumes(ref: Dict[str, List[np.ndarray]], syn: Dict[str, List[np.ndarray]],
                     task: str, features: Optional[ProjectionFeatures] = None) -> MetricReport:
    """Per-subject slice-averaged PSNR/SSIM plus one test-set Frechet distance.

    ``ref``/``syn`` map subject ids to lists of [0, 1] target images in
    matching order.
    """
    features = features or ProjectionFeatures()
    report = MetricReport()
    all_ref, all_syn = [], []
    for subject in ref:
        if subject not in syn or len(syn[subject]) != len(ref[subject]):
            raise DataError(f"synthesised images missing for subject {subject}")
        ps = [psnr(r, s) for r, s in zip(ref[subject], syn[subject])]
        ss = [ssim(r, s) for r, s in zip(ref[subject], syn[subject])]
        report.rows.append(SubjectMetrics(subject, task, float(np.mean(ps)), float(np.mean(ss))))
        all_ref.extend(ref[subject])
        all_syn.extend(syn[subject])
    if len(all_ref) >= 2:
        report.fid[task] = frechet_distance(features(np.stack(all_syn)), features(np.stack(all_ref)))
    return report


def evaluate_datasets(ref_ds, syn_ds, split: Optional[str] = None) -> MetricReport:
    """Compare a synthesised tree (written by inference) with its reference dataset."""
    from .data import TaskConfig  # local import keeps metrics free of data-layer deps

    if syn_ds.task is None:
        raise DataError(f"{syn_ds.root / 'manifest.json'}: synthesised tree has no 'task' field")
    task = TaskConfig.parse(syn_ds.task, ref_ds.modalities)
    split = split or syn_ds.manifest.get("split", "test")
    syn_index = {(r.subject, r.index): r for r in syn_ds.refs}
    ref_imgs: Dict[str, List[np.ndarray]] = {}
    syn_imgs: Dict[str, List[np.ndarray]] = {}
    for ref in ref_ds.slices(split):
        peaks = ref_ds.subject_peak(ref.subject)
        match = syn_index.get((ref.subject, ref.index))
        for t in task.targets:
            rel = None if match is None else match.files[t]
            if rel is None or not syn_ds.path(rel).is_file():
                where = syn_ds.root / (rel or f"{ref.subject}/{ref.index:03d}_{ref_ds.modalities[t]}.mms")
                raise DataError(f"{where}: synthesised slice missing for subject {ref.subject} "
                                f"slice {ref.index}")
            ref_imgs.setdefault(ref.subject, []).append(ref_ds.read_raw(ref, t) / peaks[t])
            syn_imgs.setdefault(ref.subject, []).append(syn_ds.read_raw(match, t) / peaks[t])
    return evaluate_volumes(ref_imgs, syn_imgs, task.name)
