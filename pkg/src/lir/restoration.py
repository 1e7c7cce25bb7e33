"""Inference with the retained encoder/generator pair and metric tables."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from lir.imaging import NoiseSpec, add_noise, psnr, quantize, rng_stream, ssim, to_tensor
from lir.models import ConfigError, ModelSet

log = logging.getLogger(__name__)

CSV_FIELDS = ("noise_kind", "sigma", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "n", "psnr_inf")

Restorer = Union[ModelSet, Callable[[np.ndarray], np.ndarray]]


def _pad_amounts(size: int, multiple: int) -> int:
    # at least two code pixels so the reflect-padded residual convs stay valid
    return max(size + (-size) % multiple, 2 * multiple) - size


@torch.no_grad()
def restore(models: ModelSet, img: np.ndarray) -> np.ndarray:
    """Run ``G_Y(E_X(img))`` on an arbitrary-size ``(H, W, C)`` image.

    The image is reflect-padded on the bottom/right to a multiple of the
    encoder stride (and to at least twice the stride; replicate padding when
    the image is too small to reflect) and the output cropped back.
    """
    if getattr(models, "E_X", None) is None or getattr(models, "G_Y", None) is None:
        raise ConfigError("restoration needs E_X and G_Y weights")
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[:2]
    m = models.config.multiple
    ph, pw = _pad_amounts(h, m), _pad_amounts(w, m)
    x = to_tensor(img)
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    out = models.G_Y(models.E_X(x))[:, :, :h, :w]
    return out[0].permute(1, 2, 0).numpy().astype(np.float32)


def _apply(restorer: Restorer, img: np.ndarray) -> np.ndarray:
    if isinstance(restorer, ModelSet):
        return restore(restorer, img)
    return np.asarray(restorer(img), dtype=np.float32)


@dataclass
class MetricsRow:
    noise_kind: str
    sigma: float
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    n_images: int
    psnr_inf: bool = False


@dataclass
class MetricsTable:
    rows: list[MetricsRow] = field(default_factory=list)

    def row(self, noise_kind: str, sigma: float) -> MetricsRow:
        for r in self.rows:
            if r.noise_kind == noise_kind and r.sigma == sigma:
                return r
        raise KeyError((noise_kind, sigma))


def aggregate(noise_kind: str, sigma: float, psnrs: Sequence[float], ssims: Sequence[float]) -> MetricsRow:
    """Mean and population std of per-image metrics.

    Any infinite PSNR flags the row; mixing infinite and finite values is
    refused rather than averaged.
    """
    if not psnrs:
        raise ValueError("no images to aggregate")
    p = np.asarray(psnrs, dtype=np.float64)
    s = np.asarray(ssims, dtype=np.float64)
    inf = np.isinf(p)
    if inf.any():
        if not inf.all():
            log.warning("%s sigma=%g: %d of %d images have infinite PSNR; mean not reported",
                        noise_kind, sigma, int(inf.sum()), p.size)
        p_mean, p_std = math.inf, 0.0 if inf.all() else math.inf
    else:
        p_mean, p_std = float(p.mean()), float(p.std())
    return MetricsRow(noise_kind, float(sigma), p_mean, p_std, float(s.mean()), float(s.std()),
                      int(p.size), bool(inf.any()))


def evaluate(
    restorer: Restorer,
    clean_set: Sequence[np.ndarray],
    spec: NoiseSpec,
    sigmas: Sequence[float],
    metric_mode: str = "float",
) -> MetricsTable:
    """Corrupt every clean image at each sigma, restore it and score it.

    Noise for image ``i`` at level ``sigma`` is drawn from the stream
    ``eval:<kind>:<sigma>`` lane ``i`` of ``spec.seed``. ``metric_mode`` is
    ``"float"`` (unclipped float pair) or ``"uint8"`` (both sides clamped and
    quantized to 8 bits).
    """
    if not clean_set:
        raise ValueError("evaluation set is empty")
    if metric_mode not in ("float", "uint8"):
        raise ValueError(f"unknown metric mode {metric_mode!r}")
    table = MetricsTable()
    for sigma in sigmas:
        ps, ss = [], []
        for i, clean in enumerate(clean_set):
            rng = rng_stream(spec.seed, f"eval:{spec.kind}:{float(sigma)}", lane=i)
            noisy = add_noise(clean, spec.kind, float(sigma), rng)
            out = _apply(restorer, noisy)
            ref = clean
            if metric_mode == "uint8":
                out, ref = quantize(out), quantize(clean)
            ps.append(psnr(out, ref))
            ss.append(ssim(out, ref))
        table.rows.append(aggregate(spec.kind, sigma, ps, ss))
    return table


def _fmt(v: float, digits: int) -> str:
    return "inf" if math.isinf(v) else f"{v:.{digits}f}"


def render_table(t: MetricsTable) -> str:
    """Aligned text table: PSNR to 2 decimals, SSIM to 3."""
    if not t.rows:
        raise ValueError("empty metrics table")
    header = ("noise", "sigma", "PSNR (mean±std)", "SSIM (mean±std)", "n")
    lines = [header]
    for r in t.rows:
        lines.append((
            r.noise_kind, f"{r.sigma:g}",
            f"{_fmt(r.psnr_mean, 2)}±{_fmt(r.psnr_std, 2)}",
            f"{_fmt(r.ssim_mean, 3)}±{_fmt(r.ssim_std, 3)}",
            str(r.n_images),
        ))
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(wd) for c, wd in zip(row, widths)).rstrip() for row in lines) + "\n"


def table_to_csv(t: MetricsTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in t.rows:
        p_mean = "" if math.isinf(r.psnr_mean) else f"{r.psnr_mean:.2f}"
        p_std = "" if math.isinf(r.psnr_std) else f"{r.psnr_std:.2f}"
        writer.writerow([r.noise_kind, f"{r.sigma:g}", p_mean, p_std, f"{r.ssim_mean:.3f}",
                         f"{r.ssim_std:.3f}", r.n_images, int(r.psnr_inf)])
    return buf.getvalue()


def table_from_csv(text: str) -> MetricsTable:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        inf = rec.get("psnr_inf", "0") == "1"
        rows.append(MetricsRow(
            noise_kind=rec["noise_kind"], sigma=float(rec["sigma"]),
            psnr_mean=math.inf if rec["psnr_mean"] == "" else float(rec["psnr_mean"]),
            psnr_std=(math.inf if inf else 0.0) if rec["psnr_std"] == "" else float(rec["psnr_std"]),
            ssim_mean=float(rec["ssim_mean"]), ssim_std=float(rec["ssim_std"]),
            n_images=int(rec["n"]), psnr_inf=inf,
        ))
    return MetricsTable(rows)
