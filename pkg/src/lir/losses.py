"""Loss terms of the joint objective.

Every distance is mean-reduced over all elements, so the weights stay
balanced regardless of batch or patch size. Adversarial terms use the
non-saturating softplus form on raw logits.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F

from lir.imaging import BlurPyramidSpec, blur_tensor


class TrainingDivergence(FloatingPointError):
    """A loss became NaN or infinite; ``report`` holds the offending values."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class LossWeights:
    lambda_R: float = 1.0
    lambda_adv: float = 1.0
    lambda_cc: float = 10.0
    lambda_rec: float = 10.0
    lambda_bc: float = 5.0
    lambda_sc: float = 1.0
    lambda_kl: float = 0.01

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{f.name} must be a finite non-negative number, got {v}")


REPORT_FIELDS = (
    "cc_x", "cc_y", "repr_adv_g", "repr_adv_d", "dom_adv_x_g", "dom_adv_x_d",
    "dom_adv_y_g", "dom_adv_y_d", "rec_x", "rec_y", "bc", "sc", "kl", "total_g", "total_d",
)


@dataclass
class LossReport:
    cc_x: float = 0.0
    cc_y: float = 0.0
    repr_adv_g: float = 0.0
    repr_adv_d: float = 0.0
    dom_adv_x_g: float = 0.0
    dom_adv_x_d: float = 0.0
    dom_adv_y_g: float = 0.0
    dom_adv_y_d: float = 0.0
    rec_x: float = 0.0
    rec_y: float = 0.0
    bc: float = 0.0
    sc: float = 0.0
    kl: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_dict().values())

    def objective_terms(self) -> dict[str, float]:
        d = self.as_dict()
        d["rec"] = self.rec_x + self.rec_y
        return d


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same(a, b, "l1")
    return (a - b).abs().mean()


def cross_cycle_loss_x(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """L1 between a noisy input and its two-hop reconstruction."""
    return l1(x_hat, x)


def cross_cycle_loss_y(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    return l1(y_hat, y)


def repr_adv_loss(logits_x: torch.Tensor, logits_y: torch.Tensor, real: str = "clean"):
    """Representation-discriminator losses ``(d_loss, g_loss)``.

    With ``real="clean"`` the discriminator labels clean codes 1 and noisy codes
    0, and the encoder loss pulls noisy codes toward the clean statistic.
    ``real="noisy"`` swaps the roles.
    """
    if real == "noisy":
        logits_x, logits_y = logits_y, logits_x
    elif real != "clean":
        raise ValueError(f"real must be 'clean' or 'noisy', got {real!r}")
    d_loss = F.softplus(-logits_y).mean() + F.softplus(logits_x).mean()
    g_loss = F.softplus(-logits_x).mean()
    return d_loss, g_loss


def domain_adv_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor):
    """Image-domain GAN losses ``(d_loss, g_loss)`` from patch logit maps."""
    _check_same(real_logits, fake_logits, "domain_adv_loss")
    d_loss = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    g_loss = F.softplus(-fake_logits).mean()
    return d_loss, g_loss


def background_consistency(chi: torch.Tensor, chi_tilde: torch.Tensor,
                           spec: BlurPyramidSpec | None = None) -> torch.Tensor:
    """Weighted sum over blur levels of the L1 distance between blurred images."""
    _check_same(chi, chi_tilde, "background_consistency")
    spec = spec or BlurPyramidSpec()
    stds = spec.stds or (None,) * len(spec.levels)
    # blur is linear, so blurring the difference once per level is exact
    diff = chi - chi_tilde
    total = chi.new_zeros(())
    for (k, w), s in zip(spec.levels, stds):
        total = total + w * blur_tensor(diff, k, s).abs().mean()
    return total


def semantic_consistency(chi: torch.Tensor, chi_tilde: torch.Tensor, phi) -> torch.Tensor:
    """Mean squared distance between frozen deep features of the two batches."""
    _check_same(chi, chi_tilde, "semantic_consistency")
    if phi is None:
        raise ValueError("semantic_consistency needs a perceptual extractor")
    return F.mse_loss(phi(chi), phi(chi_tilde))


def self_reconstruction(x, x_self, y, y_self) -> torch.Tensor:
    return l1(x_self, x) + l1(y_self, y)


def kl_loss(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """Element-mean KL(N(mu, exp(log_var)) || N(0, 1))."""
    return 0.5 * (mu.pow(2) + log_var.exp() - log_var - 1.0).mean()


def total_objective(terms: Mapping[str, float | torch.Tensor], w: LossWeights):
    """Weighted generator and discriminator totals.

    ``terms`` needs the keys ``repr_adv_g, dom_adv_x_g, dom_adv_y_g, cc_x,
    cc_y, bc, sc, kl, repr_adv_d, dom_adv_x_d, dom_adv_y_d`` plus either
    ``rec`` or both ``rec_x`` and ``rec_y``.
    """
    t = dict(terms)
    if "rec" not in t:
        t["rec"] = t["rec_x"] + t["rec_y"]
    for k, v in t.items():
        val = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(val):
            raise TrainingDivergence(f"loss term {k} is not finite ({val})", t)
    total_g = (
        w.lambda_R * t["repr_adv_g"]
        + w.lambda_adv * (t["dom_adv_x_g"] + t["dom_adv_y_g"])
        + w.lambda_cc * (t["cc_x"] + t["cc_y"])
        + w.lambda_rec * t["rec"]
        + w.lambda_bc * t["bc"]
        + w.lambda_sc * t["sc"]
        + w.lambda_kl * t["kl"]
    )
    total_d = w.lambda_R * t["repr_adv_d"] + w.lambda_adv * (t["dom_adv_x_d"] + t["dom_adv_y_d"])
    return total_g, total_d
