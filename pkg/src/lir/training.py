"""Alternating adversarial training of the restoration framework."""

from __future__ import annotations

import base64
import csv
import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch

from lir.imaging import BlurPyramidSpec, rng_stream, sample_patches, to_tensor, torch_stream
from lir.losses import (
    REPORT_FIELDS,
    LossReport,
    LossWeights,
    TrainingDivergence,
    background_consistency,
    cross_cycle_loss_x,
    cross_cycle_loss_y,
    domain_adv_loss,
    kl_loss,
    l1,
    repr_adv_loss,
    semantic_consistency,
    total_objective,
)
from lir.models import (
    ModelConfig,
    ModelSet,
    NoiseCode,
    assign_tensors,
    generate_noisy,
    init_params,
    read_weight_file,
    write_weight_file,
)

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_noise_encoder", "no_repr_disc", "no_bcm")
EVAL_FIELDS = ("psnr_mean", "psnr_std", "ssim_mean", "ssim_std")
CURVE_FIELDS = ("iteration", "lr") + REPORT_FIELDS + EVAL_FIELDS


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    decay_interval: int = 10000
    decay_factor: float = 0.5
    max_iters: int = 100000
    patch: int = 64
    batch: int = 16
    seed: int = 0
    variant: str = "full"
    checkpoint_every: int = 10000
    log_every: int = 100
    eval_every: int = 0  # 0: evaluate at every log row when an eval set is given
    # which code distribution the representation discriminator treats as real
    repr_real: str = "clean"
    blur_levels: tuple = BlurPyramidSpec().levels
    blur_stds: tuple | None = None

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_interval <= 0:
            raise ValueError("decay_interval must be positive")
        if self.batch < 1 or self.patch < 1:
            raise ValueError("batch and patch must be >= 1")
        if self.max_iters < 0 or self.log_every < 1 or self.checkpoint_every < 0:
            raise ValueError("invalid iteration counts")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.repr_real not in ("clean", "noisy"):
            raise ValueError("repr_real must be 'clean' or 'noisy'")
        # normalize to hashable tuples (configs come back from JSON as lists)
        object.__setattr__(self, "blur_levels", tuple((int(k), float(w)) for k, w in self.blur_levels))
        if self.blur_stds is not None:
            object.__setattr__(self, "blur_stds", tuple(float(s) for s in self.blur_stds))
        BlurPyramidSpec(self.blur_levels, self.blur_stds)

    @property
    def blur_spec(self) -> BlurPyramidSpec:
        return BlurPyramidSpec(self.blur_levels, self.blur_stds)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["model"] = ModelConfig(**d.get("model", {}))
        return cls(**d)


def lr_schedule(cfg: TrainConfig, iteration: int) -> float:
    """``lr0 * decay_factor ** (iteration / decay_interval)``, real-valued exponent."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.lr0 * cfg.decay_factor ** (iteration / cfg.decay_interval)


def apply_ablation(cfg: TrainConfig, variant: str) -> TrainConfig:
    """Return ``cfg`` switched to one of the ablation variants.

    ``no_noise_encoder`` drops the noise branch (and its KL term),
    ``no_repr_disc`` zeroes the representation adversarial weight and freezes
    D_R, ``no_bcm`` zeroes the background consistency weight.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    w, model = cfg.weights, cfg.model
    if variant == "no_noise_encoder":
        model = dataclasses.replace(model, use_noise_encoder=False)
        w = dataclasses.replace(w, lambda_kl=0.0)
    elif variant == "no_repr_disc":
        w = dataclasses.replace(w, lambda_R=0.0)
    elif variant == "no_bcm":
        w = dataclasses.replace(w, lambda_bc=0.0)
    return dataclasses.replace(cfg, variant=variant, weights=w, model=model)


class TranslationBundle(NamedTuple):
    z_x: torch.Tensor
    z_y: torch.Tensor
    n_x: NoiseCode | None
    x_to_y: torch.Tensor
    y_to_x: torch.Tensor
    x_hat: torch.Tensor
    y_hat: torch.Tensor
    x_self: torch.Tensor
    y_self: torch.Tensor


def forward_translations(models: ModelSet, x: torch.Tensor, y: torch.Tensor,
                         generator: torch.Generator | None = None) -> TranslationBundle:
    """Cross translation, cross reconstruction and self reconstruction.

    The noise code for both noisy-domain decodes of the first hop comes from
    the current noisy batch ``x``.
    """
    if x.shape != y.shape:
        raise ValueError(f"x and y must share geometry, got {tuple(x.shape)} and {tuple(y.shape)}")
    e_n = models.E_N
    z_x = models.E_X(x)
    z_y = models.E_Y(y)
    n_x = e_n(x, generator) if e_n is not None else None
    x_to_y = models.G_Y(z_x)
    y_to_x = generate_noisy(models.G_X, z_y, n_x)
    n_back = e_n(y_to_x, generator) if e_n is not None else None
    x_hat = generate_noisy(models.G_X, models.E_Y(x_to_y), n_back)
    y_hat = models.G_Y(models.E_X(y_to_x))
    x_self = generate_noisy(models.G_X, z_x, n_x)
    y_self = models.G_Y(z_y)
    return TranslationBundle(z_x, z_y, n_x, x_to_y, y_to_x, x_hat, y_hat, x_self, y_self)


def discriminator_terms(models: ModelSet, b: TranslationBundle, x, y, cfg: TrainConfig) -> dict:
    """Discriminator-side losses on detached fakes and codes."""
    terms = {}
    terms["dom_adv_x_d"], _ = domain_adv_loss(models.D_X(x), models.D_X(b.y_to_x.detach()))
    terms["dom_adv_y_d"], _ = domain_adv_loss(models.D_Y(y), models.D_Y(b.x_to_y.detach()))
    if cfg.weights.lambda_R > 0:
        terms["repr_adv_d"], _ = repr_adv_loss(
            models.D_R(b.z_x.detach()), models.D_R(b.z_y.detach()), cfg.repr_real)
    else:
        terms["repr_adv_d"] = x.new_zeros(())
    return terms


def generator_terms(models: ModelSet, b: TranslationBundle, x, y, cfg: TrainConfig) -> dict:
    """Encoder/generator-side losses on the attached graph."""
    w = cfg.weights
    spec = cfg.blur_spec
    terms = {}
    _, terms["dom_adv_x_g"] = domain_adv_loss(models.D_X(x), models.D_X(b.y_to_x))
    _, terms["dom_adv_y_g"] = domain_adv_loss(models.D_Y(y), models.D_Y(b.x_to_y))
    if w.lambda_R > 0:
        _, terms["repr_adv_g"] = repr_adv_loss(models.D_R(b.z_x), models.D_R(b.z_y), cfg.repr_real)
    else:
        terms["repr_adv_g"] = x.new_zeros(())
    terms["cc_x"] = cross_cycle_loss_x(x, b.x_hat)
    terms["cc_y"] = cross_cycle_loss_y(y, b.y_hat)
    terms["rec_x"] = l1(b.x_self, x)
    terms["rec_y"] = l1(b.y_self, y)
    terms["bc"] = background_consistency(x, b.x_to_y, spec) + background_consistency(y, b.y_to_x, spec)
    if w.lambda_sc > 0:
        terms["sc"] = semantic_consistency(x, b.x_to_y, models.phi) + semantic_consistency(y, b.y_to_x, models.phi)
    else:
        terms["sc"] = x.new_zeros(())
    terms["kl"] = kl_loss(b.n_x.mu, b.n_x.log_var) if b.n_x is not None else x.new_zeros(())
    return terms


def compute_losses(models: ModelSet, x, y, cfg: TrainConfig, generator=None):
    """All loss terms for one minibatch: ``(terms, total_g, total_d)``."""
    b = forward_translations(models, x, y, generator)
    terms = {**discriminator_terms(models, b, x, y, cfg), **generator_terms(models, b, x, y, cfg)}
    total_g, total_d = total_objective(terms, cfg.weights)
    return terms, total_g, total_d


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr0, betas=(cfg.beta1, cfg.beta2), foreach=False)


@dataclass
class TrainState:
    models: ModelSet
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    iteration: int = 0
    noise_gen: torch.Generator | None = None
    noisy_rng: np.random.Generator | None = None
    clean_rng: np.random.Generator | None = None
    best: dict = field(default_factory=dict)


def init_state(cfg: TrainConfig, models: ModelSet | None = None) -> TrainState:
    models = models if models is not None else init_params(cfg.model, cfg.seed)
    g_params = models.generator_parameters()
    d_params = [p for n in ("D_X", "D_Y") for p in getattr(models, n).parameters()]
    if cfg.weights.lambda_R > 0:
        d_params += list(models.D_R.parameters())
    return TrainState(
        models=models,
        opt_g=_adam(g_params, cfg),
        opt_d=_adam(d_params, cfg),
        noise_gen=torch_stream(cfg.seed, "noise_code"),
        noisy_rng=rng_stream(cfg.seed, "patches", lane=0),
        clean_rng=rng_stream(cfg.seed, "patches", lane=1),
    )


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _requires_grad(params, flag: bool):
    for p in params:
        p.requires_grad_(flag)


def _report(terms: dict, total_g, total_d) -> LossReport:
    vals = {k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for k, v in terms.items()}
    vals["total_g"] = float(total_g.detach())
    vals["total_d"] = float(total_d.detach())
    return LossReport(**{k: vals[k] for k in REPORT_FIELDS})


def train_step(state: TrainState, x: torch.Tensor, y: torch.Tensor, cfg: TrainConfig):
    """One discriminator update followed by one encoder/generator update.

    Both updates share a single forward pass of the translation bundle; the
    generator losses are evaluated against the freshly updated discriminators.
    Returns ``(state, LossReport)``; raises TrainingDivergence on NaN/inf.
    """
    models = state.models
    lr = lr_schedule(cfg, state.iteration)
    _set_lr(state.opt_g, lr)
    _set_lr(state.opt_d, lr)
    d_params = [p for g in state.opt_d.param_groups for p in g["params"]]
    g_params = [p for g in state.opt_g.param_groups for p in g["params"]]

    b = forward_translations(models, x, y, state.noise_gen)

    d_terms = discriminator_terms(models, b, x, y, cfg)
    w = cfg.weights
    total_d = w.lambda_R * d_terms["repr_adv_d"] + w.lambda_adv * (d_terms["dom_adv_x_d"] + d_terms["dom_adv_y_d"])
    if not torch.isfinite(total_d):
        raise TrainingDivergence(f"discriminator loss not finite at iteration {state.iteration}",
                                 {k: float(v.detach()) for k, v in d_terms.items()})
    state.opt_d.zero_grad(set_to_none=True)
    total_d.backward()
    state.opt_d.step()

    _requires_grad(d_params, False)
    try:
        g_terms = generator_terms(models, b, x, y, cfg)
        terms = {**d_terms, **g_terms}
        total_g, _ = total_objective(terms, w)
        state.opt_g.zero_grad(set_to_none=True)
        total_g.backward()
    finally:
        _requires_grad(d_params, True)
    state.opt_g.step()
    for p in g_params:
        p.grad = None

    report = _report(terms, total_g, total_d)
    if not report.is_finite():
        raise TrainingDivergence(f"non-finite loss at iteration {state.iteration}", report)
    state.iteration += 1
    return state, report


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _gen_state_b64(g: torch.Generator) -> str:
    return base64.b64encode(g.get_state().numpy().tobytes()).decode("ascii")


def _gen_from_b64(s: str) -> torch.Generator:
    g = torch.Generator()
    g.set_state(torch.frombuffer(bytearray(base64.b64decode(s)), dtype=torch.uint8))
    return g


def _np_rng_from_state(st: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = st
    return np.random.Generator(bg)


def _optimizer_tensors(state: TrainState) -> tuple[dict, dict]:
    names = {id(p): n for n, p in state.models.named_parameters()}
    tensors, steps = {}, {}
    for tag, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
        for p in (p for g in opt.param_groups for p in g["params"]):
            st = opt.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            tensors[f"{tag}/{n}/exp_avg"] = st["exp_avg"]
            tensors[f"{tag}/{n}/exp_avg_sq"] = st["exp_avg_sq"]
            steps[f"{tag}/{n}"] = int(float(st["step"]))
    return tensors, steps


def save_checkpoint(state: TrainState, cfg: TrainConfig, path, extra: dict | None = None) -> None:
    tensors = dict(state.models.state_dict())
    opt_tensors, steps = _optimizer_tensors(state)
    tensors.update(opt_tensors)
    echo = {
        "model_config": state.models.config.to_dict(),
        "train_config": cfg.to_dict(),
        "iteration": state.iteration,
        "master_seed": cfg.seed,
        "adam_steps": steps,
        "rng": {
            "noise_code": _gen_state_b64(state.noise_gen),
            "noisy_patches": state.noisy_rng.bit_generator.state,
            "clean_patches": state.clean_rng.bit_generator.state,
        },
        "best": state.best,
        **(extra or {}),
    }
    write_weight_file(path, tensors, echo)


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    tensors, echo = read_weight_file(path)
    if "train_config" not in echo:
        raise ValueError(f"{path}: not a training checkpoint (no train_config block)")
    cfg = TrainConfig.from_dict(echo["train_config"])
    models = ModelSet(dataclasses.replace(cfg.model, phi_weights=""))
    models.config = cfg.model
    assign_tensors(models, {k: v for k, v in tensors.items() if "/" not in k}, path)
    models.phi.freeze()
    state = init_state(cfg, models)
    names = dict(models.named_parameters())
    for key, step in echo.get("adam_steps", {}).items():
        tag, pname = key.split("/", 1)
        opt = state.opt_g if tag == "opt_g" else state.opt_d
        p = names[pname]
        opt.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": tensors[f"{key}/exp_avg"].clone(),
            "exp_avg_sq": tensors[f"{key}/exp_avg_sq"].clone(),
        }
    rng = echo["rng"]
    state.noise_gen = _gen_from_b64(rng["noise_code"])
    state.noisy_rng = _np_rng_from_state(rng["noisy_patches"])
    state.clean_rng = _np_rng_from_state(rng["clean_patches"])
    state.iteration = int(echo["iteration"])
    state.best = echo.get("best", {})
    return state, cfg


def phi_digest(models: ModelSet) -> str:
    h = hashlib.sha256()
    for name, t in sorted(models.phi.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    state: TrainState
    curves: list[dict]
    final_weights: Path | None = None
    curve_file: Path | None = None
    checkpoints: list[Path] = field(default_factory=list)


def _image_digest(img: np.ndarray) -> bytes:
    return hashlib.blake2b(np.ascontiguousarray(img).tobytes(), digest_size=16).digest()


def _eval_pairs(models: ModelSet, eval_set) -> dict:
    from lir.imaging import psnr, ssim
    from lir.restoration import restore

    ps, ss = [], []
    for noisy, clean in eval_set:
        out = restore(models, noisy)
        ps.append(psnr(out, clean))
        ss.append(ssim(out, clean))
    return {"psnr_mean": float(np.mean(ps)), "psnr_std": float(np.std(ps)),
            "ssim_mean": float(np.mean(ss)), "ssim_std": float(np.std(ss))}


def write_curves(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in CURVE_FIELDS})


def read_curves(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        rows = []
        for r in reader:
            rows.append({k: (None if v == "" else (int(v) if k == "iteration" else float(v))) for k, v in r.items()})
        return rows


def run_training(
    cfg: TrainConfig,
    noisy_pool: Sequence[np.ndarray],
    clean_pool: Sequence[np.ndarray],
    eval_set: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
    out_dir=None,
    resume=None,
    callback: Callable[[int, LossReport], None] | None = None,
    echo_extra: dict | None = None,
) -> TrainResult:
    """Train for ``cfg.max_iters`` iterations on independently drawn unpaired batches.

    With ``out_dir`` set, writes ``curves.csv``, ``ckpt_XXXXXXX.lirw`` every
    ``checkpoint_every`` iterations and ``final.lirw``. ``resume`` continues
    from a checkpoint file; curve rows already on disk up to that iteration
    are kept. ``echo_extra`` entries are added to every checkpoint's JSON echo.
    """
    if not noisy_pool or not clean_pool:
        raise ValueError("both image pools must be non-empty")
    clean_digests = {_image_digest(c) for c in clean_pool}
    if any(_image_digest(n) in clean_digests for n in noisy_pool):
        raise ValueError("noisy and clean pools must be disjoint")

    if resume is not None:
        state, saved_cfg = load_checkpoint(resume)
        cfg = dataclasses.replace(saved_cfg, max_iters=cfg.max_iters)
    else:
        state = init_state(cfg)

    out = Path(out_dir) if out_dir is not None else None
    curves: list[dict] = []
    curve_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        curve_file = out / "curves.csv"
        if resume is not None and curve_file.exists():
            curves = [r for r in read_curves(curve_file) if r["iteration"] <= state.iteration]
    result = TrainResult(state=state, curves=curves, curve_file=curve_file)
    eval_every = cfg.eval_every or cfg.log_every

    def checkpoint(path):
        save_checkpoint(state, cfg, path, echo_extra)
        result.checkpoints.append(path)

    if out is not None and resume is None and cfg.checkpoint_every:
        checkpoint(out / f"ckpt_{0:07d}.lirw")

    while state.iteration < cfg.max_iters:
        x = to_tensor(sample_patches(noisy_pool, cfg.patch, cfg.batch, state.noisy_rng))
        y = to_tensor(sample_patches(clean_pool, cfg.patch, cfg.batch, state.clean_rng))
        lr = lr_schedule(cfg, state.iteration)
        try:
            state, report = train_step(state, x, y, cfg)
        except TrainingDivergence:
            if curve_file is not None:
                write_curves(curves, curve_file)
            raise
        it = state.iteration
        if callback is not None:
            callback(it, report)
        if it % cfg.log_every == 0:
            row = {"iteration": it, "lr": lr, **report.as_dict()}
            if eval_set and it % eval_every == 0:
                row.update(_eval_pairs(state.models, eval_set))
                if row["psnr_mean"] > state.best.get("psnr_mean", -math.inf):
                    state.best = {"iteration": it, "psnr_mean": row["psnr_mean"]}
            curves.append(row)
            log.info("iter %d lr %.3g total_g %.4f total_d %.4f", it, lr, report.total_g, report.total_d)
            if curve_file is not None:
                write_curves(curves, curve_file)
        if out is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            checkpoint(out / f"ckpt_{it:07d}.lirw")

    if out is not None:
        if curve_file is not None:
            write_curves(curves, curve_file)
        result.final_weights = out / "final.lirw"
        save_checkpoint(state, cfg, result.final_weights, echo_extra)
    return result
