"""Fine-tuning loop: cosine logits, per-origin cross-entropy, weighted real/synthetic loss."""

from __future__ import annotations

import contextlib
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .data import Batch, Loader, mix_batch, mixed_targets
from .errors import ConfigError, InputError, TrainingDivergedError
from .lora import AdapterRegistry, LoRAConfig, save_adapters, trainable_parameters
from .vlm_core import DualEncoder, compute_logits, encode_class_prompts

log = logging.getLogger(__name__)

LR_GRID = tuple(2.0**-i for i in range(8, 16))
BS_GRID = (16, 32, 64, 128, 256)


@dataclass
class RunConfig:
    """Every per-dataset hyperparameter of a run, flat so it maps 1:1 onto config keys."""

    epochs: int = 50
    max_steps: int | None = None
    batch_size: int = 32
    lr: float = 2.0**-12
    weight_decay: float = 1e-3
    lam: float = 0.8
    vision_r: int = 16
    vision_alpha: float = 32.0
    vision_dropout: float = 0.1
    text_r: int = 16
    text_alpha: float = 32.0
    text_dropout: float = 0.1
    lora_targets: tuple[str, ...] = ("vision", "text")
    augmentation: str = "none"
    mixup: float = 0.0
    cutmix: float = 0.0
    label_smoothing: float = 0.0
    noising_step: int = 15
    sampler_steps: int = 20
    guidance_scale: float = 8.0
    k_shots: int = 16
    k_syn: int = 64
    seed: int = 0
    logit_scale: float = 100.0
    prompt_template: str = "a photo of a {}."
    grid_lr: bool = False
    val_fraction: float = 0.2

    def __post_init__(self):
        self.lora_targets = tuple(self.lora_targets)
        self.validate()

    def validate(self):
        def bad(name, msg):
            raise ConfigError(f"{name}: {msg}")

        if not 0.5 <= self.lam <= 1.0:
            bad("lam", f"real/synthetic weight must lie in [0.5, 1], got {self.lam}")
        if self.epochs < 1:
            bad("epochs", "must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            bad("max_steps", "must be >= 1")
        if self.batch_size < 1:
            bad("batch_size", "must be >= 1")
        if self.lr < 0:
            bad("lr", "must be >= 0")
        if self.grid_lr and not any(math.isclose(self.lr, g, rel_tol=1e-12) for g in LR_GRID):
            bad("lr", "grid mode requires lr = 2^-i with i in [8, 15]")
        if self.weight_decay < 0:
            bad("weight_decay", "must be >= 0")
        for name in ("mixup", "cutmix"):
            if getattr(self, name) < 0:
                bad(name, "must be >= 0")
        if not 0 <= self.label_smoothing < 1:
            bad("label_smoothing", "must lie in [0, 1)")
        if not 0 <= self.noising_step <= self.sampler_steps:
            bad("noising_step", f"must lie in [0, {self.sampler_steps}]")
        if self.k_shots < 1:
            bad("k_shots", "must be >= 1")
        if self.k_syn < 1:
            bad("k_syn", "must be >= 1")
        if self.logit_scale <= 0:
            bad("logit_scale", "must be > 0")
        if self.prompt_template.count("{}") != 1:
            bad("prompt_template", "must contain exactly one '{}'")
        for enc in ("vision", "text"):
            try:
                self.lora_config(enc)
            except ConfigError as exc:
                bad(f"{enc}_lora", str(exc))

    def lora_config(self, encoder: str) -> LoRAConfig:
        return LoRAConfig(
            r=getattr(self, f"{encoder}_r"),
            alpha=getattr(self, f"{encoder}_alpha"),
            dropout=getattr(self, f"{encoder}_dropout"),
            targets=self.lora_targets,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- losses


def cross_entropy(logits: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """``-sum(target * log_softmax(logits))`` per row; targets may be soft."""
    target = torch.as_tensor(target, dtype=logits.dtype)
    if target.shape != logits.shape:
        raise InputError(f"target shape {tuple(target.shape)} != logits shape {tuple(logits.shape)}")
    sums = target.sum(dim=-1)
    if bool((target < 0).any()) or not torch.allclose(sums, torch.ones_like(sums), atol=1e-6):
        raise InputError("target rows must be probability vectors")
    per_item = -(target * torch.log_softmax(logits, dim=-1)).sum(dim=-1)
    if reduction == "none":
        return per_item
    if reduction == "sum":
        return per_item.sum()
    return per_item.mean()


def combined_loss(l_real, l_syn, lam: float):
    """``lam * l_real + (1 - lam) * l_syn``; ``l_real`` alone when there is no synthetic term."""
    if not 0.5 <= lam <= 1.0:
        raise ConfigError(f"lam must lie in [0.5, 1], got {lam}")
    if l_syn is None:
        return l_real
    return lam * l_real + (1.0 - lam) * l_syn


def cosine_lr(step: int, total: int, base_lr: float) -> float:
    if total <= 0:
        raise ConfigError("total steps must be positive")
    if not 0 <= step <= total:
        raise InputError(f"step {step} outside [0, {total}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total))


# ---------------------------------------------------------------- training


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_metric: float | None = None
    best_step: int | None = None
    optimizer: dict = field(default_factory=dict, repr=False)
    rng_state: dict = field(default_factory=dict, repr=False)
    adapter_path: str | None = None
    history: list[dict] = field(default_factory=list, repr=False)

    def save(self, path: str | Path):
        torch.save(asdict(self), path)

    @classmethod
    def load(cls, path: str | Path) -> "TrainState":
        return cls(**torch.load(path, weights_only=False))


def batch_loss(model: DualEncoder, batch: Batch, class_names: Sequence[str], cfg: RunConfig, rng: np.random.Generator):
    """Returns ``(total, l_real, l_syn)`` for one batch; ``l_syn`` is ``None`` without synthetic items.

    Returns ``None`` when nothing in the batch carries weight.
    """
    if cfg.lam == 1.0 and bool(batch.synthetic.any()):
        # Synthetic items carry zero weight; skipping them keeps the real-only
        # trajectory bit-identical.
        keep = ~batch.synthetic
        batch = Batch(batch.images[keep], batch.labels[keep], batch.synthetic[keep])
        if len(batch) == 0:
            return None
    n = len(class_names)
    mixed = mix_batch(batch, cfg.mixup, cfg.cutmix, rng)
    target = mixed_targets(mixed, cfg.label_smoothing, n)
    # Text tower carries adapters too, so class features are recomputed every step.
    f_t = encode_class_prompts(model, class_names, cfg.prompt_template)
    f_v = model.encode_images(mixed.images)
    logits = compute_logits(f_v, f_t, cfg.logit_scale)
    per_item = cross_entropy(logits, target, reduction="none")
    syn = mixed.synthetic
    l_real = per_item[~syn].mean() if bool((~syn).any()) else None
    l_syn = per_item[syn].mean() if bool(syn.any()) else None
    if l_real is None:
        # Synthetic-only batch keeps its (1 - lam) weight.
        total = (1.0 - cfg.lam) * l_syn
    else:
        total = combined_loss(l_real, l_syn, cfg.lam)
    return total, l_real, l_syn


@dataclass
class TrainResult:
    state: TrainState
    losses: list[float]
    adapter_state: dict


def train(
    model: DualEncoder,
    registry: AdapterRegistry,
    loader: Loader | Callable[[int], Iterable[Batch]],
    class_names: Sequence[str],
    cfg: RunConfig,
    *,
    validate: Callable[[DualEncoder], float] | None = None,
    out_dir: str | Path | None = None,
    callback: Callable[[TrainState, AdapterRegistry], None] | None = None,
) -> TrainResult:
    """AdamW over the adapter parameters with a warmup-free cosine schedule.

    ``loader`` is a ``Loader`` or any ``epoch -> batches`` callable.  When
    ``validate`` is given it is called after every epoch and the best-scoring
    adapter weights are kept (and written to ``out_dir/adapters.npz``).  Without
    it the final weights are used.  ``out_dir`` also receives ``train_log.jsonl``
    and ``train_state.pt``.  ``callback`` runs after every optimizer step.
    """
    epoch_batches = loader.epoch if isinstance(loader, Loader) else loader
    params = trainable_parameters(registry)
    if not params:
        raise ConfigError("no trainable adapter parameters")
    frozen = [p for p in model.parameters() if not any(p is q for q in params)]
    if any(p.requires_grad for p in frozen):
        raise ConfigError("base model parameters must be frozen before training")

    per_epoch = len(loader) if isinstance(loader, Loader) else None
    if cfg.max_steps is not None:
        total = cfg.max_steps
    elif per_epoch is not None:
        total = cfg.epochs * per_epoch
    else:
        raise ConfigError("max_steps is required when the loader length is unknown")

    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 7])
    state = TrainState()
    out = Path(out_dir) if out_dir is not None else None
    losses: list[float] = []
    best = registry.state_dict()

    with contextlib.ExitStack() as stack:
        log_fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            log_fh = stack.enter_context(open(out / "train_log.jsonl", "w"))
        stack.enter_context(torch.random.fork_rng(devices=[]))
        torch.manual_seed(cfg.seed)  # adapter dropout masks
        stack.callback(model.eval)
        model.train()
        done = False
        for epoch in itertools.count():
            if cfg.max_steps is None and epoch >= cfg.epochs:
                break
            state.epoch = epoch
            for batch in epoch_batches(epoch):
                lr = cosine_lr(state.step, total, cfg.lr)
                for g in opt.param_groups:
                    g["lr"] = lr
                terms = batch_loss(model, batch, class_names, cfg, rng)
                if terms is None:
                    continue
                loss, l_real, l_syn = terms
                if not torch.isfinite(loss):
                    snap = None
                    if out is not None:
                        snap = out / "diverged_adapters.npz"
                        save_adapters(registry, snap)
                    raise TrainingDivergedError(f"non-finite loss at step {state.step} (epoch {epoch})", snap)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                rec = {
                    "step": state.step,
                    "lr": lr,
                    "L_real": None if l_real is None else l_real.item(),
                    "L_syn": None if l_syn is None else l_syn.item(),
                    "L_total": loss.item(),
                }
                state.history.append(rec)
                losses.append(rec["L_total"])
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                state.step += 1
                if callback is not None:
                    callback(state, registry)
                if state.step >= total:
                    done = True
                    break
            if validate is not None:
                model.eval()
                score = float(validate(model))
                model.train()
                if state.best_metric is None or score > state.best_metric:
                    state.best_metric, state.best_step = score, state.step
                    best = registry.state_dict()
            if done:
                break

    if validate is None:
        best = registry.state_dict()
    else:
        registry.load_state_dict(best)
    state.optimizer = opt.state_dict()
    state.rng_state = {"numpy": rng.bit_generator.state}
    if out is not None:
        save_adapters(registry, out / "adapters.npz")
        state.adapter_path = str(out / "adapters.npz")
        state.save(out / "train_state.pt")
    return TrainResult(state, losses, best)


# ------------------------------------------------------------- grid search


def _key(cfg: RunConfig):
    return json.dumps(cfg.to_dict(), sort_keys=True)


def expand_grid(base: RunConfig, space: dict[str, Sequence], mode: str = "joint") -> list[RunConfig]:
    """Candidate configs: full product (``joint``) or one axis at a time (``sequential``)."""
    if not space:
        raise ConfigError("search space is empty")
    for k, v in space.items():
        if not hasattr(base, k):
            raise ConfigError(f"unknown search key {k!r}")
        if len(v) == 0:
            raise ConfigError(f"search axis {k!r} is empty")
    if mode == "joint":
        keys = list(space)
        cands = [replace(base, **dict(zip(keys, vals))) for vals in itertools.product(*(space[k] for k in keys))]
    elif mode == "sequential":
        cands = [replace(base, **{k: v}) for k, vals in space.items() for v in vals]
    else:
        raise ConfigError(f"unknown grid mode {mode!r}")
    seen, unique = set(), []
    for c in cands:
        k = _key(c)
        if k not in seen:
            seen.add(k)
            unique.append(c)
    return unique


def grid_search(
    base: RunConfig,
    space: dict[str, Sequence],
    evaluate: Callable[[RunConfig], float],
    mode: str = "joint",
    budget: int | None = None,
) -> list[tuple[RunConfig, float]]:
    """Evaluate each distinct config once; rank by score, ties broken by lower lr then smaller batch.

    In ``sequential`` mode axes are searched one after another, each starting from
    the best config found so far.
    """
    if mode == "sequential":
        results: dict[str, tuple[RunConfig, float]] = {}
        current = base
        for k, vals in space.items():
            for c in expand_grid(current, {k: vals}):
                if _key(c) not in results and (budget is None or len(results) < budget):
                    results[_key(c)] = (c, float(evaluate(c)))
            current = _rank(list(results.values()))[0][0]
        return _rank(list(results.values()))
    cands = expand_grid(base, space, mode)
    if budget is not None:
        cands = cands[:budget]
    return _rank([(c, float(evaluate(c))) for c in cands])


def _rank(scored):
    return sorted(scored, key=lambda cs: (-cs[1], cs[0].lr, cs[0].batch_size))
