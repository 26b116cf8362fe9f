"""TOML run configuration.

One document per run.  Sections and their keys::

    [data]        manifest, root
    [model]       kind ("toy"), image_size, channels, patch, width, embed_dim, layers, seed
    [train]       epochs, max_steps, batch_size, lr, weight_decay, lam, seed,
                  logit_scale, prompt_template, k_shots, val_fraction, grid_lr
    [lora]        targets
    [lora.vision] r, alpha, dropout
    [lora.text]   r, alpha, dropout
    [augment]     chain, mixup, cutmix, label_smoothing
    [sap]         k_syn, noising_step, sampler_steps, guidance_scale, attempt_factor,
                  retries, workers, negative_prompt, backend, caption_stamp, filter
    [sweep]       mode ("joint" | "sequential"), budget, and one list per searched RunConfig field
    [eval]        protocol ("default" | "base_new"), seeds
"""

from __future__ import annotations

import subprocess
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .errors import ConfigError
from .trainer import RunConfig

_TRAIN_KEYS = {
    "epochs", "max_steps", "batch_size", "lr", "weight_decay", "lam", "seed",
    "logit_scale", "prompt_template", "k_shots", "val_fraction", "grid_lr",
}
_AUG_KEYS = {"chain": "augmentation", "mixup": "mixup", "cutmix": "cutmix", "label_smoothing": "label_smoothing"}
_SAP_RUN_KEYS = {"k_syn", "noising_step", "sampler_steps", "guidance_scale"}
_SAP_EXTRA = {
    "attempt_factor": 20, "retries": 2, "workers": 1, "negative_prompt": "",
    "backend": "mock", "caption_stamp": 0.05, "filter": "prototype",
}
_MODEL_DEFAULTS = {"kind": "toy", "image_size": 32, "channels": 3, "patch": 8, "width": 32, "embed_dim": 16, "layers": 1, "seed": 0}
_FILTERS = ("prototype", "zero_shot", "none")


@dataclass
class Config:
    run: RunConfig
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=lambda: dict(_MODEL_DEFAULTS))
    sap: dict = field(default_factory=lambda: dict(_SAP_EXTRA))
    sweep: dict = field(default_factory=dict)
    eval: dict = field(default_factory=lambda: {"protocol": "default", "seeds": [0]})
    source: str | None = None

    def resolved(self) -> dict:
        return {
            "run": self.run.to_dict(),
            "data": dict(self.data),
            "model": dict(self.model),
            "sap": dict(self.sap),
            "sweep": dict(self.sweep),
            "eval": dict(self.eval),
        }


def _take(section: dict, allowed, where: str) -> dict:
    if not isinstance(section, dict):
        raise ConfigError(f"[{where}] must be a table")
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {sorted(unknown)}")
    return dict(section)


def parse_config(doc: dict, source: str | None = None) -> Config:
    top = {"data", "model", "train", "lora", "augment", "sap", "sweep", "eval"}
    unknown = set(doc) - top
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    run: dict = {}
    run.update(_take(doc.get("train", {}), _TRAIN_KEYS, "train"))
    lora = dict(doc.get("lora", {}))
    for enc in ("vision", "text"):
        sub = _take(lora.pop(enc, {}), {"r", "alpha", "dropout"}, f"lora.{enc}")
        run.update({f"{enc}_{k}": v for k, v in sub.items()})
    lora = _take(lora, {"targets"}, "lora")
    if "targets" in lora:
        run["lora_targets"] = tuple(lora["targets"])
    for k, v in _take(doc.get("augment", {}), _AUG_KEYS, "augment").items():
        run[_AUG_KEYS[k]] = v
    sap = _take(doc.get("sap", {}), _SAP_RUN_KEYS | set(_SAP_EXTRA), "sap")
    for k in _SAP_RUN_KEYS & set(sap):
        run[k] = sap.pop(k)
    sap = {**_SAP_EXTRA, **sap}
    if sap["filter"] not in _FILTERS:
        raise ConfigError(f"sap.filter: must be one of {_FILTERS}")

    model = {**_MODEL_DEFAULTS, **_take(doc.get("model", {}), set(_MODEL_DEFAULTS), "model")}
    if model["kind"] != "toy":
        raise ConfigError(f"model.kind: only 'toy' is built in, got {model['kind']!r}")
    data = _take(doc.get("data", {}), {"manifest", "root"}, "data")
    ev = {"protocol": "default", "seeds": [0], **_take(doc.get("eval", {}), {"protocol", "seeds"}, "eval")}
    if ev["protocol"] not in ("default", "base_new"):
        raise ConfigError("eval.protocol: must be 'default' or 'base_new'")
    sweep = dict(doc.get("sweep", {}))

    cfg = Config(RunConfig.from_dict(run), data, model, sap, sweep, ev, source)
    if source is not None and "manifest" in cfg.data:
        p = Path(cfg.data["manifest"])
        if not p.is_absolute():
            cfg.data["manifest"] = str(Path(source).parent / p)
    return cfg


def load_config(path: str | Path) -> Config:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc, str(path))


def version_stamp() -> str:
    """``disef <version>`` plus ``git describe`` of the working tree when available."""
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"disef {__version__}" + (f" ({desc})" if desc else "")
