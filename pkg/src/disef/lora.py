"""Low-rank adapters on the query/value projections of self-attention layers.

``LoRALinear`` wraps a frozen ``nn.Linear`` computing ``W i + b`` and adds the
branch ``(alpha / r) * B A drop(i)``.  ``B`` starts at zero, so a freshly
injected model computes exactly the function of the base model.
"""

from __future__ import annotations

import fnmatch
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, FormatError, StateError, StructuralError

ENCODERS = ("vision", "text")
PROJECTION_PATTERNS = ("*attn.q_proj", "*attn.v_proj")
CHECKPOINT_VERSION = 1


@dataclass
class LoRAConfig:
    r: int = 16
    alpha: float = 32.0
    dropout: float = 0.1
    targets: tuple[str, ...] = ENCODERS
    seed: int = 0

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if self.r < 1:
            raise ConfigError(f"lora r must be >= 1, got {self.r}")
        if not self.alpha > 0:
            raise ConfigError(f"lora alpha must be > 0, got {self.alpha}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"lora dropout must be in [0, 1), got {self.dropout}")
        unknown = set(self.targets) - set(ENCODERS)
        if unknown:
            raise ConfigError(f"unknown lora targets {sorted(unknown)}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.r


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, r: int, alpha: float, dropout: float = 0.0, generator=None):
        super().__init__()
        m, n = base.out_features, base.in_features
        if r > min(m, n):
            raise ConfigError(f"lora rank {r} exceeds min(m, n) = {min(m, n)}")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.r, self.alpha = r, float(alpha)
        self.scaling = self.alpha / r
        w = base.weight
        a = torch.randn(r, n, generator=generator, dtype=torch.float64) / r
        self.lora_A = nn.Parameter(a.to(device=w.device, dtype=w.dtype))
        self.lora_B = nn.Parameter(torch.zeros(m, r, device=w.device, dtype=w.dtype))
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        self.merged = False

    @property
    def weight(self):
        return self.base.weight

    def delta_weight(self) -> torch.Tensor:
        return self.scaling * (self.lora_B @ self.lora_A)

    def branch(self, x):
        return self.scaling * ((self.dropout(x) @ self.lora_A.T) @ self.lora_B.T)

    def forward(self, x):
        if self.merged:
            return self.base(x)
        return self.base(x) + self.branch(x)

    @torch.no_grad()
    def merge(self):
        if self.merged:
            raise StateError("adapter is already merged")
        self.base.weight += self.delta_weight()
        self.merged = True

    @torch.no_grad()
    def unmerge(self):
        if not self.merged:
            raise StateError("adapter is not merged")
        self.base.weight -= self.delta_weight()
        self.merged = False

    def extra_repr(self):
        return f"r={self.r}, alpha={self.alpha}, merged={self.merged}"


def lora_forward(adapter: LoRALinear, x: torch.Tensor) -> torch.Tensor:
    if adapter.merged:
        raise StateError("lora_forward called on a merged adapter")
    return adapter(x)


def merge(adapter: LoRALinear):
    adapter.merge()


def unmerge(adapter: LoRALinear):
    adapter.unmerge()


@dataclass
class AdapterRegistry:
    adapters: dict[str, LoRALinear] = field(default_factory=dict)
    configs: dict[str, LoRAConfig] = field(default_factory=dict)

    def __len__(self):
        return len(self.adapters)

    def __iter__(self):
        return iter(self.adapters.items())

    def merge_all(self):
        for a in self.adapters.values():
            a.merge()

    def unmerge_all(self):
        for a in self.adapters.values():
            a.unmerge()

    def state_dict(self) -> dict[str, torch.Tensor]:
        out = {}
        for path, a in self.adapters.items():
            out[f"{path}.lora_A"] = a.lora_A.detach().clone()
            out[f"{path}.lora_B"] = a.lora_B.detach().clone()
        return out

    @torch.no_grad()
    def load_state_dict(self, state: dict[str, torch.Tensor]):
        expected = set(self.state_dict())
        if set(state) != expected:
            raise StructuralError("adapter state does not match the registry layout")
        for path, a in self.adapters.items():
            for name in ("lora_A", "lora_B"):
                src = torch.as_tensor(state[f"{path}.{name}"])
                dst = getattr(a, name)
                if src.shape != dst.shape:
                    raise StructuralError(f"{path}.{name}: shape {tuple(src.shape)} != {tuple(dst.shape)}")
                dst.copy_(src)


def _parent(model: nn.Module, path: str):
    *parents, leaf = path.split(".")
    mod = model
    for p in parents:
        mod = getattr(mod, p)
    return mod, leaf


def inject_adapters(model: nn.Module, cfg: LoRAConfig, per_encoder: dict[str, LoRAConfig] | None = None) -> AdapterRegistry:
    """Wrap every Q/V projection of the targeted encoders and freeze everything else.

    ``per_encoder`` overrides ``cfg`` for individual encoders (e.g. a larger
    vision rank).  Returns a registry keyed by module path.
    """
    per_encoder = dict(per_encoder or {})
    if not cfg.targets:
        raise ConfigError("lora targets must name at least one encoder")
    for p in model.parameters():
        p.requires_grad_(False)

    registry = AdapterRegistry()
    for encoder in cfg.targets:
        enc_cfg = per_encoder.get(encoder, cfg)
        registry.configs[encoder] = enc_cfg
        submodule = getattr(model, encoder, None)
        if submodule is None:
            raise StructuralError(f"model has no {encoder!r} encoder")
        paths = [
            name
            for name, mod in submodule.named_modules()
            if isinstance(mod, nn.Linear) and any(fnmatch.fnmatchcase(name, pat) for pat in PROJECTION_PATTERNS)
        ]
        if not paths:
            raise StructuralError(f"{encoder} encoder exposes no attention q_proj/v_proj layers")
        gen = torch.Generator().manual_seed(enc_cfg.seed * 1000 + ENCODERS.index(encoder))
        for name in paths:
            parent, leaf = _parent(submodule, name)
            adapter = LoRALinear(getattr(parent, leaf), enc_cfg.r, enc_cfg.alpha, enc_cfg.dropout, generator=gen)
            setattr(parent, leaf, adapter)
            registry.adapters[f"{encoder}.{name}"] = adapter
    return registry


def trainable_parameters(registry: AdapterRegistry) -> list[nn.Parameter]:
    params = []
    for _, a in registry:
        params.extend([a.lora_A, a.lora_B])
    return params


def count_parameters(params) -> int:
    return sum(p.numel() for p in params)


def save_adapters(registry: AdapterRegistry, path: str | Path):
    """Write ``{location path -> (A, B, r, alpha)}`` as an ``.npz`` container.

    Array keys are ``<path>::A`` and ``<path>::B``; the ``__meta__`` entry is a
    JSON document with the format version, per-adapter ``r``/``alpha``/shapes
    and the per-encoder configs.
    """
    arrays = {}
    meta = {"version": CHECKPOINT_VERSION, "adapters": {}, "configs": {}}
    for loc, a in registry:
        arrays[f"{loc}::A"] = a.lora_A.detach().cpu().numpy()
        arrays[f"{loc}::B"] = a.lora_B.detach().cpu().numpy()
        meta["adapters"][loc] = {
            "r": a.r,
            "alpha": a.alpha,
            "in_features": a.base.in_features,
            "out_features": a.base.out_features,
        }
    for enc, c in registry.configs.items():
        meta["configs"][enc] = asdict(c)
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_adapter_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as data:
        if "__meta__" not in data.files:
            raise FormatError(f"{path}: not an adapter checkpoint")
        meta = json.loads(str(data["__meta__"]))
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported adapter checkpoint version {meta.get('version')}")
    return meta, arrays


def load_adapters(registry: AdapterRegistry, path: str | Path):
    """Load a checkpoint onto an injected model; any layout mismatch is an error."""
    meta, arrays = read_adapter_checkpoint(path)
    if set(meta["adapters"]) != set(registry.adapters):
        missing = sorted(set(registry.adapters) ^ set(meta["adapters"]))
        raise StructuralError(f"checkpoint/model adapter locations differ: {missing[:4]}")
    for loc, a in registry:
        info = meta["adapters"][loc]
        if (info["r"], info["in_features"], info["out_features"]) != (a.r, a.base.in_features, a.base.out_features) or info["alpha"] != a.alpha:
            raise StructuralError(f"{loc}: checkpoint adapter shape/scale does not match the model")
    registry.load_state_dict({f"{loc}.lora_{k}": torch.from_numpy(arrays[f"{loc}::{k}"]) for loc in registry.adapters for k in "AB"})
