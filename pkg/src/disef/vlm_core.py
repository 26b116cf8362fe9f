"""Dual-encoder vision-language model: encoders, zero-shot classifier, cosine logits.

A small reference model ships here so everything can be exercised on CPU.  Both
encoders are built from the same pieces: an input embedding, a stack of
single-head self-attention blocks whose projections are named
``blocks.<k>.attn.{q,k,v,out}_proj`` (the naming contract LoRA injection relies
on), mean pooling and a bias-free output projection into the shared space.
Pre-trained backbones can be attached by exposing ``vision``/``text`` submodules
with the same projection names and the ``encode_images``/``encode_texts`` calls.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InputError, NumericalError

DEFAULT_TEMPLATE = "a photo of a {}."
DEFAULT_LOGIT_SCALE = 100.0

_PAD, _UNK = 0, 1
_WORD_RE = re.compile(r"[a-z0-9]+")


def fill_template(template: str, class_name: str) -> str:
    if template.count("{}") != 1:
        raise InputError(f"prompt template must contain exactly one '{{}}' slot: {template!r}")
    if not class_name or not class_name.strip():
        raise InputError("class name must be a nonempty string")
    return template.replace("{}", class_name)


class Tokenizer:
    """Whitespace tokenizer over a fixed vocabulary; unseen words map to one bucket."""

    def __init__(self, vocab: Sequence[str]):
        words = []
        for w in vocab:
            for tok in self.split(w):
                if tok not in words:
                    words.append(tok)
        self.words = words
        self.index = {w: i + 2 for i, w in enumerate(words)}

    @staticmethod
    def split(text: str) -> list[str]:
        return _WORD_RE.findall(text.lower())

    def __len__(self):
        return len(self.words) + 2

    def encode(self, text: str) -> list[int]:
        ids = [self.index.get(tok, _UNK) for tok in self.split(text)]
        return ids or [_UNK]

    def batch(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        encoded = [self.encode(t) for t in texts]
        width = max(len(e) for e in encoded)
        ids = torch.full((len(encoded), width), _PAD, dtype=torch.long)
        for row, e in enumerate(encoded):
            ids[row, : len(e)] = torch.tensor(e)
        return ids, ids != _PAD


class SelfAttention(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.out_proj = nn.Linear(width, width)
        self.scale = 1.0 / math.sqrt(width)

    def forward(self, h, mask=None):
        q, k, v = self.q_proj(h), self.k_proj(h), self.v_proj(h)
        scores = torch.einsum("bqd,bkd->bqk", q, k) * self.scale
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
        return self.out_proj(torch.softmax(scores, dim=-1) @ v)


class Block(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.attn = SelfAttention(width)

    def forward(self, h, mask=None):
        return h + self.attn(h, mask)


def _masked_mean(h, mask):
    if mask is None:
        return h.mean(dim=1)
    w = mask.to(h.dtype)[..., None]
    return (h * w).sum(dim=1) / w.sum(dim=1)


class ToyVisionEncoder(nn.Module):
    def __init__(self, image_size=32, channels=3, patch=8, width=32, embed_dim=16, layers=1):
        super().__init__()
        if image_size % patch:
            raise InputError("image_size must be divisible by patch")
        self.image_size, self.channels, self.patch = image_size, channels, patch
        self.patch_embed = nn.Linear(channels * patch * patch, width)
        self.blocks = nn.ModuleList(Block(width) for _ in range(layers))
        self.proj = nn.Linear(width, embed_dim, bias=False)

    @property
    def input_shape(self):
        return (self.channels, self.image_size, self.image_size)

    def patchify(self, images):
        b, c, _, _ = images.shape
        p = self.patch
        x = F.unfold(images, kernel_size=p, stride=p)  # (B, C*p*p, P)
        return x.transpose(1, 2).reshape(b, -1, c * p * p)

    def forward(self, images):
        h = self.patch_embed(self.patchify(images))
        for block in self.blocks:
            h = block(h)
        return self.proj(h.mean(dim=1))


class ToyTextEncoder(nn.Module):
    def __init__(self, tokenizer: Tokenizer, width=32, embed_dim=16, layers=1):
        super().__init__()
        self.tokenizer = tokenizer
        self.token_embed = nn.Embedding(len(tokenizer), width)
        self.blocks = nn.ModuleList(Block(width) for _ in range(layers))
        self.proj = nn.Linear(width, embed_dim, bias=False)

    def forward(self, token_ids, mask=None):
        h = self.token_embed(token_ids)
        for block in self.blocks:
            h = block(h, mask)
        return self.proj(_masked_mean(h, mask))


class DualEncoder(nn.Module):
    """Vision and text towers meeting in a shared ``embed_dim``-dimensional space."""

    def __init__(self, vision: nn.Module, text: nn.Module, logit_scale: float = DEFAULT_LOGIT_SCALE):
        super().__init__()
        if logit_scale <= 0:
            raise InputError("logit_scale must be positive")
        self.vision = vision
        self.text = text
        self.logit_scale = float(logit_scale)

    @classmethod
    def toy(
        cls,
        vocab: Sequence[str] = (),
        *,
        image_size=32,
        channels=3,
        patch=8,
        width=32,
        embed_dim=16,
        layers=1,
        seed=0,
        logit_scale=DEFAULT_LOGIT_SCALE,
        dtype=torch.float32,
    ) -> "DualEncoder":
        """Seeded reference model; ``vocab`` should cover class names and template words."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            vision = ToyVisionEncoder(image_size, channels, patch, width, embed_dim, layers)
            text = ToyTextEncoder(Tokenizer(vocab), width, embed_dim, layers)
            model = cls(vision, text, logit_scale)
        return model.to(dtype).eval()

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        expected = getattr(self.vision, "input_shape", None)
        if images.ndim != 4 or (expected is not None and tuple(images.shape[1:]) != tuple(expected)):
            raise InputError(f"expected images of shape (B, {expected}), got {tuple(images.shape)}")
        return self.vision(images.to(self.dtype))

    def encode_texts(self, prompts: Sequence[str]) -> torch.Tensor:
        ids, mask = self.text.tokenizer.batch(prompts)
        return self.text(ids, mask)


@dataclass
class Embedding:
    values: torch.Tensor
    normalized: bool = False

    @property
    def dim(self):
        return self.values.shape[-1]

    def normalize(self) -> "Embedding":
        return Embedding(l2_normalize(self.values), normalized=True)


@dataclass
class ZeroShotClassifier:
    weights: torch.Tensor  # (N, d), unit rows
    class_names: list[str]
    prompt_template: str

    def index(self, class_name: str) -> int:
        try:
            return self.class_names.index(class_name)
        except ValueError:
            raise InputError(f"class {class_name!r} not covered by the classifier") from None


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise NumericalError("cosine similarity undefined for a zero-norm embedding")
    return x / norms


@torch.no_grad()
def encode_image(model: DualEncoder, image: torch.Tensor, normalize: bool = False) -> Embedding:
    batched = image.ndim == 4
    values = model.encode_images(image if batched else image[None])
    if not batched:
        values = values[0]
    emb = Embedding(values)
    return emb.normalize() if normalize else emb


@torch.no_grad()
def encode_text(model: DualEncoder, class_name: str, template: str = DEFAULT_TEMPLATE, normalize: bool = False) -> Embedding:
    values = model.encode_texts([fill_template(template, class_name)])[0]
    emb = Embedding(values)
    return emb.normalize() if normalize else emb


def encode_class_prompts(model: DualEncoder, class_names: Sequence[str], template: str) -> torch.Tensor:
    """Unnormalized (N, d) text features; differentiable, used inside the training step."""
    return model.encode_texts([fill_template(template, c) for c in class_names])


def build_zero_shot_classifier(model: DualEncoder, class_names: Sequence[str], template: str = DEFAULT_TEMPLATE) -> ZeroShotClassifier:
    class_names = list(class_names)
    if not class_names:
        raise InputError("class list must be nonempty")
    if len(set(class_names)) != len(class_names):
        dupes = sorted({c for c in class_names if class_names.count(c) > 1})
        raise InputError(f"duplicate class names: {dupes}")
    with torch.no_grad():
        weights = l2_normalize(encode_class_prompts(model, class_names, template))
    return ZeroShotClassifier(weights, class_names, template)


def _values(x):
    return x.values if isinstance(x, Embedding) else torch.as_tensor(x)


def compute_logits(f_v, f_t, logit_scale: float = 1.0) -> torch.Tensor:
    """``logit_scale * cos(f_v, f_t[i])`` for every class i.

    ``f_v`` is (d,) or (B, d); ``f_t`` is a (N, d) tensor or a list of embeddings.
    """
    v = _values(f_v)
    if isinstance(f_t, (list, tuple)):
        t = torch.stack([_values(e) for e in f_t])
    else:
        t = _values(f_t)
    if v.shape[-1] != t.shape[-1]:
        raise InputError(f"embedding dims differ: {v.shape[-1]} vs {t.shape[-1]}")
    return logit_scale * (l2_normalize(v) @ l2_normalize(t).T)
