"""Dual encoders (feature extractor + projection heads) and prototype banks."""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_EPS = 1e-12

SHARED = "shared"
IMAGE_LABEL = "I-L"
IMAGE_TEXT = "I-T"
FEATURES = "features"

PROVENANCES = ("learned_weight", "text_prompt", "composed")
SPACES = (SHARED, IMAGE_LABEL, IMAGE_TEXT)


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """x / max(||x||, eps)."""
    return F.normalize(x, dim=dim, eps=NORM_EPS)


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 48
    in_channels: int = 1
    channels: tuple = (16, 32, 64)
    feature_dim: int = 128  # D_v
    text_buckets: int = 4096
    text_embed_dim: int = 128
    text_dim: int = 128  # D_u
    proj_dim: int = 512  # D_p
    heads: tuple = (SHARED,)

    def validate(self):
        ints = {"image_size": self.image_size, "in_channels": self.in_channels,
                "feature_dim": self.feature_dim, "text_buckets": self.text_buckets,
                "text_embed_dim": self.text_embed_dim, "text_dim": self.text_dim,
                "proj_dim": self.proj_dim}
        for name, value in ints.items():
            if int(value) != value or value < 1:
                raise ValueError(f"invalid dimension {name}={value!r}")
        if self.text_buckets < 2:
            raise ValueError("text_buckets must be >= 2 (bucket 0 is the null token)")
        if not self.channels or any(c < 1 for c in self.channels):
            raise ValueError(f"invalid channel widths {self.channels!r}")
        if self.image_size < 2 ** len(self.channels):
            raise ValueError("image_size too small for the number of strided stages")
        heads = tuple(self.heads)
        if heads not in ((SHARED,), (IMAGE_LABEL, IMAGE_TEXT)):
            raise ValueError(f"heads must be ('shared',) or ('I-L', 'I-T'), got {heads!r}")

    def to_dict(self) -> dict:
        return {"image_size": self.image_size, "in_channels": self.in_channels,
                "channels": list(self.channels), "feature_dim": self.feature_dim,
                "text_buckets": self.text_buckets, "text_embed_dim": self.text_embed_dim,
                "text_dim": self.text_dim, "proj_dim": self.proj_dim, "heads": list(self.heads)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        d = dict(d)
        d["channels"] = tuple(d.get("channels", cls.channels))
        d["heads"] = tuple(d.get("heads", cls.heads))
        return cls(**d)


class VisionEncoder(nn.Module):
    """Strided conv stack with global pooling, followed by named linear heads."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        layers = []
        c_in = config.in_channels
        for c_out in config.channels:
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False),
                       nn.BatchNorm2d(c_out), nn.ReLU(inplace=True)]
            c_in = c_out
        layers += [nn.Conv2d(c_in, config.feature_dim, 3, padding=1, bias=False),
                   nn.BatchNorm2d(config.feature_dim), nn.ReLU(inplace=True),
                   nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.feature_extractor = nn.Sequential(*layers)
        self.projections = nn.ModuleDict(
            {name: nn.Linear(config.feature_dim, config.proj_dim) for name in config.heads})
        self.feature_dim = config.feature_dim
        self.proj_dim = config.proj_dim

    @property
    def head_names(self) -> list[str]:
        return list(self.projections.keys())

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.feature_extractor(images)

    def project(self, features: torch.Tensor, head: str) -> torch.Tensor:
        if head not in self.projections:
            raise KeyError(f"unknown projection {head!r}; available: {self.head_names}")
        return l2_normalize(self.projections[head](features))

    def forward(self, images: torch.Tensor, head: str = FEATURES) -> torch.Tensor:
        feats = self.features(images)
        return feats if head == FEATURES else self.project(feats, head)


_TOKEN_RE = re.compile(r"[a-z0-9]+")


@lru_cache(maxsize=65536)
def hash_tokens(text: str, n_buckets: int) -> tuple[int, ...]:
    """Bucket ids of the lowercase word tokens; bucket 0 is reserved for the empty text."""
    toks = _TOKEN_RE.findall(text.lower())
    if not toks:
        return (0,)
    return tuple(1 + zlib.crc32(t.encode("utf-8")) % (n_buckets - 1) for t in toks)


class TextEncoder(nn.Module):
    """Hashed bag-of-words embedding, one hidden nonlinear layer, linear head."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.n_buckets = config.text_buckets
        self.embedding = nn.EmbeddingBag(config.text_buckets, config.text_embed_dim, mode="mean")
        self.hidden = nn.Sequential(nn.Linear(config.text_embed_dim, config.text_dim), nn.ReLU())
        self.projection = nn.Linear(config.text_dim, config.proj_dim)
        self.proj_dim = config.proj_dim

    def tokenize(self, sentences: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        ids, offsets = [], []
        for s in sentences:
            offsets.append(len(ids))
            ids.extend(hash_tokens(s or "", self.n_buckets))
        device = self.embedding.weight.device
        return (torch.tensor(ids, dtype=torch.long, device=device),
                torch.tensor(offsets, dtype=torch.long, device=device))

    def features(self, sentences: Sequence[str]) -> torch.Tensor:
        ids, offsets = self.tokenize(sentences)
        return self.hidden(self.embedding(ids, offsets))

    def forward(self, sentences: Sequence[str]) -> torch.Tensor:
        return l2_normalize(self.projection(self.features(sentences)))


def _as_image_tensor(images, like: nn.Module) -> torch.Tensor:
    p = next(like.parameters())
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    if x.ndim == 3:
        x = x[..., None]
    # B x H x W x C -> B x C x H x W
    return x.permute(0, 3, 1, 2).to(device=p.device, dtype=p.dtype).contiguous()


def encode_images(encoder: VisionEncoder, images, projection: str = FEATURES,
                  batch_size: int = 512) -> torch.Tensor:
    """Encode images (B x H x W x C) in eval mode without gradients.

    ``projection`` names a head for unit-norm embeddings, or ``"features"``
    for the raw pre-projection vector.
    """
    if projection != FEATURES and projection not in encoder.projections:
        raise KeyError(f"unknown projection {projection!r}; available: {encoder.head_names}")
    was_training = encoder.training
    encoder.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = _as_image_tensor(images[start:start + batch_size], encoder)
            out.append(encoder(x, projection))
    encoder.train(was_training)
    if not out:
        dim = encoder.feature_dim if projection == FEATURES else encoder.proj_dim
        return torch.zeros(0, dim)
    return torch.cat(out)


def encode_texts(encoder: TextEncoder, sentences: Sequence[str]) -> torch.Tensor:
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        out = encoder(list(sentences))
    encoder.train(was_training)
    return out


def build_toy_encoders(config: EncoderConfig = EncoderConfig(), seed: int = 0,
                       with_text: bool = True) -> tuple[VisionEncoder, TextEncoder | None]:
    """Construct the desk-scale encoders; each tower draws from its own seeded stream."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        vision = VisionEncoder(config)
        text = None
        if with_text:
            torch.manual_seed(seed + 2)
            text = TextEncoder(config)
    return vision, text


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass(frozen=True)
class Prototype:
    class_name: str
    vector: torch.Tensor
    provenance: str
    space: str
    constituents: tuple = ()


@dataclass(frozen=True)
class PrototypeBank:
    entries: tuple = field(default_factory=tuple)

    def __post_init__(self):
        names = [e.class_name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate class names in prototype bank")
        for e in self.entries:
            if e.provenance not in PROVENANCES:
                raise ValueError(f"unknown provenance {e.provenance!r}")
            if e.space not in SPACES:
                raise ValueError(f"unknown space {e.space!r}")
            if e.provenance == "learned_weight" and e.space == IMAGE_TEXT:
                raise ValueError("learned weights live in the I-L or shared space")

    @property
    def names(self) -> list[str]:
        return [e.class_name for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def __contains__(self, name):
        return name in self.names

    def get(self, name: str) -> Prototype:
        for e in self.entries:
            if e.class_name == name:
                return e
        raise KeyError(f"class {name!r} not in prototype bank")

    def matrix(self, names: Sequence[str] | None = None) -> torch.Tensor:
        names = self.names if names is None else names
        return torch.stack([self.get(n).vector for n in names])

    def restrict(self, names: Sequence[str]) -> "PrototypeBank":
        return PrototypeBank(tuple(self.get(n) for n in names))

    def merge(self, other: "PrototypeBank") -> "PrototypeBank":
        return PrototypeBank(self.entries + other.entries)

    def add(self, proto: Prototype) -> "PrototypeBank":
        return PrototypeBank(self.entries + (proto,))


def bank_from_weights(W, names: Sequence[str], space: str = IMAGE_LABEL) -> PrototypeBank:
    W = torch.as_tensor(W).detach()
    if W.ndim != 2 or W.shape[0] != len(names):
        raise ValueError(f"{W.shape[0] if W.ndim == 2 else '?'} weight rows for {len(names)} names")
    rows = l2_normalize(W)
    return PrototypeBank(tuple(Prototype(n, rows[i].clone(), "learned_weight", space)
                               for i, n in enumerate(names)))


def bank_from_prompts(text_encoder: TextEncoder, prompt_sets: Mapping[str, Sequence[str]],
                      space: str = SHARED) -> PrototypeBank:
    """Class vector = normalized mean of the normalized prompt embeddings."""
    entries = []
    for name, prompts in prompt_sets.items():
        prompts = list(prompts)
        if not prompts:
            raise ValueError(f"empty prompt list for class {name!r}")
        emb = l2_normalize(encode_texts(text_encoder, prompts))
        entries.append(Prototype(name, l2_normalize(emb.mean(0)), "text_prompt", space))
    return PrototypeBank(tuple(entries))


def bank_compose(bank: PrototypeBank, new_name: str, constituent_names: Sequence[str],
                 tol: float = 1e-6) -> PrototypeBank:
    """Add ``new_name`` as the normalized mean of existing prototypes."""
    if not constituent_names:
        raise ValueError("composition needs at least one constituent")
    missing = [n for n in constituent_names if n not in bank]
    if missing:
        raise KeyError(f"unknown constituent(s) {missing}")
    parts = [bank.get(n) for n in constituent_names]
    spaces = {p.space for p in parts}
    if len(spaces) != 1:
        raise ValueError(f"constituents live in mixed spaces {sorted(spaces)}")
    mean = torch.stack([p.vector for p in parts]).mean(0)
    if float(mean.norm()) < tol:
        raise ValueError("degenerate composition: constituents cancel out")
    proto = Prototype(new_name, l2_normalize(mean), "composed", spaces.pop(),
                      tuple(constituent_names))
    if new_name in bank:
        kept = tuple(e for e in bank.entries if e.class_name != new_name)
        return PrototypeBank(kept + (proto,))
    return bank.add(proto)


def head_for_space(space: str, heads: Sequence[str]) -> str:
    if space in heads:
        return space
    if tuple(heads) == (SHARED,):
        return SHARED
    raise KeyError(f"no projection head serves space {space!r} (heads: {list(heads)})")


def with_space(bank: PrototypeBank, space: str) -> PrototypeBank:
    return PrototypeBank(tuple(replace(e, space=space) for e in bank.entries))
