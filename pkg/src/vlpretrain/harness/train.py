"""Pre-training loop: data assembly, optimization, early stopping and run records."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..checkpoint import Checkpoint, save_checkpoint
from ..datamodel import ClassCatalog, LoadedManifest, load_manifest
from ..encoders import TextEncoder, VisionEncoder, build_toy_encoders
from ..objectives import LossOutput, ObjectiveState, unimodal_loss
from .config import Augmentations, TrainConfig

log = logging.getLogger(__name__)

TEMPLATE = "a chest x-ray photo of {}"
VERSION = "0.1.0"


class SupervisionError(ValueError):
    """The objective needs supervision the manifests do not provide."""


def template_sentence(names: Sequence[str]) -> str:
    shown = [n.replace("_", " ") for n in names]
    return TEMPLATE.format(" and ".join(shown)) if shown else TEMPLATE.format("a chest")


# ------------------------------------------------------------------ data

@dataclass
class TrainingData:
    catalog: ClassCatalog
    images: torch.Tensor  # N x 1 x H x W
    y_img: torch.Tensor
    y_text: torch.Tensor
    masks: torch.Tensor
    sentences: list
    templated: np.ndarray  # bool, sentence came from the template
    sources: list
    image_keys: list
    train_idx: np.ndarray
    val_idx: np.ndarray
    digest: str = ""

    @property
    def partial(self) -> bool:
        return bool((self.masks == 0).any())

    def subset(self, idx) -> dict:
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return {"images": self.images[idx], "y_img": self.y_img[idx], "y_text": self.y_text[idx],
                "masks": self.masks[idx], "sentences": [self.sentences[i] for i in idx.tolist()]}


def _union_names(loaded: Sequence[LoadedManifest]) -> list[str]:
    names: list[str] = []
    for m in loaded:
        for n in m.catalog.names:
            if n not in names:
                names.append(n)
    return names


def _remap(vec: np.ndarray, src: Sequence[str], dst_index: dict, fill: float) -> np.ndarray:
    out = np.full(len(dst_index), fill, dtype=np.float32)
    for j, n in enumerate(src):
        out[dst_index[n]] = vec[j]
    return out


def stratified_val_split(keys: Sequence[tuple], fraction: float, rng) -> np.ndarray:
    """Boolean val indicator over images, stratified by label pattern.

    Images are ordered by (label pattern, random) and every 1/fraction-th one
    goes to validation, so each pattern gets its proportional share.
    """
    n = len(keys)
    order = sorted(range(n), key=lambda i: (keys[i], rng.random()))
    is_val = np.zeros(n, dtype=bool)
    offset = rng.random()
    for pos, i in enumerate(order):
        if math.floor((pos + 1) * fraction + offset) > math.floor(pos * fraction + offset):
            is_val[i] = True
    return is_val


def prepare_data(manifests: Sequence, config: TrainConfig,
                 image_cache: Optional[dict] = None) -> TrainingData:
    """Load manifests into one union catalog with a per-source val split.

    Classes a source does not label get mask 0.  The split of a source
    depends only on the seed and that source's name, so adding a source
    leaves the other splits unchanged.
    """
    cache = image_cache if image_cache is not None else {}
    loaded = [m if isinstance(m, LoadedManifest) else load_manifest(m, image_cache=cache)
              for m in manifests]
    if not loaded:
        raise ValueError("no manifests given")
    names = _union_names(loaded)
    index = {n: i for i, n in enumerate(names)}
    images, y_img, y_text, masks, sentences, templated, sources, keys = [], [], [], [], [], [], [], []
    train_idx, val_idx = [], []
    digest = hashlib.sha256()
    for m, src in zip(loaded, manifests):
        src_names = m.catalog.names
        source = m.header.get("source") or (Path(src).stem if not isinstance(src, LoadedManifest) else "manifest")
        if not isinstance(src, LoadedManifest):
            digest.update(Path(src).read_bytes())
        # group sentence-level samples by image
        groups: dict = {}
        for s in m.samples:
            groups.setdefault(s.image_ref or id(s.image), []).append(s)
        refs = list(groups)
        pattern = [tuple(int(v) for v in groups[r][0].image_labels) for r in refs]
        rng = np.random.default_rng([config.seed, zlib.crc32(source.encode())])
        is_val = stratified_val_split(pattern, config.val_fraction, rng)
        for r, v in zip(refs, is_val):
            for s in groups[r]:
                yi = _remap(s.image_labels, src_names, index, 0.0)
                mk = _remap(s.annotation_mask, src_names, index, 0.0)
                if s.sentence is None:
                    pos = [names[c] for c in np.flatnonzero(yi * mk)]
                    sent, yt, tmpl = template_sentence(pos), yi.copy(), True
                else:
                    sent, yt, tmpl = s.sentence, _remap(s.sentence_labels, src_names, index, 0.0), False
                (val_idx if v else train_idx).append(len(images))
                images.append(s.image)
                y_img.append(yi)
                y_text.append(yt)
                masks.append(mk)
                sentences.append(sent)
                templated.append(tmpl)
                sources.append(source)
                keys.append(f"{source}/{r}")
    arr = np.stack(images).astype(np.float32)
    if arr.ndim == 3:
        arr = arr[..., None]
    return TrainingData(
        catalog=ClassCatalog.from_names(names),
        images=torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous(),
        y_img=torch.from_numpy(np.stack(y_img)), y_text=torch.from_numpy(np.stack(y_text)),
        masks=torch.from_numpy(np.stack(masks)), sentences=sentences,
        templated=np.asarray(templated), sources=sources, image_keys=keys,
        train_idx=np.asarray(train_idx, dtype=np.int64), val_idx=np.asarray(val_idx, dtype=np.int64),
        digest=digest.hexdigest()[:12])


def check_supervision(kind: str, data: TrainingData) -> None:
    observed = (data.y_img * data.masks).sum() > 0
    if kind in ("unimodal", "unicl", "dlilp") and not observed:
        raise SupervisionError(f"{kind} needs class labels but no sample carries an observed positive")
    if kind == "dlilp" and data.templated.all():
        raise SupervisionError("dlilp needs report sentences on at least part of the assembly")


# ---------------------------------------------------------------- augment

def augment_batch(x: torch.Tensor, aug: Augmentations, gen: torch.Generator) -> torch.Tensor:
    if not aug.any:
        return x
    b = x.shape[0]

    def u(lo, hi):
        return torch.rand(b, generator=gen, dtype=torch.float64).to(x.dtype) * (hi - lo) + lo

    if aug.hflip:
        flip = torch.rand(b, generator=gen) < 0.5
        x = torch.where(flip[:, None, None, None], x.flip(-1), x)
    if aug.rotation or aug.scale:
        ang = u(-5.0, 5.0) * math.pi / 180 if aug.rotation else torch.zeros(b, dtype=x.dtype)
        sc = u(0.9, 1.1) if aug.scale else torch.ones(b, dtype=x.dtype)
        cos, sin = torch.cos(ang) / sc, torch.sin(ang) / sc
        zero = torch.zeros_like(cos)
        theta = torch.stack([torch.stack([cos, -sin, zero], 1), torch.stack([sin, cos, zero], 1)], 1)
        grid = F.affine_grid(theta, list(x.shape), align_corners=False)
        x = F.grid_sample(x, grid, padding_mode="border", align_corners=False)
    if aug.brightness_contrast:
        bright, contrast = u(0.8, 1.2), u(0.8, 1.2)
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        x = ((x - mean) * contrast[:, None, None, None] + mean) * bright[:, None, None, None]
        x = x.clamp(0.0, 1.0)
    return x


# ------------------------------------------------------------------- loop

@dataclass
class RunRecord:
    config_hash: str
    config: dict
    curve: list  # one dict per epoch
    best_epoch: int
    best_val_loss: float
    checkpoint: str
    wall_time: float
    provenance: str
    stopped_early: bool = False
    used_masks: bool = False
    grad_diagnostics: dict = field(default_factory=dict)
    catalog: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))

    def component(self, split: str, name: str) -> list[float]:
        return [e[f"{split}_components"][name] for e in self.curve]


def forward_batch(vision: VisionEncoder, text: Optional[TextEncoder], state: ObjectiveState,
                  batch: dict, use_masks: bool) -> LossOutput:
    feats = vision.features(batch["images"])
    heads = {h: vision.project(feats, h) for h in vision.head_names}
    U = text(batch["sentences"]) if (text is not None and state.uses_text) else None
    return state(heads, U, batch["y_img"], batch["y_text"], batch["masks"], use_masks=use_masks)


def _cast(batch: dict, dtype) -> dict:
    return {k: (v.to(dtype) if torch.is_tensor(v) else v) for k, v in batch.items()}


@torch.no_grad()
def evaluate_loss(vision, text, state, data: TrainingData, idx, batch_size: int,
                  use_masks: bool) -> tuple[float, dict]:
    """Per-sample mean objective over ``idx`` in fixed order, eval mode."""
    modules = [m for m in (vision, text, state) if m is not None]
    modes = [m.training for m in modules]
    for m in modules:
        m.eval()
    dtype = next(vision.parameters()).dtype
    total, comps, n = 0.0, {}, 0
    idx = np.asarray(idx)
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        out = forward_batch(vision, text, state, _cast(data.subset(chunk), dtype), use_masks)
        total += float(out.value)
        for k, v in out.components.items():
            comps[k] = comps.get(k, 0.0) + float(v)
        n += len(chunk)
    for m, was in zip(modules, modes):
        m.train(was)
    n = max(n, 1)
    return total / n, {k: v / n for k, v in comps.items()}


def _schedule(config: TrainConfig, steps_per_epoch: int):
    total = config.max_epochs * steps_per_epoch
    warm = config.warmup_epochs * steps_per_epoch

    def factor(step: int) -> float:
        if step < warm:
            return (step + 1) / warm
        if total <= warm:
            return 1.0
        return 0.5 * (1.0 + math.cos(math.pi * (step - warm) / (total - warm)))

    return factor


def pretrain(config: TrainConfig, manifests: Sequence, out_dir, data: Optional[TrainingData] = None,
             image_cache: Optional[dict] = None) -> RunRecord:
    """Train one objective on ``manifests``; the best-validation weights land in ``out_dir``."""
    config.validate()
    t0 = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = data or prepare_data(manifests, config, image_cache)
    check_supervision(config.objective, data)
    if len(data.train_idx) == 0 or len(data.val_idx) == 0:
        raise ValueError("training and validation splits must both be non-empty")
    dtype = torch.float64 if config.precision == "float64" else torch.float32
    enc_cfg = config.encoder_config()
    if data.images.shape[-1] != enc_cfg.image_size or data.images.shape[-2] != enc_cfg.image_size:
        raise ValueError(f"images are {tuple(data.images.shape[-2:])}, config expects "
                         f"{enc_cfg.image_size}x{enc_cfg.image_size}")
    state = ObjectiveState(config.objective, n_classes=len(data.catalog), proj_dim=enc_cfg.proj_dim,
                           lam=config.lam, seed=config.seed)
    vision, text = build_toy_encoders(enc_cfg, seed=config.seed, with_text=state.uses_text)
    modules = [m for m in (vision, text, state) if m is not None]
    for m in modules:
        m.to(dtype).train()
    use_masks = data.partial and state.uses_labels
    params = [p for m in modules for p in m.parameters()]
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    n_train = len(data.train_idx)
    spe = math.ceil(n_train / config.batch_size)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _schedule(config, spe))
    gen = torch.Generator().manual_seed(config.seed + 3)
    ckpt_path = out_dir / "checkpoint.pt"
    meta = {
        "encoder": enc_cfg.to_dict(), "objective": config.objective, "lambda": config.lam,
        "catalog": {"names": data.catalog.names, "novel": []}, "precision": config.precision,
        "config": config.to_dict(), "config_hash": config.config_hash(), "used_masks": use_masks,
    }
    curve, best, best_epoch, stale = [], math.inf, -1, 0
    masked_steps, masked_max = 0, 0.0
    stopped_early = False
    for epoch in range(config.max_epochs):
        order = data.train_idx[np.random.default_rng([config.seed, epoch]).permutation(n_train)]
        tr_total, tr_comps = 0.0, {}
        for start in range(0, n_train, config.batch_size):
            chunk = order[start:start + config.batch_size]
            batch = _cast(data.subset(chunk), dtype)
            batch["images"] = augment_batch(batch["images"], config.augment, gen)
            out = forward_batch(vision, text, state, batch, use_masks)
            if not torch.isfinite(out.value):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} step {start // config.batch_size}: "
                    f"components={ {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in out.components.items()} } "
                    f"taus={ {n: float(p.detach().exp()) for n, p in state.named_parameters() if 'log_tau' in n} }")
            opt.zero_grad(set_to_none=True)
            out.value.backward()
            if use_masks and getattr(state, "W", None) is not None:
                dead = batch["masks"].sum(0) == 0
                if dead.any():
                    masked_steps += 1
                    masked_max = max(masked_max, float(state.W.grad[dead].abs().max()))
            opt.step()
            sched.step()
            state.clamp_()
            tr_total += float(out.value.detach())
            for k, v in out.components.items():
                tr_comps[k] = tr_comps.get(k, 0.0) + float(v.detach())
        val, val_comps = evaluate_loss(vision, text, state, data, data.val_idx, config.batch_size,
                                       use_masks)
        improved = val < best
        curve.append({"epoch": epoch, "train_loss": tr_total / n_train, "val_loss": val,
                      "train_components": {k: v / n_train for k, v in tr_comps.items()},
                      "val_components": val_comps, "lr": opt.param_groups[0]["lr"],
                      "improved": improved})
        log.info("epoch %d train %.4f val %.4f", epoch, tr_total / n_train, val)
        if improved:
            best, best_epoch, stale = val, epoch, 0
            save_checkpoint(ckpt_path, vision, text, state,
                            {**meta, "best_epoch": epoch, "best_val_loss": val})
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                stopped_early = True
                break
    record = RunRecord(
        config_hash=config.config_hash(), config=config.to_dict(), curve=curve,
        best_epoch=best_epoch, best_val_loss=best, checkpoint=str(ckpt_path),
        wall_time=time.perf_counter() - t0,
        provenance=f"vlpretrain-{VERSION}+cfg.{config.config_hash()}.data.{data.digest}.torch.{torch.__version__}",
        stopped_early=stopped_early, used_masks=use_masks,
        grad_diagnostics={"masked_row_steps": masked_steps, "masked_row_max_grad": masked_max},
        catalog=data.catalog.names)
    record.save(out_dir / "run.json")
    return record


def validation_loss(checkpoint: Checkpoint, data: TrainingData, batch_size: Optional[int] = None) -> float:
    """Re-evaluate a saved checkpoint on the validation split it was selected on."""
    bs = batch_size or checkpoint.meta["config"]["batch_size"]
    value, _ = evaluate_loss(checkpoint.vision, checkpoint.text, checkpoint.state, data, data.val_idx,
                             bs, checkpoint.meta.get("used_masks", False))
    return value


@torch.no_grad()
def label_loss(checkpoint: Checkpoint, data: TrainingData, classes: Sequence[str],
               idx=None) -> float:
    """Per-sample unimodal loss restricted to ``classes`` (I-L head for dual encoders)."""
    names = checkpoint.class_names
    missing = [c for c in classes if c not in names or c not in data.catalog.names]
    if missing:
        raise KeyError(f"classes {missing} missing from checkpoint or data")
    rows = [names.index(c) for c in classes]
    cols = [data.catalog.names.index(c) for c in classes]
    head = "I-L" if "I-L" in checkpoint.vision.head_names else "shared"
    tau = checkpoint.state.tau("IL") if checkpoint.kind == "dlilp" else checkpoint.state.tau()
    W = checkpoint.state.W[rows]
    idx = data.val_idx if idx is None else np.asarray(idx)
    dtype = W.dtype
    total = 0.0
    for start in range(0, len(idx), 256):
        b = _cast(data.subset(idx[start:start + 256]), dtype)
        V = checkpoint.vision(b["images"], head)
        total += float(unimodal_loss(V, b["y_img"][:, cols], W, tau).value)
    return total / max(len(idx), 1)
