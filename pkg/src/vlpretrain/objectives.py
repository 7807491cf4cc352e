"""Pre-training losses: CLIP, UniCL, Unimodal BCE (full and masked) and DLILP.

All losses sum over the batch (no 1/|B| averaging). Embedding inputs are
expected to be unit-norm rows; class weights are row-normalized on read.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import l2_normalize

KINDS = ("clip", "unicl", "unimodal", "dlilp")

TAU_MIN = 0.01
TAU_INIT_CONTRASTIVE = 0.07
TAU_INIT_UNIMODAL = 1.0
LOGIT_CLAMP = 30.0
DEFAULT_LAMBDA = 0.1


@dataclass
class LossOutput:
    value: torch.Tensor
    components: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)


def _tau(tau) -> torch.Tensor:
    return tau if torch.is_tensor(tau) else torch.tensor(float(tau), dtype=torch.float64)


def _scalar(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def _check_batch(V: torch.Tensor, U: torch.Tensor | None = None):
    if V.shape[0] == 0:
        raise ValueError("empty batch: |B| must be >= 1")
    if U is not None and U.shape[0] != V.shape[0]:
        raise ValueError("image and text batches differ in size")


def clip_loss(V: torch.Tensor, U: torch.Tensor, tau) -> LossOutput:
    """Bidirectional InfoNCE with positional pairing."""
    _check_batch(V, U)
    logits = V @ U.T / _tau(tau)
    i2t = -torch.diagonal(torch.log_softmax(logits, dim=1)).sum()
    t2i = -torch.diagonal(torch.log_softmax(logits, dim=0)).sum()
    return LossOutput(i2t + t2i, {"i2t": i2t, "t2i": t2i},
                      {"tau": _scalar(tau)})


def unicl_positive_sets(y_img, y_text) -> tuple[list[set], list[set]]:
    """Index sets of cross-modal positives sharing at least one labeled class.

    P_i2t(i): texts i' whose labels overlap image i's labels.
    P_t2i(j): images j' whose labels overlap text j's labels.
    """
    M = _overlap(y_img, y_text)
    p_i2t = [set(torch.nonzero(M[i]).flatten().tolist()) for i in range(M.shape[0])]
    p_t2i = [set(torch.nonzero(M[:, j]).flatten().tolist()) for j in range(M.shape[1])]
    return p_i2t, p_t2i


def _overlap(y_img, y_text) -> torch.Tensor:
    a = torch.as_tensor(y_img).to(torch.float64)
    b = torch.as_tensor(y_text).to(torch.float64)
    # M[i, j] = 1 iff image i and text j share a positive class
    return (a @ b.T) > 0


def unicl_loss(V: torch.Tensor, U: torch.Tensor, y_img, y_text, tau) -> LossOutput:
    """Label-aware contrastive loss; anchors with empty positive sets contribute 0."""
    _check_batch(V, U)
    M = _overlap(y_img, y_text).to(V.device)
    Mf = M.to(V.dtype)
    logits = V @ U.T / _tau(tau)
    logp_i2t = torch.log_softmax(logits, dim=1)  # image anchors over texts
    logp_t2i = torch.log_softmax(logits, dim=0)  # text anchors over images
    n_i2t = Mf.sum(1)
    n_t2i = Mf.sum(0)
    # where() zeroes both the value and the gradient of non-positive pairs
    s_i2t = torch.where(M, logp_i2t, torch.zeros_like(logp_i2t)).sum(1)
    s_t2i = torch.where(M, logp_t2i, torch.zeros_like(logp_t2i)).sum(0)
    i2t = -(s_i2t / n_i2t.clamp_min(1.0)).sum()
    t2i = -(s_t2i / n_t2i.clamp_min(1.0)).sum()
    diag = {"tau": _scalar(tau),
            "empty_i2t": int((n_i2t == 0).sum()), "empty_t2i": int((n_t2i == 0).sum()),
            "mean_positive_set": float(n_i2t.mean())}
    return LossOutput(i2t + t2i, {"i2t": i2t, "t2i": t2i}, diag)


def _bce_terms(V: torch.Tensor, y, W: torch.Tensor, tau) -> torch.Tensor:
    """Per-(sample, class) binary cross-entropy with logits clamped to +-30."""
    if W.shape[0] == 0:
        raise ValueError("no classes: C must be >= 1")
    logits = (V @ l2_normalize(W).T / _tau(tau)).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    y = torch.as_tensor(y, device=V.device).to(V.dtype)
    return -(y * F.logsigmoid(logits) + (1 - y) * F.logsigmoid(-logits))


def unimodal_loss(V: torch.Tensor, y_img, W: torch.Tensor, tau) -> LossOutput:
    """Sum over the batch of the class-averaged BCE with sigmoid(W v / tau)."""
    _check_batch(V)
    terms = _bce_terms(V, y_img, W, tau)
    uni = terms.mean(1).sum()
    return LossOutput(uni, {"uni": uni}, {"tau": _scalar(tau)})


def masked_unimodal_loss(V: torch.Tensor, y_img, masks, W: torch.Tensor, tau) -> LossOutput:
    """BCE weighted by a_ic / |a_i|; rows with no labeled class are skipped."""
    _check_batch(V)
    a = torch.as_tensor(masks, device=V.device).to(V.dtype)
    counts = a.sum(1)
    if not bool((counts > 0).any()):
        raise ValueError("no supervision in batch: every annotation mask is zero")
    terms = _bce_terms(V, y_img, W, tau)
    weights = a / counts.clamp_min(1.0)[:, None]
    # where() so that masked entries carry exactly zero gradient
    uni = torch.where(a > 0, weights * terms, torch.zeros_like(terms)).sum()
    return LossOutput(uni, {"uni": uni},
                      {"tau": _scalar(tau), "unsupervised_rows": int((counts == 0).sum())})


def dlilp_loss(V_IL: torch.Tensor, V_IT: torch.Tensor, U: torch.Tensor, y_img,
               tau_IL, tau_IT, W: torch.Tensor, lam=DEFAULT_LAMBDA, masks=None) -> LossOutput:
    """Label BCE on the I-L projection plus lambda times CLIP on the I-T projection."""
    lam_t = lam if torch.is_tensor(lam) else torch.tensor(float(lam), dtype=V_IL.dtype)
    if _scalar(lam_t) < 0:
        raise ValueError("lambda must be >= 0")
    if masks is None:
        uni = unimodal_loss(V_IL, y_img, W, tau_IL)
    else:
        uni = masked_unimodal_loss(V_IL, y_img, masks, W, tau_IL)
    clip = clip_loss(V_IT, U, tau_IT)
    value = uni.value + lam_t * clip.value
    comps = {"uni": uni.value, "clip": clip.value, "clip_weighted": lam_t * clip.value}
    diag = {"tau_IL": _scalar(tau_IL), "tau_IT": _scalar(tau_IT), "lambda": _scalar(lam_t)}
    return LossOutput(value, comps, diag)


class ObjectiveState(nn.Module):
    """Trainable parameters owned by a loss: class weights and log-temperatures."""

    def __init__(self, kind: str, n_classes: int = 0, proj_dim: int = 512,
                 lam: float = DEFAULT_LAMBDA, seed: int = 0):
        super().__init__()
        if kind not in KINDS:
            raise ValueError(f"unknown objective {kind!r}; expected one of {KINDS}")
        if lam < 0:
            raise ValueError("lambda must be >= 0")
        self.kind = kind
        self.lam = float(lam)
        self.n_classes = n_classes
        if kind in ("unimodal", "dlilp"):
            if n_classes < 1:
                raise ValueError(f"{kind} needs at least one class")
            gen = torch.Generator().manual_seed(seed + 1)
            # same init as nn.Linear(proj_dim, n_classes).weight
            bound = 1.0 / math.sqrt(proj_dim)
            self.W = nn.Parameter((torch.rand(n_classes, proj_dim, generator=gen) * 2 - 1) * bound)
        if kind == "dlilp":
            self.log_tau_IL = nn.Parameter(torch.tensor(math.log(TAU_INIT_UNIMODAL)))
            self.log_tau_IT = nn.Parameter(torch.tensor(math.log(TAU_INIT_CONTRASTIVE)))
        else:
            init = TAU_INIT_UNIMODAL if kind == "unimodal" else TAU_INIT_CONTRASTIVE
            self.log_tau = nn.Parameter(torch.tensor(math.log(init)))

    @property
    def uses_text(self) -> bool:
        return self.kind != "unimodal"

    @property
    def uses_labels(self) -> bool:
        return self.kind != "clip"

    def tau(self, which: str = "") -> torch.Tensor:
        p = getattr(self, f"log_tau_{which}" if which else "log_tau")
        return p.exp().clamp_min(TAU_MIN)

    def class_weights(self) -> torch.Tensor:
        return l2_normalize(self.W)

    @torch.no_grad()
    def clamp_(self):
        floor = math.log(TAU_MIN)
        for name, p in self.named_parameters():
            if name.startswith("log_tau"):
                p.clamp_(min=floor)

    def forward(self, heads: Mapping[str, torch.Tensor], U, y_img, y_text, masks,
                use_masks: bool = False) -> LossOutput:
        """Evaluate this objective on projected batch embeddings.

        ``heads`` maps projection names to unit-norm image embeddings; a
        single-head encoder is passed as ``{"shared": V}``.
        """
        m = masks if use_masks else None
        if self.kind == "clip":
            return clip_loss(_only(heads), U, self.tau())
        if self.kind == "unicl":
            return unicl_loss(_only(heads), U, y_img, y_text, self.tau())
        if self.kind == "unimodal":
            V = _only(heads)
            if m is None:
                return unimodal_loss(V, y_img, self.W, self.tau())
            return masked_unimodal_loss(V, y_img, m, self.W, self.tau())
        V_IL = heads.get("I-L", heads.get("shared"))
        V_IT = heads.get("I-T", heads.get("shared"))
        return dlilp_loss(V_IL, V_IT, U, y_img, self.tau("IL"), self.tau("IT"),
                          self.W, self.lam, m)


def _only(heads: Mapping[str, torch.Tensor]) -> torch.Tensor:
    if "shared" in heads:
        return heads["shared"]
    if len(heads) == 1:
        return next(iter(heads.values()))
    raise ValueError(f"objective needs a single projection, got {sorted(heads)}")


# name -> (loss fn, differentiable matrix args, constant args, log-temperature args, scalar args)
_SIGNATURES = {
    "clip": (clip_loss, ("V", "U"), (), ("tau",), ()),
    "unicl": (unicl_loss, ("V", "U"), ("y_img", "y_text"), ("tau",), ()),
    "unimodal": (unimodal_loss, ("V", "W"), ("y_img",), ("tau",), ()),
    "masked_unimodal": (masked_unimodal_loss, ("V", "W"), ("y_img", "masks"), ("tau",), ()),
    "dlilp": (dlilp_loss, ("V_IL", "V_IT", "U", "W"), ("y_img", "masks"),
              ("tau_IL", "tau_IT"), ("lam",)),
}


def evaluate_objective(objective: str, inputs: Mapping) -> LossOutput:
    """Evaluate a loss by name from a flat input dict.

    Temperatures are passed as ``log_<name>`` (e.g. ``log_tau``) and
    exponentiated with the usual clamp at 0.01.
    """
    fn, mats, consts, temps, scalars = _SIGNATURES[objective]
    kwargs = {k: inputs[k] for k in mats}
    kwargs.update({k: inputs.get(k) for k in consts})
    for t in temps:
        lt = inputs[f"log_{t}"]
        lt = lt if torch.is_tensor(lt) else torch.tensor(float(lt), dtype=torch.float64)
        kwargs[t] = lt.exp().clamp_min(TAU_MIN)
    for s in scalars:
        kwargs[s] = inputs.get(s, DEFAULT_LAMBDA)
    return fn(**kwargs)


def loss_gradients(objective: str, inputs: Mapping) -> dict:
    """Autograd gradients of the loss value w.r.t. every real-valued input.

    Returns a dict keyed like ``inputs`` (matrices, ``log_*`` temperatures,
    ``lam``); label and mask inputs are not differentiated.
    """
    if objective not in _SIGNATURES:
        raise ValueError(f"unknown objective {objective!r}")
    _, mats, _, temps, scalars = _SIGNATURES[objective]
    diff_keys = list(mats) + [f"log_{t}" for t in temps] + [s for s in scalars if s in inputs]
    leaves = {}
    for k in diff_keys:
        v = inputs[k]
        t = v.detach().clone() if torch.is_tensor(v) else torch.tensor(float(v), dtype=torch.float64)
        leaves[k] = t.requires_grad_(True)
    merged = dict(inputs)
    merged.update(leaves)
    out = evaluate_objective(objective, merged)
    if not torch.isfinite(out.value):
        raise FloatingPointError(f"non-finite {objective} loss: {float(out.value)}")
    grads = torch.autograd.grad(out.value, [leaves[k] for k in diff_keys], allow_unused=True)
    return {k: (torch.zeros_like(leaves[k]) if g is None else g) for k, g in zip(diff_keys, grads)}
