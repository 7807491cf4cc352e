"""Zero-shot prototype classification, few-shot linear probing, and
base/novel disentangled task evaluation."""

from __future__ import annotations

import json
import statistics
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from sklearn.dummy import DummyClassifier
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold

from .checkpoint import Checkpoint
from .datamodel import NO_FINDING, EvalReport, aca, per_class_recall, read_grayscale
from .encoders import (FEATURES, IMAGE_LABEL, IMAGE_TEXT, SHARED, PrototypeBank, VisionEncoder,
                       bank_compose, bank_from_prompts, bank_from_weights, encode_images,
                       head_for_space, l2_normalize)

K_SHOTS = (1, 2, 4, 8, 16)
DEFAULT_C_SWEEP = (0.01, 0.1, 1.0, 10.0, 100.0)
NOVEL_SOURCES = ("name", "description", "composed")


class UnresolvableClass(KeyError):
    """A target class has no prototype in the requested space."""


class CatalogMismatch(ValueError):
    pass


def class_prompts(name: str) -> list[str]:
    if name == NO_FINDING:
        return ["no acute cardiopulmonary process", "the lungs are clear"]
    d = name.replace("_", " ")
    return [f"there is {d}", f"{d} is present", f"findings consistent with {d}"]


# ------------------------------------------------------------------ tasks

@dataclass
class Task:
    name: str
    classes: list
    novel_flags: list
    prompt_sets: dict
    description_sets: dict
    compositions: dict
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    path: Optional[Path] = None

    def prompts_for(self, name: str) -> list[str]:
        return list(self.prompt_sets.get(name) or class_prompts(name))


def load_task(path) -> Task:
    path = Path(path)
    raw = json.loads(path.read_text(encoding="utf-8"))
    classes = list(raw["classes"])
    flags = list(raw.get("novel", [False] * len(classes)))
    if len(flags) != len(classes):
        raise ValueError(f"{path}: 'novel' flags do not match classes")
    cache: dict = {}

    def _split(items):
        imgs, labels = [], []
        for it in items:
            if it["label"] not in classes:
                raise ValueError(f"{path}: item label {it['label']!r} not among task classes")
            ref = it["image"]
            if ref not in cache:
                cache[ref] = read_grayscale(path.parent / ref)
            imgs.append(cache[ref])
            labels.append(classes.index(it["label"]))
        if not imgs:
            return np.zeros((0, 1, 1, 1), np.float32), np.zeros(0, np.int64)
        return np.stack(imgs), np.asarray(labels, dtype=np.int64)

    tr_x, tr_y = _split(raw.get("train", []))
    te_x, te_y = _split(raw.get("test", []))
    return Task(raw.get("task", path.stem), classes, flags, dict(raw.get("prompt_sets", {})),
                dict(raw.get("description_sets", {})), dict(raw.get("compositions", {})),
                tr_x, tr_y, te_x, te_y, path)


# -------------------------------------------------------------- zero-shot

@dataclass
class ZeroShotSpec:
    target_classes: list
    # class -> ("learned_weight",) | ("text_prompt", prompts) | ("composed", constituents)
    sources: dict
    # class -> "shared" | "I-L" | "I-T"
    routing: dict

    def __post_init__(self):
        for c in self.target_classes:
            if c not in self.sources or c not in self.routing:
                raise ValueError(f"class {c!r} lacks a source or routing")


def split_base_novel(checkpoint: Checkpoint, task: Task) -> tuple[list[str], list[str]]:
    """Base = task classes known to the checkpoint catalog (base wins on name clash)."""
    catalog = set(checkpoint.catalog.base_names)
    base, novel = [], []
    for c, flagged_novel in zip(task.classes, task.novel_flags):
        if c in catalog:
            base.append(c)
        elif flagged_novel:
            novel.append(c)
        else:
            raise CatalogMismatch(
                f"task class {c!r} is declared base but is absent from the checkpoint catalog")
    return base, novel


def _label_space(checkpoint: Checkpoint) -> str:
    return IMAGE_LABEL if IMAGE_LABEL in checkpoint.vision.head_names else SHARED


def _text_space(checkpoint: Checkpoint) -> str:
    return IMAGE_TEXT if IMAGE_TEXT in checkpoint.vision.head_names else SHARED


def build_zero_shot_spec(checkpoint: Checkpoint, task: Task, novel_source: str = "name",
                         classes: Optional[Sequence[str]] = None) -> ZeroShotSpec:
    if novel_source not in NOVEL_SOURCES:
        raise ValueError(f"novel_source must be one of {NOVEL_SOURCES}")
    base, novel = split_base_novel(checkpoint, task)
    targets = list(classes) if classes is not None else list(task.classes)
    has_weights = checkpoint.kind in ("unimodal", "dlilp")
    sources, routing = {}, {}
    for c in targets:
        if c in base:
            if has_weights:
                sources[c], routing[c] = ("learned_weight",), _label_space(checkpoint)
            else:
                sources[c], routing[c] = ("text_prompt", task.prompts_for(c)), SHARED
        elif novel_source == "composed":
            constituents = task.compositions.get(c)
            if not constituents:
                raise UnresolvableClass(f"novel class {c!r} has no composition")
            sources[c] = ("composed", list(constituents))
            routing[c] = _label_space(checkpoint) if has_weights else SHARED
        else:
            prompts = task.prompts_for(c) if novel_source == "name" else task.description_sets.get(c)
            if not prompts:
                raise UnresolvableClass(f"novel class {c!r} has no {novel_source} prompts")
            if checkpoint.text is None:
                raise UnresolvableClass(
                    f"novel class {c!r} needs text prompts but a {checkpoint.kind} checkpoint has no "
                    "text encoder; only pre-training categories or compositions can be used")
            sources[c] = ("text_prompt", list(prompts))
            routing[c] = _text_space(checkpoint)
    return ZeroShotSpec(targets, sources, routing)


def resolve_bank(checkpoint: Checkpoint, spec: ZeroShotSpec, task: Optional[Task] = None) -> PrototypeBank:
    """Materialize every class of ``spec`` into a prototype in its routed space."""
    names = checkpoint.class_names
    weights_bank = None
    if checkpoint.kind in ("unimodal", "dlilp"):
        weights_bank = bank_from_weights(checkpoint.state.W.detach().float(), names,
                                         _label_space(checkpoint))
    bank = PrototypeBank()
    for c in spec.target_classes:
        src = spec.sources[c]
        space = spec.routing[c]
        if src[0] == "learned_weight":
            if weights_bank is None or c not in weights_bank or space == IMAGE_TEXT:
                raise UnresolvableClass(f"no learned weight for class {c!r} in space {space!r}")
            bank = bank.add(weights_bank.get(c))
        elif src[0] == "text_prompt":
            if checkpoint.text is None:
                raise UnresolvableClass(f"class {c!r} needs text prompts but the checkpoint has no text encoder")
            bank = bank.merge(_prompt_bank(checkpoint, {c: src[1]}, space))
        else:
            constituents = src[1]
            if weights_bank is not None and space != IMAGE_TEXT:
                missing = [k for k in constituents if k not in weights_bank]
                if missing:
                    raise UnresolvableClass(f"constituents {missing} of {c!r} have no learned weights")
                parts = weights_bank.restrict(constituents)
            else:
                if checkpoint.text is None:
                    raise UnresolvableClass(f"cannot compose {c!r} without weights or text encoder")
                prompts = {k: (task.prompts_for(k) if task else class_prompts(k)) for k in constituents}
                parts = _prompt_bank(checkpoint, prompts, space)
            composed = bank_compose(parts, c, constituents)
            bank = bank.add(composed.get(c))
    return bank


def _prompt_bank(checkpoint: Checkpoint, prompts: Mapping[str, Sequence[str]], space: str) -> PrototypeBank:
    bank = bank_from_prompts(checkpoint.text, prompts, space)
    return PrototypeBank(tuple(e.__class__(e.class_name, e.vector.float(), e.provenance, e.space)
                               for e in bank.entries))


def _projected(vision: VisionEncoder, features: torch.Tensor, head: str) -> torch.Tensor:
    with torch.no_grad():
        return vision.project(features.to(next(vision.parameters()).dtype), head).float()


def cosine_scores(vision: VisionEncoder, bank: PrototypeBank, images=None,
                  features: Optional[torch.Tensor] = None, classes: Optional[Sequence[str]] = None):
    """Cosine of each image with each class prototype, in the prototype's own space."""
    classes = list(classes) if classes is not None else bank.names
    if features is None:
        features = encode_images(vision, images, FEATURES)
    cols = []
    cache: dict = {}
    for c in classes:
        proto = bank.get(c)
        head = head_for_space(proto.space, vision.head_names)
        if head not in cache:
            cache[head] = _projected(vision, features, head)
        cols.append(cache[head] @ proto.vector.float())
    return torch.stack(cols, dim=1)


def zero_shot_predict(vision: VisionEncoder, bank: PrototypeBank, images=None,
                      features: Optional[torch.Tensor] = None,
                      classes: Optional[Sequence[str]] = None) -> tuple[np.ndarray, np.ndarray]:
    """Softmax over cosine similarities; returns (scores N x C, argmax predictions)."""
    cos = cosine_scores(vision, bank, images, features, classes)
    scores = torch.softmax(cos.double(), dim=1).numpy()
    return scores, scores.argmax(axis=1)


def zero_shot_unimodal(W, class_names: Sequence[str], targets: Sequence[str], images,
                       vision: VisionEncoder, head: Optional[str] = None,
                       features: Optional[torch.Tensor] = None) -> tuple[np.ndarray, np.ndarray]:
    """Weight-retrieval zero-shot: cosines with the selected rows of W."""
    names = list(class_names)
    novel = [t for t in targets if t not in names]
    if novel:
        raise UnresolvableClass(
            f"classes {novel} are not pre-training categories; only known categories can be retrieved")
    head = head or (IMAGE_LABEL if IMAGE_LABEL in vision.head_names else SHARED)
    rows = torch.as_tensor(W).detach()[[names.index(t) for t in targets]]
    if features is None:
        feats = encode_images(vision, images, head).float()
    else:
        feats = _projected(vision, features, head)
    cos = feats @ l2_normalize(rows.float()).T
    scores = torch.softmax(cos.double(), dim=1).numpy()
    return scores, scores.argmax(axis=1)


# ----------------------------------------------------------------- probing

@dataclass
class ProbeSpec:
    k_shots: int = 16
    feature_tap: str = "pre_projection"  # or "projected"
    c_sweep: tuple = DEFAULT_C_SWEEP
    seed: int = 0
    max_iter: int = 5000

    def __post_init__(self):
        if self.k_shots < 1:
            raise ValueError("k_shots must be >= 1")
        if self.feature_tap not in ("pre_projection", "projected"):
            raise ValueError(f"unknown feature tap {self.feature_tap!r}")


def sample_few_shot(labels: Sequence[int], k: int, class_subset: Sequence[int], seed: int) -> np.ndarray:
    """Indices of exactly k items per class, drawn without replacement."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    deficient = {int(c): int((labels == c).sum()) for c in class_subset if (labels == c).sum() < k}
    if deficient:
        raise ValueError(f"fewer than {k} training samples for classes {deficient}")
    picks = [rng.choice(np.flatnonzero(labels == c), size=k, replace=False) for c in class_subset]
    return np.concatenate(picks)


def _fit(features, labels, C, max_iter):
    clf = LogisticRegression(C=C, max_iter=max_iter, tol=1e-6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        clf.fit(features, labels)
    return clf


def linear_probe(features, labels, spec: ProbeSpec = ProbeSpec()) -> LogisticRegression:
    """Multinomial L2 logistic regression; C chosen by stratified CV on the support when k >= 4."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if len(np.unique(y)) < 2:
        # a one-class support has a single possible decision
        clf = DummyClassifier(strategy="most_frequent").fit(X, y)
        clf.chosen_C_ = None
        return clf
    sweep = tuple(spec.c_sweep)
    if spec.k_shots < 4 or len(sweep) == 1:
        best_c = sweep[len(sweep) // 2]
    else:
        cv = StratifiedKFold(n_splits=min(4, spec.k_shots), shuffle=True, random_state=spec.seed)
        folds = list(cv.split(X, y))
        best_c, best_acc = sweep[0], -1.0
        for C in sweep:
            accs = []
            for tr, va in folds:
                clf = _fit(X[tr], y[tr], C, spec.max_iter)
                accs.append(float((clf.predict(X[va]) == y[va]).mean()))
            mean = float(np.mean(accs))
            if mean > best_acc + 1e-12:
                best_c, best_acc = C, mean
    clf = _fit(X, y, best_c, spec.max_iter)
    clf.chosen_C_ = best_c
    return clf


# -------------------------------------------------------------- evaluation

@dataclass
class Protocol:
    mode: str  # "zero_shot" | "probe"
    k: Optional[int] = None
    novel_source: str = "name"
    feature_tap: str = "pre_projection"

    @classmethod
    def parse(cls, text: str) -> "Protocol":
        parts = text.split(":")
        if parts[0] == "zero_shot":
            src = parts[1] if len(parts) > 1 else "name"
            if src not in NOVEL_SOURCES:
                raise ValueError(f"bad zero-shot source in {text!r}")
            return cls("zero_shot", novel_source=src)
        if parts[0] == "probe" and len(parts) in (2, 3):
            tap = parts[2] if len(parts) == 3 else "pre_projection"
            return cls("probe", k=int(parts[1]), feature_tap=tap)
        raise ValueError(f"unknown protocol {text!r}; use zero_shot[:name|description|composed] or probe:K[:tap]")

    def __str__(self):
        if self.mode == "zero_shot":
            return "zero_shot" if self.novel_source == "name" else f"zero_shot:{self.novel_source}"
        return f"probe:{self.k}" + ("" if self.feature_tap == "pre_projection" else f":{self.feature_tap}")


@dataclass
class _TaskFeatures:
    train: torch.Tensor
    test: torch.Tensor


def task_features(checkpoint: Checkpoint, task: Task) -> _TaskFeatures:
    return _TaskFeatures(encode_images(checkpoint.vision, task.train_images, FEATURES),
                         encode_images(checkpoint.vision, task.test_images, FEATURES))


def _subset_eval(task: Task, subset: Sequence[str], predict) -> tuple[Optional[float], dict]:
    """Classify the test items of ``subset`` among ``subset`` only."""
    if not subset:
        return None, {}
    idx = [task.classes.index(c) for c in subset]
    sel = np.isin(task.test_labels, idx)
    if not sel.any():
        raise ValueError("empty evaluation subset")
    local_pred = predict(list(subset), sel)
    preds = np.asarray(idx)[local_pred]
    truths = task.test_labels[sel]
    recalls = per_class_recall(preds, truths, idx)
    return aca(preds, truths, idx), {task.classes[c]: r for c, r in recalls.items()}


def evaluate_task(checkpoint: Checkpoint, task: Task, protocol, seeds: Sequence[int],
                  checkpoint_name: str = "", features: Optional[_TaskFeatures] = None) -> list[EvalReport]:
    """One EvalReport per seed with base / novel / all ACA."""
    proto = protocol if isinstance(protocol, Protocol) else Protocol.parse(protocol)
    base, novel = split_base_novel(checkpoint, task)
    feats = features or task_features(checkpoint, task)
    reports = []
    if proto.mode == "zero_shot":
        # predictions do not depend on the seed; compute once
        outcome = _zero_shot_outcome(checkpoint, task, proto, base, novel, feats)
        for seed in seeds:
            reports.append(_report(task, seed, "zero-shot", str(proto), checkpoint_name, *outcome))
        return reports
    train_x, test_x = _probe_inputs(checkpoint, feats, proto.feature_tap)
    for seed in seeds:
        spec = ProbeSpec(k_shots=proto.k, feature_tap=proto.feature_tap, seed=seed)

        def predict(subset, sel, spec=spec):
            idx = [task.classes.index(c) for c in subset]
            support = sample_few_shot(task.train_labels, spec.k_shots, idx, spec.seed)
            local = {c: i for i, c in enumerate(idx)}
            y = np.array([local[int(v)] for v in task.train_labels[support]])
            clf = linear_probe(train_x[support], y, spec)
            return clf.predict(test_x[sel])

        outcome = _three_way(task, base, novel, predict)
        reports.append(_report(task, seed, proto.k, str(proto), checkpoint_name, *outcome))
    return reports


def _probe_inputs(checkpoint: Checkpoint, feats: _TaskFeatures, tap: str):
    if tap == "pre_projection":
        return feats.train.double().numpy(), feats.test.double().numpy()
    head = checkpoint.vision.head_names[0]
    return (_projected(checkpoint.vision, feats.train, head).double().numpy(),
            _projected(checkpoint.vision, feats.test, head).double().numpy())


def _zero_shot_outcome(checkpoint, task, proto, base, novel, feats):
    def predict(subset, sel):
        spec = build_zero_shot_spec(checkpoint, task, proto.novel_source, subset)
        bank = resolve_bank(checkpoint, spec, task)
        _, pred = zero_shot_predict(checkpoint.vision, bank, features=feats.test[torch.as_tensor(sel)],
                                    classes=subset)
        return pred

    return _three_way(task, base, novel, predict)


def _three_way(task, base, novel, predict):
    aca_b, rec_b = _guarded(task, base, predict)
    aca_n, rec_n = _guarded(task, novel, predict)
    aca_a, rec_a = _guarded(task, list(task.classes), predict) if (
        aca_n is not None or not novel) else (None, {})
    recalls = {**rec_a, **rec_b, **rec_n} if rec_b or rec_n else rec_a
    return aca_b, aca_n, aca_a, recalls


def _guarded(task, subset, predict):
    try:
        return _subset_eval(task, subset, predict)
    except UnresolvableClass:
        return None, {}


def _report(task, seed, k, protocol, ckpt_name, aca_b, aca_n, aca_a, recalls) -> EvalReport:
    return EvalReport(task_name=task.name, seed=int(seed), k_shots=k, per_class_recall=recalls,
                      aca_base=aca_b, aca_novel=aca_n, aca_all=aca_a, protocol=protocol,
                      checkpoint=ckpt_name)


def aggregate_reports(reports: Sequence[EvalReport]) -> dict:
    """Mean and population standard deviation across seeds of each ACA field."""
    out = {}
    for key in ("aca_base", "aca_novel", "aca_all"):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        # exact-rational statistics: identical values give a std of exactly 0
        out[f"{key}_mean"] = statistics.fmean(vals) if vals else None
        out[f"{key}_std"] = statistics.pstdev(vals) if vals else None
    out["n_seeds"] = len(reports)
    return out
