"""Deterministic synthetic chest-radiograph-like corpus.

Images are rendered from latent findings (geometric motifs plus Gaussian
noise); reports are templated sentences, labeled sentence-wise by a small
rule-based labeler. Three pre-training sub-datasets are produced:

* ``mimic``    image + report, labels extracted from the sentences
* ``chexpert`` label-only
* ``padchest`` label-only, additionally labeling the two novel findings

plus balanced downstream task manifests and a sealed audit file with the
latent truth of every image.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .datamodel import NO_FINDING, ClassCatalog, load_manifest, write_grayscale, write_manifest


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Motif:
    kind: str  # blob | disk | bar | gradient | rect | cross | stripes | ring
    intensity: tuple = (0.3, 0.4)
    size: tuple = (0.05, 0.08)
    jitter: float = 0.08


DEFAULT_MOTIFS = {
    "opacity": Motif("blob", (0.25, 0.35), (0.08, 0.11), 0.06),
    "consolidation": Motif("disk", (0.40, 0.50), (0.045, 0.065), 0.08),
    "pneumonia": Motif("bar", (0.35, 0.45), (0.22, 0.30), 0.06),
    "effusion": Motif("gradient", (0.35, 0.45), (0.18, 0.26), 0.03),
    "cardiomegaly": Motif("rect", (0.25, 0.32), (0.30, 0.38), 0.03),
    "mass": Motif("cross", (0.45, 0.55), (0.07, 0.09), 0.08),
    "fibrosis": Motif("stripes", (0.18, 0.24), (0.05, 0.07), 0.05),
    "ground_glass": Motif("ring", (0.30, 0.38), (0.08, 0.11), 0.06),
}

DEFAULT_BASE = ("no_finding", "opacity", "consolidation", "pneumonia", "effusion", "cardiomegaly")
DEFAULT_NOVEL = ("mass", "fibrosis")

POSITIVE_TEMPLATES = (
    "there is {f}",
    "{f} is seen",
    "findings consistent with {f}",
    "mild {f} is noted on the {side}",
    "{f} is present",
)
NEGATIVE_TEMPLATES = ("no {f}", "there is no {f}", "no evidence of {f}")
NORMAL_SENTENCES = ("no acute cardiopulmonary process", "the lungs are clear",
                    "no acute findings")
NEGATION_CUES = ("no", "without", "negative")


def default_cooccurrence(findings: Sequence[str]) -> list[list[float]]:
    """Symmetric matrix over motif findings.

    Diagonal entries weight the choice of the primary finding (0 = never
    primary); off-diagonal entries are the probability of adding a secondary.
    """
    idx = {f: i for i, f in enumerate(findings)}
    n = len(findings)
    m = np.full((n, n), 0.08)
    for f in findings:
        m[idx[f], idx[f]] = 0.0 if f in DEFAULT_NOVEL else 1.0
    pairs = {("pneumonia", "consolidation"): 0.45, ("opacity", "consolidation"): 0.25,
             ("effusion", "cardiomegaly"): 0.20}
    for (a, b), p in pairs.items():
        if a in idx and b in idx:
            m[idx[a], idx[b]] = m[idx[b], idx[a]] = p
    for nv in DEFAULT_NOVEL:
        for f in findings:
            if nv in idx and f != nv:
                m[idx[nv], idx[f]] = m[idx[f], idx[nv]] = 0.0 if f in DEFAULT_NOVEL else 0.12
    return m.tolist()


@dataclass
class TaskPlan:
    name: str
    classes: tuple
    # class -> latent finding set rendered for its images
    renders: dict
    novel: tuple = ()
    compositions: dict = field(default_factory=dict)
    descriptions: dict = field(default_factory=dict)


@dataclass
class GeneratorConfig:
    image_size: int = 48
    base: tuple = DEFAULT_BASE
    novel: tuple = DEFAULT_NOVEL
    motifs: dict = field(default_factory=lambda: dict(DEFAULT_MOTIFS))
    cooccurrence: Optional[list] = None
    normal_rate: float = 0.2
    max_findings: int = 3
    negation_rate: float = 0.08
    uncertain_rate: float = 0.0
    noise_sigma: float = 0.05
    # downstream task images: own noise level and motif contrast multiplier
    task_noise_sigma: float = 0.05
    task_contrast: float = 0.7
    n_mimic: int = 3000
    n_chexpert: int = 3000
    n_padchest: int = 2000
    train_per_class: int = 32
    test_per_class: int = 200
    composed_name: str = "covid"
    composed_constituents: tuple = ("opacity", "consolidation")
    composed_motif: str = "ground_glass"
    confuser: str = "pneumonia"
    # sub-dataset -> labeled class names; None = every class of that manifest
    partial_label_plan: Optional[dict] = None
    seed: int = 0

    @property
    def findings(self) -> list[str]:
        """Motif-bearing findings that appear in pre-training images."""
        return [f for f in (*self.base, *self.novel) if f != NO_FINDING]

    @property
    def all_classes(self) -> list[str]:
        return [*self.base, *self.novel]

    def cooc(self) -> np.ndarray:
        m = self.cooccurrence if self.cooccurrence is not None else default_cooccurrence(self.findings)
        return np.asarray(m, dtype=float)

    def validate(self):
        m = self.cooc()
        n = len(self.findings)
        if m.shape != (n, n):
            raise ValueError(f"co-occurrence matrix must be {n}x{n}")
        if not np.allclose(m, m.T) or (m < 0).any() or (m > 1).any():
            raise ValueError("co-occurrence matrix must be symmetric with entries in [0, 1]")
        if not np.diag(m).any():
            raise ValueError("at least one finding must be eligible as primary")
        if set(self.base) & set(self.novel):
            raise ValueError("base and novel findings overlap")
        if self.noise_sigma < 0 or self.task_noise_sigma < 0 or self.task_contrast <= 0:
            raise ValueError("noise levels must be >= 0 and task_contrast > 0")
        for f in self.findings + [self.composed_motif]:
            if f not in self.motifs:
                raise ValueError(f"no motif for finding {f!r}")
        if len(POSITIVE_TEMPLATES) < 2:
            raise ValueError("every finding needs at least two templates")
        for c in self.composed_constituents:
            if c not in self.base:
                raise ValueError(f"composition constituent {c!r} is not a base finding")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["motifs"] = {k: asdict(v) for k, v in self.motifs.items()}
        d["cooccurrence"] = self.cooc().tolist()
        return d


@dataclass
class CorpusBundle:
    root: Path
    config: GeneratorConfig
    pretrain: dict  # sub-dataset -> manifest path
    tasks: dict  # task name -> task manifest path
    audit: Path


# ---------------------------------------------------------------- rendering

def _grid(size: int):
    ax = (np.arange(size) + 0.5) / size
    return np.meshgrid(ax, ax, indexing="ij")  # (row, col) in [0, 1]


LUNGS = ((0.48, 0.30), (0.48, 0.70))  # (row, col) centres


def _background(rng, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    img = np.full((size, size), 0.42 + rng.uniform(-0.04, 0.04))
    for cy, cx in LUNGS:
        inside = ((yy - cy) / 0.34) ** 2 + ((xx - cx) / 0.17) ** 2 <= 1
        img[inside] = 0.16 + rng.uniform(-0.02, 0.02)
    # normal-size heart shadow
    heart = (np.abs(xx - 0.5) < 0.09) & (np.abs(yy - 0.62) < 0.12)
    img[heart] += 0.18
    return img


def _lung_point(rng, jitter: float) -> tuple[float, float]:
    cy, cx = LUNGS[rng.integers(2)]
    return (cy + rng.uniform(-0.18, 0.18) + rng.normal(0, jitter * 0.3),
            cx + rng.uniform(-0.06, 0.06) + rng.normal(0, jitter * 0.3))


def render_motif(img: np.ndarray, motif: Motif, rng, contrast: float = 1.0) -> None:
    size = img.shape[0]
    yy, xx = _grid(size)
    amp = rng.uniform(*motif.intensity) * contrast
    s = rng.uniform(*motif.size)
    k = motif.kind
    if k == "blob":
        cy, cx = _lung_point(rng, motif.jitter)
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    elif k == "disk":
        cy, cx = _lung_point(rng, motif.jitter)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= s * s] += amp
    elif k == "ring":
        cy, cx = _lung_point(rng, motif.jitter)
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        img[np.abs(r - s) <= 0.022] += amp
    elif k == "bar":
        cy, cx = _lung_point(rng, motif.jitter)
        img[(np.abs(xx - cx) <= 0.03) & (np.abs(yy - cy) <= s / 2)] += amp
    elif k == "cross":
        cy, cx = _lung_point(rng, motif.jitter)
        h = (np.abs(yy - cy) <= 0.018) & (np.abs(xx - cx) <= s)
        v = (np.abs(xx - cx) <= 0.018) & (np.abs(yy - cy) <= s)
        img[h | v] += amp
    elif k == "stripes":
        cy, cx = LUNGS[rng.integers(2)]
        cy += rng.normal(0, motif.jitter)
        region = (np.abs(yy - cy) <= 0.2) & (np.abs(xx - cx) <= 0.12)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (yy + xx) / s + phase) > 0.3
        img[region & wave] += amp
    elif k == "gradient":
        side = LUNGS[rng.integers(2)][1]
        top = 0.82 - s + rng.normal(0, motif.jitter)
        ramp = np.clip((yy - top) / 0.08, 0, 1)
        img += amp * ramp * (np.abs(xx - side) <= 0.18)
    elif k == "rect":
        half_w = s / 2 + rng.normal(0, motif.jitter * 0.3)
        img[(np.abs(xx - 0.5) <= half_w) & (np.abs(yy - 0.64) <= 0.15)] += amp
    else:
        raise ValueError(f"unknown motif kind {k!r}")


def render_image(findings: Sequence[str], config: GeneratorConfig, rng,
                 task: bool = False) -> np.ndarray:
    img = _background(rng, config.image_size)
    contrast = config.task_contrast if task else 1.0
    for f in findings:
        render_motif(img, config.motifs[f], rng, contrast)
    sigma = config.task_noise_sigma if task else config.noise_sigma
    img += rng.normal(0, sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


# ----------------------------------------------------------------- reports

def _display(name: str) -> str:
    return name.replace("_", " ")


_WORD = re.compile(r"[a-z0-9]+")


def label_sentence(text: str, class_names: Sequence[str]) -> np.ndarray:
    """Rule-based sentence labeler: keyword match with preceding-negation cue.

    Normal-report phrases map to ``no_finding``; negated mentions are 0.
    """
    y = np.zeros(len(class_names), dtype=np.int8)
    lowered = text.lower().strip()
    if lowered in NORMAL_SENTENCES:
        if NO_FINDING in class_names:
            y[list(class_names).index(NO_FINDING)] = 1
        return y
    words = _WORD.findall(lowered)
    for c, name in enumerate(class_names):
        if name == NO_FINDING:
            continue
        target = _WORD.findall(_display(name))
        for i in range(len(words) - len(target) + 1):
            if words[i:i + len(target)] == target:
                negated = any(w in NEGATION_CUES for w in words[:i])
                y[c] = 0 if negated else 1
                break
    return y


def write_report(findings: Sequence[str], config: GeneratorConfig, rng) -> list[str]:
    sentences = []
    for f in findings:
        tpl = POSITIVE_TEMPLATES[rng.integers(len(POSITIVE_TEMPLATES))]
        sentences.append(tpl.format(f=_display(f), side=("left", "right")[rng.integers(2)]))
    if not findings:
        sentences.append(NORMAL_SENTENCES[rng.integers(len(NORMAL_SENTENCES))])
    for f in config.findings:
        if f not in findings and rng.random() < config.negation_rate:
            tpl = NEGATIVE_TEMPLATES[rng.integers(len(NEGATIVE_TEMPLATES))]
            sentences.append(tpl.format(f=_display(f)))
    order = rng.permutation(len(sentences))
    return [sentences[i] for i in order]


def sample_findings(config: GeneratorConfig, rng, max_retries: int = 100) -> list[str]:
    """Latent finding set of one pre-training image."""
    if rng.random() < config.normal_rate:
        return []
    findings = config.findings
    m = config.cooc()
    weights = np.diag(m) / np.diag(m).sum()
    for _ in range(max_retries):
        primary = int(rng.choice(len(findings), p=weights))
        chosen = [primary] + [j for j in range(len(findings))
                              if j != primary and rng.random() < m[primary, j]]
        if len(chosen) <= config.max_findings:
            return [findings[j] for j in sorted(chosen)]
    raise GenerationError(
        f"could not satisfy max_findings={config.max_findings} after {max_retries} retries")


def _image_labels(findings: Sequence[str], classes: Sequence[str]) -> np.ndarray:
    y = np.array([1 if c in findings else 0 for c in classes], dtype=np.int8)
    if not y.any() and NO_FINDING in classes:
        y[list(classes).index(NO_FINDING)] = 1
    return y


# --------------------------------------------------------------- assembly

_STREAMS = {"mimic": 1, "chexpert": 2, "padchest": 3}


def _rng(seed: int, stream: int, index: int):
    return np.random.default_rng([seed, stream, index])


def _write_pretrain(root: Path, name: str, n: int, classes: Sequence[str], with_text: bool,
                    config: GeneratorConfig, audit: dict) -> Path:
    img_dir = root / "images" / name
    img_dir.mkdir(parents=True, exist_ok=True)
    path = root / f"{name}.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"classes": list(classes), "source": name}) + "\n")
        for i in range(n):
            rng = _rng(config.seed, _STREAMS[name], i)
            findings = sample_findings(config, rng)
            rel = f"images/{name}/{i:06d}.pgm"
            write_grayscale(root / rel, render_image(findings, config, rng))
            y_img = _image_labels(findings, classes)
            rec = {"image": rel, "y_img": y_img.tolist()}
            if with_text:
                sents = write_report(findings, config, rng)
                rec["sentences"] = [{"text": s, "y_text": label_sentence(s, classes).tolist()}
                                    for s in sents]
            if config.uncertain_rate > 0:
                unc = (rng.random(len(classes)) < config.uncertain_rate) & (y_img == 0)
                if unc.any():
                    rec["y_img"] = np.where(unc, -1, y_img).tolist()
            fh.write(json.dumps(rec) + "\n")
            audit[f"pretrain/{rel}"] = findings
    return path


def _prompt_set(name: str) -> list[str]:
    if name == NO_FINDING:
        return list(NORMAL_SENTENCES[:2])
    d = _display(name)
    return [f"there is {d}", f"{d} is present", f"findings consistent with {d}"]


def _write_task(root: Path, plan: TaskPlan, config: GeneratorConfig, stream: int,
                audit: dict) -> Path:
    img_dir = root / "images" / plan.name
    img_dir.mkdir(parents=True, exist_ok=True)
    splits = {"train": [], "test": []}
    counter = 0
    for split, per_class in (("train", config.train_per_class), ("test", config.test_per_class)):
        for cls in plan.classes:
            for _ in range(per_class):
                rng = _rng(config.seed, stream, counter)
                rel = f"images/{plan.name}/{counter:06d}.pgm"
                findings = list(plan.renders[cls])
                write_grayscale(root / rel, render_image(findings, config, rng, task=True))
                splits[split].append({"image": rel, "label": cls})
                audit[f"tasks/{rel}"] = findings
                counter += 1
    task = {
        "task": plan.name,
        "classes": list(plan.classes),
        "novel": [c in plan.novel for c in plan.classes],
        "prompt_sets": {c: _prompt_set(c) for c in plan.classes},
        "description_sets": {c: list(v) for c, v in plan.descriptions.items()},
        "compositions": {c: list(v) for c, v in plan.compositions.items()},
        "train": splits["train"],
        "test": splits["test"],
    }
    path = root / f"{plan.name}.json"
    path.write_text(json.dumps(task, indent=1), encoding="utf-8")
    return path


def default_task_plans(config: GeneratorConfig) -> list[TaskPlan]:
    motif_base = [f for f in config.base if f != NO_FINDING]
    base5 = TaskPlan("base", tuple(motif_base[:5]), {c: (c,) for c in motif_base[:5]})
    mixed_base = [NO_FINDING] + [f for f in motif_base if f not in config.composed_constituents][-2:]
    mixed_classes = tuple(mixed_base) + tuple(config.novel)
    mixed = TaskPlan("mixed", mixed_classes,
                     {c: (() if c == NO_FINDING else (c,)) for c in mixed_classes},
                     novel=tuple(config.novel))
    return [base5, mixed]


def composed_task_plans(config: GeneratorConfig, novel_name: str,
                        constituents: Sequence[str]) -> list[TaskPlan]:
    for c in constituents:
        if c not in config.base or c == NO_FINDING:
            raise ValueError(f"constituent {c!r} is not a base finding")
    disease = tuple(sorted(set(constituents))) + (config.composed_motif,)
    confuser = (config.confuser, constituents[-1])
    renders = {NO_FINDING: (), novel_name: disease, config.confuser: confuser,
               constituents[0]: (constituents[0],)}
    desc = {novel_name: [f"patchy {' or '.join(_display(c) for c in constituents)}",
                         f"{' or '.join(_display(c) for c in constituents)} is present"]}
    comp = {novel_name: list(constituents)}
    two = TaskPlan(f"{novel_name}2", (NO_FINDING, novel_name),
                   {k: renders[k] for k in (NO_FINDING, novel_name)}, (novel_name,), comp, desc)
    four = TaskPlan(f"{novel_name}4", (NO_FINDING, novel_name, config.confuser, constituents[0]),
                    renders, (novel_name,), comp, desc)
    return [two, four]


def build_composed_task(bundle: CorpusBundle, novel_name: str,
                        constituents: Sequence[str]) -> dict:
    """Write the 2-class and 4-class composed-disease task manifests into ``bundle``."""
    cfg = bundle.config
    audit = json.loads(bundle.audit.read_text())
    out = {}
    task_root = bundle.root / "tasks"
    for k, plan in enumerate(composed_task_plans(cfg, novel_name, constituents)):
        stream = 100 + int(hashlib.sha256(plan.name.encode()).hexdigest()[:6], 16)
        out[plan.name] = _write_task(task_root, plan, cfg, stream, audit["latent"])
    bundle.tasks.update(out)
    _seal(bundle.root, audit["latent"], bundle)
    return out


def _seal(root: Path, latent: dict, bundle: CorpusBundle) -> None:
    digests = {}
    for p in sorted([*bundle.pretrain.values(), *bundle.tasks.values()]):
        digests[str(Path(p).relative_to(root))] = hashlib.sha256(Path(p).read_bytes()).hexdigest()
    audit = {"latent": latent, "manifests": digests}
    body = json.dumps(audit, sort_keys=True)
    audit["seal"] = hashlib.sha256(body.encode()).hexdigest()
    bundle.audit.write_text(json.dumps(audit, sort_keys=True, indent=0))


def generate_corpus(config: GeneratorConfig, out_dir) -> CorpusBundle:
    config.validate()
    root = Path(out_dir)
    (root / "pretrain").mkdir(parents=True, exist_ok=True)
    (root / "tasks").mkdir(parents=True, exist_ok=True)
    latent: dict = {}
    base = list(config.base)
    pre = {
        "mimic": _write_pretrain(root / "pretrain", "mimic", config.n_mimic, base, True, config, latent),
        "chexpert": _write_pretrain(root / "pretrain", "chexpert", config.n_chexpert, base, False,
                                    config, latent),
    }
    if config.n_padchest > 0:
        pre["padchest"] = _write_pretrain(root / "pretrain", "padchest", config.n_padchest,
                                          config.all_classes, False, config, latent)
    tasks = {}
    for k, plan in enumerate(default_task_plans(config)):
        tasks[plan.name] = _write_task(root / "tasks", plan, config, 10 + k, latent)
    bundle = CorpusBundle(root, config, pre, tasks, root / "audit.json")
    (root / "generator_config.json").write_text(json.dumps(config.to_dict(), indent=1))
    bundle.audit.write_text(json.dumps({"latent": latent}))
    if config.partial_label_plan:
        for name, path in pre.items():
            if name in config.partial_label_plan:
                apply_partial_labels(path, {name: config.partial_label_plan[name]}, path)
    build_composed_task(bundle, config.composed_name, config.composed_constituents)
    return bundle


def load_bundle(root) -> CorpusBundle:
    root = Path(root)
    raw = json.loads((root / "generator_config.json").read_text())
    raw["motifs"] = {k: Motif(**{**v, "intensity": tuple(v["intensity"]), "size": tuple(v["size"])})
                     for k, v in raw["motifs"].items()}
    for key in ("base", "novel", "composed_constituents"):
        raw[key] = tuple(raw[key])
    cfg = GeneratorConfig(**raw)
    pre = {p.stem: p for p in sorted((root / "pretrain").glob("*.jsonl"))}
    tasks = {p.stem: p for p in sorted((root / "tasks").glob("*.json"))}
    return CorpusBundle(root, cfg, pre, tasks, root / "audit.json")


def apply_partial_labels(manifest_path, plan: Mapping[str, Sequence], out_path) -> Path:
    """Give every sample of each planned sub-dataset that sub-dataset's class mask.

    ``plan`` maps a source id to either a 0/1 vector or a list of labeled
    class names; labels under a zero mask are written as 0 and flagged unknown.
    """
    loaded = load_manifest(manifest_path, load_images=False)
    catalog: ClassCatalog = loaded.catalog
    sources = {s.source_id for s in loaded.samples}
    unknown = sorted(set(plan) - sources)
    if unknown:
        raise KeyError(f"annotation plan covers unknown sub-dataset(s) {unknown}")
    masks = {}
    for src, spec in plan.items():
        spec = list(spec)
        if spec and all(isinstance(v, str) for v in spec):
            bad = [v for v in spec if v not in catalog.names]
            if bad:
                raise KeyError(f"plan for {src!r} names unknown classes {bad}")
            masks[src] = np.array([1 if n in spec else 0 for n in catalog.names], dtype=np.int8)
        else:
            if len(spec) != len(catalog):
                raise ValueError(f"mask for {src!r} has length {len(spec)}, expected {len(catalog)}")
            masks[src] = np.asarray(spec, dtype=np.int8)
    for s in loaded.samples:
        if s.source_id in masks:
            m = masks[s.source_id]
            s.annotation_mask = m.copy()
            s.image_labels = (s.image_labels * m).astype(np.int8)
            s.sentence_labels = (s.sentence_labels * m).astype(np.int8)
    write_manifest(out_path, loaded.samples, catalog, source=loaded.header.get("source"))
    return Path(out_path)


def latent_indicators(findings: Sequence[str], vocabulary: Sequence[str]) -> np.ndarray:
    return np.array([1.0 if f in findings else 0.0 for f in vocabulary])
