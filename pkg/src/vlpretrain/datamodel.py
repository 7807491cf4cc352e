"""Core data types, JSON-lines manifest I/O, batching and the ACA metric."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

NO_FINDING = "no_finding"


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifests."""


@dataclass
class Sample:
    """One (image, image labels, sentence, sentence labels) quadruplet.

    ``sentence`` is None for label-only sources; the training harness fills
    it from a class-name template when an objective needs text.
    """

    image: np.ndarray  # H x W x channels, float32 in [0, 1]
    image_labels: np.ndarray
    sentence: Optional[str]
    sentence_labels: np.ndarray
    annotation_mask: np.ndarray
    source_id: str
    image_ref: str = ""

    def __post_init__(self):
        if len(self.image_labels) != len(self.sentence_labels):
            raise ManifestError("image_labels and sentence_labels differ in length")
        if len(self.annotation_mask) != len(self.image_labels):
            raise ManifestError("annotation_mask length differs from label length")


@dataclass(frozen=True)
class ClassCatalog:
    names: tuple[str, ...]
    base_set: tuple[int, ...]
    novel_set: tuple[int, ...] = ()

    def __post_init__(self):
        if set(self.base_set) & set(self.novel_set):
            raise ValueError("base and novel sets overlap")
        n = len(self.names)
        if any(i < 0 or i >= n for i in (*self.base_set, *self.novel_set)):
            raise ValueError("class index out of range")
        if len(set(self.names)) != n:
            raise ValueError("duplicate class names")

    @classmethod
    def from_names(cls, names: Sequence[str], novel: Sequence[str] = ()) -> "ClassCatalog":
        names = tuple(names)
        novel_idx = tuple(names.index(n) for n in novel)
        base_idx = tuple(i for i in range(len(names)) if i not in novel_idx)
        return cls(names, base_idx, novel_idx)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def base_names(self) -> list[str]:
        return [self.names[i] for i in self.base_set]

    @property
    def novel_names(self) -> list[str]:
        return [self.names[i] for i in self.novel_set]

    def __len__(self):
        return len(self.names)


@dataclass
class Batch:
    images: np.ndarray  # B x H x W x channels
    y_img: np.ndarray
    sentences: list
    y_text: np.ndarray
    masks: np.ndarray

    def __post_init__(self):
        n = len(self.images)
        if n < 1:
            raise ValueError("empty batch")
        if not (len(self.y_img) == len(self.sentences) == len(self.y_text) == len(self.masks) == n):
            raise ValueError("batch fields disagree on leading dimension")

    def __len__(self):
        return len(self.images)


@dataclass
class EvalReport:
    task_name: str
    seed: int
    k_shots: object  # int or "zero-shot"
    per_class_recall: dict
    aca_base: Optional[float]
    aca_novel: Optional[float]
    aca_all: float
    protocol: str = ""
    checkpoint: str = ""


@dataclass
class LoadedManifest:
    samples: list
    catalog: ClassCatalog
    uncertain_coerced: int = 0
    no_finding_assigned: int = 0
    header: dict = field(default_factory=dict)

    # lets callers write ``samples, catalog = load_manifest(p)``
    def __iter__(self):
        return iter((self.samples, self.catalog))


def read_grayscale(path) -> np.ndarray:
    """Read an 8-bit grayscale image as H x W x 1 float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return (arr.astype(np.float32) / 255.0)[:, :, None]


def write_grayscale(path, image: np.ndarray) -> None:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path)


def _label_vector(values, n_classes: int, lineno: int, what: str) -> tuple[np.ndarray, int]:
    if not isinstance(values, list):
        raise ManifestError(f"line {lineno}: {what} must be a list")
    if len(values) != n_classes:
        raise ManifestError(
            f"line {lineno}: {what} has length {len(values)}, expected {n_classes}")
    arr = np.asarray(values, dtype=np.int64)
    if not np.isin(arr, (-1, 0, 1)).all():
        raise ManifestError(f"line {lineno}: {what} entries must be 0, 1 or -1")
    n_uncertain = int((arr == -1).sum())
    arr[arr == -1] = 0
    return arr.astype(np.int8), n_uncertain


def load_manifest(path, load_images: bool = True, image_cache: Optional[dict] = None) -> LoadedManifest:
    """Load a JSON-lines manifest; a record with S sentences yields S samples.

    Uncertain labels (-1) are coerced to 0. A report without any positive
    finding gets the ``no_finding`` class when the catalog has one.
    """
    path = Path(path)
    root = path.parent
    header = None
    samples: list[Sample] = []
    uncertain = 0
    nf_assigned = 0
    cache = image_cache if image_cache is not None else {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ManifestError(f"line {lineno}: record is not an object")
            if header is None:
                if "classes" not in rec:
                    raise ManifestError(f"line {lineno}: first record must be a header with 'classes'")
                header = rec
                catalog = ClassCatalog.from_names(rec["classes"], rec.get("novel", ()))
                n_classes = len(catalog)
                default_source = rec.get("source", path.stem)
                continue
            if "image" not in rec or "y_img" not in rec:
                raise ManifestError(f"line {lineno}: record needs 'image' and 'y_img'")
            y_img, nu = _label_vector(rec["y_img"], n_classes, lineno, "y_img")
            uncertain += nu
            if "mask" in rec:
                mask, _ = _label_vector(rec["mask"], n_classes, lineno, "mask")
            else:
                mask = np.ones(n_classes, dtype=np.int8)
            sentences = rec.get("sentences", [])
            if not isinstance(sentences, list):
                raise ManifestError(f"line {lineno}: 'sentences' must be a list")
            parsed = []
            for s in sentences:
                if not isinstance(s, dict) or "text" not in s or "y_text" not in s:
                    raise ManifestError(f"line {lineno}: sentence needs 'text' and 'y_text'")
                yt, nu = _label_vector(s["y_text"], n_classes, lineno, "y_text")
                uncertain += nu
                parsed.append((str(s["text"]), yt))
            if NO_FINDING in catalog.names:
                nf = catalog.index(NO_FINDING)
                if not y_img.any() and mask[nf]:
                    y_img = y_img.copy()
                    y_img[nf] = 1
                    nf_assigned += 1
            ref = str(rec["image"])
            if load_images:
                if ref not in cache:
                    cache[ref] = read_grayscale(root / ref)
                image = cache[ref]
            else:
                image = np.zeros((0, 0, 1), dtype=np.float32)
            source = str(rec.get("source", default_source))
            if not parsed:
                samples.append(Sample(image, y_img, None, y_img.copy(), mask, source, ref))
            for text, yt in parsed:
                samples.append(Sample(image, y_img, text, yt, mask, source, ref))
    if header is None:
        raise ManifestError("no samples: manifest is empty")
    if not samples:
        raise ManifestError("no samples: manifest has a header but no records")
    if uncertain:
        logger.info("%s: %d uncertain labels coerced to 0", path, uncertain)
    return LoadedManifest(samples, catalog, uncertain, nf_assigned, header)


def write_manifest(path, samples: Sequence[Sample], catalog: ClassCatalog,
                   source: Optional[str] = None) -> None:
    """Serialize samples back into records, regrouping sentences by image."""
    records: dict[str, dict] = {}
    for s in samples:
        rec = records.get(s.image_ref)
        if rec is None:
            rec = {"image": s.image_ref, "y_img": [int(v) for v in s.image_labels],
                   "mask": [int(v) for v in s.annotation_mask], "source": s.source_id,
                   "sentences": []}
            records[s.image_ref] = rec
        if s.sentence is not None:
            rec["sentences"].append({"text": s.sentence,
                                     "y_text": [int(v) for v in s.sentence_labels]})
    header = {"classes": list(catalog.names)}
    if catalog.novel_set:
        header["novel"] = catalog.novel_names
    if source is not None:
        header["source"] = source
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records.values():
            if not rec["sentences"]:
                del rec["sentences"]
            fh.write(json.dumps(rec) + "\n")


def make_batches(samples: Sequence[Sample], batch_size: int, seed: int) -> Iterator[Batch]:
    """One epoch over ``samples`` in a seed-determined order; the short tail batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        yield collate(chunk)


def collate(chunk: Sequence[Sample]) -> Batch:
    return Batch(
        images=np.stack([s.image for s in chunk]),
        y_img=np.stack([s.image_labels for s in chunk]),
        sentences=[s.sentence for s in chunk],
        y_text=np.stack([s.sentence_labels for s in chunk]),
        masks=np.stack([s.annotation_mask for s in chunk]),
    )


def per_class_recall(predictions, truths, class_subset) -> dict:
    """Recall for each class of ``class_subset`` that has at least one truth."""
    predictions = np.asarray(predictions)
    truths = np.asarray(truths)
    if predictions.shape != truths.shape:
        raise ValueError("predictions and truths differ in length")
    out = {}
    for c in class_subset:
        hit = truths == c
        n = int(hit.sum())
        if n:
            out[int(c)] = float((predictions[hit] == c).sum()) / n
    return out


def aca(predictions, truths, class_subset) -> float:
    """Average class-wise accuracy: mean per-class recall over ``class_subset``.

    Classes without any truth are left out of the mean.
    """
    truths_arr = np.asarray(truths)
    subset = set(int(c) for c in class_subset)
    if truths_arr.size and not np.isin(truths_arr, list(subset)).all():
        raise ValueError("every truth must belong to class_subset")
    recalls = per_class_recall(predictions, truths, sorted(subset))
    if not recalls:
        raise ValueError("empty evaluation subset")
    return float(np.mean(list(recalls.values())))
