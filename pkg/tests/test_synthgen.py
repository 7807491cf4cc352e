import dataclasses
import hashlib
import json

import numpy as np
import pytest

from vlpretrain.datamodel import NO_FINDING, load_manifest, read_grayscale
from vlpretrain.synthgen import (GenerationError, GeneratorConfig, apply_partial_labels,
                                 generate_corpus, label_sentence, latent_indicators, load_bundle,
                                 sample_findings)
from vlpretrain.transfer import ProbeSpec, linear_probe, load_task
from vlpretrain.datamodel import aca

from conftest import TINY


def _small(**kw):
    return dataclasses.replace(TINY, n_mimic=40, n_chexpert=20, n_padchest=20, train_per_class=2,
                               test_per_class=2, **kw)


def test_manifests_load_and_sentence_subset(tiny_corpus):
    for name, path in tiny_corpus.pretrain.items():
        lm = load_manifest(path)
        assert lm.samples
        for s in lm.samples:
            assert np.all(s.sentence_labels <= s.image_labels), name
            assert s.image.shape == (24, 24, 1)


def test_multi_finding_sentences_differ_from_image_labels(tiny_corpus):
    lm = load_manifest(tiny_corpus.pretrain["mimic"], load_images=False)
    multi = [s for s in lm.samples if s.image_labels.sum() >= 2 and s.sentence_labels.sum() == 1]
    assert multi, "expected a sentence naming one of several findings"
    for s in multi:
        assert s.image_labels.sum() > s.sentence_labels.sum()


def test_no_negation_single_finding_labels_agree(tmp_path):
    cfg = _small(negation_rate=0.0, max_findings=1)
    b = generate_corpus(cfg, tmp_path)
    lm = load_manifest(b.pretrain["mimic"], load_images=False)
    for s in lm.samples:
        np.testing.assert_array_equal(s.sentence_labels, s.image_labels)


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_same_seed_is_byte_identical(tmp_path):
    a = generate_corpus(_small(), tmp_path / "a")
    b = generate_corpus(_small(), tmp_path / "b")
    assert _tree_digest(a.root) == _tree_digest(b.root)
    c = generate_corpus(_small(seed=1), tmp_path / "c")
    img_a = read_grayscale(a.root / "pretrain" / "images" / "mimic" / "000000.pgm")
    img_c = read_grayscale(c.root / "pretrain" / "images" / "mimic" / "000000.pgm")
    assert not np.array_equal(img_a, img_c)


def test_audit_is_sealed_and_latent_hidden(tiny_corpus):
    audit = json.loads(tiny_corpus.audit.read_text())
    seal = audit.pop("seal")
    assert hashlib.sha256(json.dumps(audit, sort_keys=True).encode()).hexdigest() == seal
    for rel, digest in audit["manifests"].items():
        assert hashlib.sha256((tiny_corpus.root / rel).read_bytes()).hexdigest() == digest
    text = tiny_corpus.pretrain["mimic"].read_text()
    assert "latent" not in text and "ground_glass" not in text


def test_tasks_balanced_and_structured(tiny_corpus):
    for name, path in tiny_corpus.tasks.items():
        t = load_task(path)
        assert len(t.novel_flags) == len(t.classes)
        for labels, per in ((t.train_labels, TINY.train_per_class), (t.test_labels, TINY.test_per_class)):
            assert np.bincount(labels, minlength=len(t.classes)).tolist() == [per] * len(t.classes)
        assert set(t.prompt_sets) == set(t.classes)
    c2 = load_task(tiny_corpus.tasks["covid2"])
    assert c2.classes == [NO_FINDING, "covid"]
    c4 = load_task(tiny_corpus.tasks["covid4"])
    assert len(c4.classes) == 4 and 1 / len(c4.classes) == 0.25
    assert c4.compositions["covid"] == ["opacity", "consolidation"]
    assert c4.description_sets["covid"]
    # the confuser shares a constituent with the composed disease
    audit = json.loads(tiny_corpus.audit.read_text())["latent"]
    items = json.loads(tiny_corpus.tasks["covid4"].read_text())["test"]
    latent = {it["label"]: set(audit["tasks/" + it["image"]]) for it in items}
    assert latent["pneumonia"] & latent["covid"]
    mixed = load_task(tiny_corpus.tasks["mixed"])
    assert [c for c, f in zip(mixed.classes, mixed.novel_flags) if f] == ["mass", "fibrosis"]


def test_tasks_realizable_from_latents(tiny_corpus):
    audit = json.loads(tiny_corpus.audit.read_text())["latent"]
    vocab = list(TINY.findings) + [TINY.composed_motif]
    for name, path in tiny_corpus.tasks.items():
        raw = json.loads(path.read_text())
        classes = raw["classes"]

        def xy(split):
            X = np.stack([latent_indicators(audit["tasks/" + it["image"]], vocab) for it in raw[split]])
            y = np.array([classes.index(it["label"]) for it in raw[split]])
            return X, y

        Xtr, ytr = xy("train")
        Xte, yte = xy("test")
        clf = linear_probe(Xtr * 5.0, ytr, ProbeSpec(k_shots=2, c_sweep=(100.0,)))
        assert aca(clf.predict(Xte * 5.0), yte, range(len(classes))) == 1.0, name


def test_partial_labels(tiny_corpus, tmp_path):
    src = tiny_corpus.pretrain["padchest"]
    names = list(load_manifest(src, load_images=False).catalog.names)
    ones = apply_partial_labels(src, {"padchest": [1] * len(names)}, tmp_path / "ones.jsonl")
    a = load_manifest(src, load_images=False).samples
    b = load_manifest(ones, load_images=False).samples
    assert [s.image_labels.tolist() for s in a] == [s.image_labels.tolist() for s in b]
    assert all(s.annotation_mask.all() for s in b)
    keep = [n for n in names if n != "mass"]
    out = apply_partial_labels(src, {"padchest": keep}, tmp_path / "part.jsonl")
    m = load_manifest(out, load_images=False)
    j = names.index("mass")
    assert all(s.annotation_mask[j] == 0 and s.image_labels[j] == 0 for s in m.samples)
    with pytest.raises(KeyError):
        apply_partial_labels(src, {"nonexistent": keep}, tmp_path / "bad.jsonl")


def test_label_sentence_rules():
    names = [NO_FINDING, "opacity", "effusion", "mass"]
    assert label_sentence("there is left opacity", names).tolist() == [0, 1, 0, 0]
    assert label_sentence("no effusion", names).tolist() == [0, 0, 0, 0]
    assert label_sentence("the lungs are clear", names).tolist() == [1, 0, 0, 0]


def test_generator_errors():
    cfg = dataclasses.replace(TINY, normal_rate=0.0, max_findings=0)
    with pytest.raises(GenerationError):
        sample_findings(cfg, np.random.default_rng(0), max_retries=5)
    n = len(TINY.findings)
    bad = dataclasses.replace(TINY, cooccurrence=[[1.0] * (n - 1) + [0.5]] + [[0.0] * n] * (n - 1))
    with pytest.raises(ValueError, match="symmetric"):
        bad.validate()
    with pytest.raises(ValueError):
        dataclasses.replace(TINY, composed_constituents=("mass",)).validate()


def test_load_bundle_roundtrip(tiny_corpus):
    b = load_bundle(tiny_corpus.root)
    assert b.config.to_dict() == tiny_corpus.config.to_dict()
    assert set(b.tasks) == {"base", "mixed", "covid2", "covid4"}
