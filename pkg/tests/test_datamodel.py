import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlpretrain.datamodel import (NO_FINDING, Batch, ClassCatalog, ManifestError, Sample, aca,
                                  collate, load_manifest, make_batches, per_class_recall,
                                  write_grayscale, write_manifest)

import oracles


def _write(tmp_path, lines, name="m.jsonl"):
    p = tmp_path / name
    p.write_text("\n".join(json.dumps(l) if not isinstance(l, str) else l for l in lines) + "\n")
    return p


@pytest.fixture
def images(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(3):
        write_grayscale(tmp_path / f"im{i}.pgm", rng.uniform(size=(8, 8)))
    return tmp_path


HEADER = {"classes": [NO_FINDING, "opacity", "effusion"], "source": "toy"}


def test_two_sentences_give_two_samples(images):
    p = _write(images, [HEADER, {"image": "im0.pgm", "y_img": [0, 1, 1], "sentences": [
        {"text": "there is opacity", "y_text": [0, 1, 0]},
        {"text": "small effusion", "y_text": [0, 0, 1]}]}])
    samples, catalog = load_manifest(p)
    assert len(samples) == 2
    assert list(catalog.names) == HEADER["classes"]
    np.testing.assert_array_equal(samples[0].image_labels, samples[1].image_labels)
    assert not np.array_equal(samples[0].sentence_labels, samples[1].sentence_labels)
    assert samples[0].image is samples[1].image
    assert samples[0].image.shape == (8, 8, 1)
    assert 0.0 <= samples[0].image.min() and samples[0].image.max() <= 1.0


def test_empty_manifest_errors(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    with pytest.raises(ManifestError, match="no samples"):
        load_manifest(p)
    p2 = _write(tmp_path, [HEADER], "header_only.jsonl")
    with pytest.raises(ManifestError, match="no samples"):
        load_manifest(p2)


def test_missing_mask_defaults_to_ones(images):
    p = _write(images, [HEADER, {"image": "im0.pgm", "y_img": [0, 1, 0]}])
    lm = load_manifest(p)
    np.testing.assert_array_equal(lm.samples[0].annotation_mask, [1, 1, 1])
    # label-only record: no sentence, sentence labels mirror image labels
    assert lm.samples[0].sentence is None
    np.testing.assert_array_equal(lm.samples[0].sentence_labels, [0, 1, 0])


def test_malformed_record_reports_line_number(images):
    p = _write(images, [HEADER, {"image": "im0.pgm", "y_img": [0, 1, 0]}, "{not json"])
    with pytest.raises(ManifestError, match="line 3"):
        load_manifest(p)


def test_length_mismatch_is_hard_error(images):
    p = _write(images, [HEADER, {"image": "im0.pgm", "y_img": [0, 1]}])
    with pytest.raises(ManifestError, match="line 2"):
        load_manifest(p)
    p = _write(images, [HEADER, {"image": "im0.pgm", "y_img": [0, 1, 0],
                                 "sentences": [{"text": "x", "y_text": [1]}]}])
    with pytest.raises(ManifestError):
        load_manifest(p)


def test_uncertain_coerced_and_counted(images):
    p = _write(images, [HEADER, {"image": "im0.pgm", "y_img": [0, -1, 1],
                                 "sentences": [{"text": "maybe", "y_text": [0, -1, 0]}]}])
    lm = load_manifest(p)
    assert lm.uncertain_coerced == 2
    np.testing.assert_array_equal(lm.samples[0].image_labels, [0, 0, 1])


def test_no_finding_assigned(images):
    p = _write(images, [HEADER, {"image": "im0.pgm", "y_img": [0, 0, 0],
                                 "sentences": [{"text": "clear", "y_text": [0, 0, 0]}]},
                        {"image": "im1.pgm", "y_img": [0, 0, 0], "mask": [0, 1, 1]}])
    lm = load_manifest(p)
    assert lm.no_finding_assigned == 1
    assert lm.samples[0].image_labels[0] == 1
    # masked no_finding stays unknown
    assert lm.samples[1].image_labels[0] == 0


def test_roundtrip_labels_lossless(images, tmp_path):
    recs = [HEADER,
            {"image": "im0.pgm", "y_img": [0, 1, 1], "mask": [1, 1, 0], "sentences": [
                {"text": "a", "y_text": [0, 1, 0]}, {"text": "b", "y_text": [0, 0, 1]}]},
            {"image": "im1.pgm", "y_img": [1, 0, 0]}]
    p = _write(images, recs)
    lm = load_manifest(p)
    out = images / "again.jsonl"
    write_manifest(out, lm.samples, lm.catalog, source="toy")
    lm2 = load_manifest(out)
    for a, b in zip(lm.samples, lm2.samples):
        assert a.image_labels.tobytes() == b.image_labels.tobytes()
        assert a.sentence_labels.tobytes() == b.sentence_labels.tobytes()
        assert a.annotation_mask.tobytes() == b.annotation_mask.tobytes()
        assert a.sentence == b.sentence


def test_catalog_invariants():
    c = ClassCatalog.from_names(["a", "b", "c"], novel=["c"])
    assert c.base_names == ["a", "b"] and c.novel_names == ["c"]
    with pytest.raises(ValueError):
        ClassCatalog(("a", "b"), frozenset({0}), frozenset({0}))
    with pytest.raises(ValueError):
        ClassCatalog(("a", "a"), frozenset({0, 1}), frozenset())


def _samples(n, c=3):
    rng = np.random.default_rng(1)
    out = []
    for i in range(n):
        y = rng.integers(0, 2, size=c).astype(np.int8)
        out.append(Sample(np.full((4, 4, 1), i, np.float32), y, f"s{i}", y.copy(),
                          np.ones(c, np.int8), "toy", f"im{i}"))
    return out


def test_batches_sizes_and_determinism():
    s = _samples(10)
    sizes = [len(b) for b in make_batches(s, 4, seed=0)]
    assert sizes == [4, 4, 2]
    a = [b.sentences for b in make_batches(s, 4, seed=3)]
    b = [b.sentences for b in make_batches(s, 4, seed=3)]
    assert a == b
    c = [b.sentences for b in make_batches(s, 4, seed=4)]
    assert a != c


def test_batches_are_a_permutation():
    s = _samples(13)
    seen = [x for b in make_batches(s, 5, seed=7) for x in b.sentences]
    assert sorted(seen) == sorted(x.sentence for x in s)


def test_batch_validation():
    with pytest.raises(ValueError):
        list(make_batches(_samples(3), 0, seed=0))
    b = collate(_samples(2))
    assert isinstance(b, Batch) and b.y_img.shape == (2, 3)


def test_aca_examples():
    assert aca([0, 1, 1, 1], [0, 0, 1, 1], [0, 1]) == 0.75
    assert aca([2, 0, 1], [2, 0, 1], [0, 1, 2]) == 1.0
    # recalls 1.0, 0.0, 0.5
    truths = [0, 0, 1, 1, 2, 2]
    preds = [0, 0, 0, 2, 2, 0]
    assert aca(preds, truths, [0, 1, 2]) == pytest.approx(0.5)
    assert aca(preds, truths, [0, 1, 2]) == oracles.confusion_aca(preds, truths, [0, 1, 2])


def test_aca_errors_and_exclusion():
    with pytest.raises(ValueError, match="empty evaluation subset"):
        aca([], [], [0, 1])
    # class 2 has no truths: excluded
    assert aca([0, 1], [0, 1], [0, 1, 2]) == 1.0
    assert per_class_recall([0, 1], [0, 1], [0, 1, 2]) == {0: 1.0, 1: 1.0}


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40),
       st.integers(0, 3))
def test_aca_imbalance_invariance(pairs, dup_class):
    preds = [p for p, _ in pairs]
    truths = [t for _, t in pairs]
    base = aca(preds, truths, range(4))
    extra = [(p, t) for p, t in pairs if t == dup_class]
    preds2 = preds + [p for p, _ in extra]
    truths2 = truths + [t for _, t in extra]
    assert aca(preds2, truths2, range(4)) == pytest.approx(base, abs=1e-12)


def test_aca_equals_accuracy_when_balanced():
    rng = np.random.default_rng(2)
    truths = np.repeat(np.arange(4), 25)
    preds = rng.integers(0, 4, size=truths.size)
    assert aca(preds, truths, range(4)) == pytest.approx(float((preds == truths).mean()), abs=1e-12)
