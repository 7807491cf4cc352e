import numpy as np
import pytest
import torch

from vlpretrain.checkpoint import load_checkpoint
from vlpretrain.datamodel import aca
from vlpretrain.encoders import (EncoderConfig, FEATURES, Prototype, PrototypeBank,
                                 build_toy_encoders, encode_images)
from vlpretrain.transfer import (CatalogMismatch, ProbeSpec, Protocol, UnresolvableClass,
                                 aggregate_reports, build_zero_shot_spec, cosine_scores,
                                 evaluate_task, linear_probe, load_task, resolve_bank,
                                 sample_few_shot, zero_shot_predict, zero_shot_unimodal)


@pytest.fixture(scope="module")
def ckpts(tiny_runs):
    return {k: load_checkpoint(r.checkpoint) for k, r in tiny_runs.items()}


@pytest.fixture(scope="module")
def tasks(tiny_corpus):
    return {k: load_task(p) for k, p in tiny_corpus.tasks.items()}


def _identity_encoder(d=4):
    vision, _ = build_toy_encoders(EncoderConfig(image_size=8, channels=(2,), feature_dim=d,
                                                 proj_dim=d), seed=0, with_text=False)
    with torch.no_grad():
        vision.projections["shared"].weight.copy_(torch.eye(d))
        vision.projections["shared"].bias.zero_()
    return vision.eval()


def _basis_bank(d=4):
    return PrototypeBank(tuple(Prototype(f"c{i}", torch.eye(d)[i], "learned_weight", "shared")
                               for i in range(d)))


def test_orthonormal_prototypes():
    vision = _identity_encoder()
    feats = torch.eye(4)[:1]
    scores, pred = zero_shot_predict(vision, _basis_bank(), features=feats)
    assert pred.tolist() == [0]
    expected = torch.softmax(torch.tensor([1.0, 0, 0, 0], dtype=torch.float64), 0).numpy()
    np.testing.assert_allclose(scores[0], expected, atol=1e-7)


def test_argmax_invariant_to_increasing_transform():
    vision = _identity_encoder()
    rng = np.random.default_rng(0)
    feats = torch.as_tensor(rng.normal(size=(20, 4)), dtype=torch.float32)
    bank = PrototypeBank(tuple(Prototype(f"c{i}", torch.nn.functional.normalize(
        torch.as_tensor(rng.normal(size=4), dtype=torch.float32), dim=0), "learned_weight", "shared")
        for i in range(3)))
    cos = cosine_scores(vision, bank, features=feats)
    _, pred = zero_shot_predict(vision, bank, features=feats)
    for f in (lambda x: 3.0 * x, lambda x: torch.exp(5 * x), lambda x: x ** 3 + 2 * x):
        assert torch.equal(torch.softmax(f(cos), 1).argmax(1), torch.as_tensor(pred))
    # restriction keeps relative ordering among retained classes
    sub = cosine_scores(vision, bank.restrict(["c2", "c0"]), features=feats)
    torch.testing.assert_close(sub, cos[:, [2, 0]])


def test_dlilp_routing_matches_weight_retrieval(ckpts, tasks):
    ck = ckpts["dlilp"]
    task = tasks["base"]
    spec = build_zero_shot_spec(ck, task)
    assert set(spec.routing.values()) == {"I-L"}
    assert {s[0] for s in spec.sources.values()} == {"learned_weight"}
    bank = resolve_bank(ck, spec, task)
    s_route, p_route = zero_shot_predict(ck.vision, bank, task.test_images, classes=task.classes)
    s_uni, p_uni = zero_shot_unimodal(ck.state.W, ck.class_names, task.classes, task.test_images,
                                      ck.vision, head="I-L")
    assert np.abs(s_route - s_uni).max() <= 1e-6
    assert np.array_equal(p_route, p_uni)


def test_mixed_routing_for_dlilp(ckpts, tasks):
    spec = build_zero_shot_spec(ckpts["dlilp"], tasks["mixed"])
    for c, novel in zip(tasks["mixed"].classes, tasks["mixed"].novel_flags):
        if novel:
            assert spec.routing[c] == "I-T" and spec.sources[c][0] == "text_prompt"
        else:
            assert spec.routing[c] == "I-L" and spec.sources[c][0] == "learned_weight"
    spec = build_zero_shot_spec(ckpts["clip"], tasks["mixed"])
    assert set(spec.routing.values()) == {"shared"}
    assert {s[0] for s in spec.sources.values()} == {"text_prompt"}


def test_unresolvable_class_is_named(ckpts, tasks):
    with pytest.raises(UnresolvableClass, match="mass"):
        build_zero_shot_spec(ckpts["unimodal"], tasks["mixed"])
    with pytest.raises(UnresolvableClass, match="mass"):
        zero_shot_unimodal(ckpts["unimodal"].state.W, ckpts["unimodal"].class_names,
                           ["effusion", "mass"], tasks["mixed"].test_images, ckpts["unimodal"].vision)


def test_catalog_mismatch(ckpts, tasks):
    import dataclasses

    t = dataclasses.replace(tasks["mixed"], novel_flags=[False] * len(tasks["mixed"].classes))
    with pytest.raises(CatalogMismatch, match="mass"):
        evaluate_task(ckpts["dlilp"], t, "zero_shot", [0])


def test_unimodal_restriction(ckpts, tasks):
    ck = ckpts["unimodal"]
    task = tasks["base"]
    full, _ = zero_shot_unimodal(ck.state.W, ck.class_names, ck.class_names, task.test_images, ck.vision)
    sub, pred = zero_shot_unimodal(ck.state.W, ck.class_names, task.classes, task.test_images, ck.vision)
    cols = [ck.class_names.index(c) for c in task.classes]
    assert np.array_equal(np.asarray(full)[:, cols].argmax(1), pred)
    two, p2 = zero_shot_unimodal(ck.state.W, ck.class_names, ["opacity", "effusion"], task.test_images,
                                 ck.vision)
    assert two.shape[1] == 2 and set(np.unique(p2)) <= {0, 1}


def test_composed_unimodal_runs(ckpts, tasks):
    reps = evaluate_task(ckpts["unimodal"], tasks["covid4"], "zero_shot:composed", [0])
    assert reps[0].aca_all is not None and 0.0 <= reps[0].aca_all <= 1.0
    spec = build_zero_shot_spec(ckpts["unimodal"], tasks["covid4"], "composed")
    bank = resolve_bank(ckpts["unimodal"], spec, tasks["covid4"])
    assert bank.get("covid").provenance == "composed"
    assert bank.get("covid").constituents == ("opacity", "consolidation")


def test_sample_few_shot():
    labels = np.repeat(np.arange(5), 20)
    assert len(sample_few_shot(labels, 1, range(5), seed=0)) == 5
    a = sample_few_shot(labels, 4, range(5), seed=3)
    assert np.array_equal(a, sample_few_shot(labels, 4, range(5), seed=3))
    assert not np.array_equal(a, sample_few_shot(labels, 4, range(5), seed=4))
    s16 = sample_few_shot(labels, 16, range(5), seed=0)
    assert len(s16) == 80 and len(set(s16.tolist())) == 80
    assert np.bincount(labels[s16]).tolist() == [16] * 5
    with pytest.raises(ValueError, match=r"\{3: 2\}"):
        sample_few_shot(np.array([0, 0, 0, 3, 3]), 3, [0, 3], seed=0)


def test_linear_probe_separable_and_deterministic():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(-3, 0.5, size=(8, 3)), rng.normal(3, 0.5, size=(8, 3))])
    y = np.repeat([0, 1], 8)
    clf = linear_probe(X, y, ProbeSpec(k_shots=8))
    assert (clf.predict(X) == y).mean() == 1.0
    assert clf.chosen_C_ in (0.01, 0.1, 1.0, 10.0, 100.0)
    again = linear_probe(X, y, ProbeSpec(k_shots=8))
    test = rng.normal(0, 3, size=(50, 3))
    assert np.array_equal(clf.predict(test), again.predict(test))
    # zero-variance features still train
    flat = linear_probe(np.ones((4, 3)), [0, 1, 0, 1], ProbeSpec(k_shots=2))
    assert flat.predict(np.ones((1, 3))).shape == (1,)


def test_linear_probe_duplicated_columns():
    rng = np.random.default_rng(1)
    centers = rng.normal(0, 4, size=(3, 4))
    X = np.concatenate([c + rng.normal(0, 0.3, size=(2, 4)) for c in centers])
    y = np.repeat(np.arange(3), 2)
    test = np.concatenate([c + rng.normal(0, 0.3, size=(30, 4)) for c in centers])
    spec = ProbeSpec(k_shots=2)
    a = linear_probe(X, y, spec).predict(test)
    b = linear_probe(np.concatenate([X, X[:, :2]], 1), y, spec).predict(np.concatenate([test, test[:, :2]], 1))
    assert np.array_equal(a, b)


def test_protocol_parse():
    assert str(Protocol.parse("zero_shot")) == "zero_shot"
    assert Protocol.parse("zero_shot:composed").novel_source == "composed"
    p = Protocol.parse("probe:16:projected")
    assert (p.k, p.feature_tap) == (16, "projected")
    for bad in ("probe", "zero_shot:nonsense", "linear:3"):
        with pytest.raises(ValueError):
            Protocol.parse(bad)


def test_evaluate_task_probe_reports(ckpts, tasks):
    reps = evaluate_task(ckpts["clip"], tasks["base"], "probe:4", range(5))
    assert len(reps) == 5 and all(r.k_shots == 4 for r in reps)
    assert all(r.aca_novel is None for r in reps)
    agg = aggregate_reports(reps)
    assert agg["aca_base_mean"] == pytest.approx(np.mean([r.aca_base for r in reps]), abs=1e-12)
    assert agg["aca_base_std"] == pytest.approx(np.std([r.aca_base for r in reps]), abs=1e-12)
    assert agg["n_seeds"] == 5
    for r in reps:
        assert r.aca_base == pytest.approx(np.mean(list(r.per_class_recall.values())), abs=1e-12)


def test_evaluate_task_zero_shot_seed_invariant(ckpts, tasks):
    reps = evaluate_task(ckpts["dlilp"], tasks["mixed"], "zero_shot", range(3))
    assert len({(r.aca_base, r.aca_novel, r.aca_all) for r in reps}) == 1
    assert reps[0].aca_novel is not None and reps[0].k_shots == "zero-shot"
    assert aggregate_reports(reps)["aca_all_std"] == 0.0


def test_unimodal_novel_absent_in_zero_shot(ckpts, tasks):
    rep = evaluate_task(ckpts["unimodal"], tasks["mixed"], "zero_shot", [0])[0]
    assert rep.aca_base is not None and rep.aca_novel is None and rep.aca_all is None


def test_projected_tap(ckpts, tasks):
    rep = evaluate_task(ckpts["dlilp"], tasks["base"], "probe:2:projected", [0])[0]
    assert rep.protocol == "probe:2:projected" and 0.0 <= rep.aca_base <= 1.0
