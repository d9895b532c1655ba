import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from defectssl import fewshot, network
from defectssl.dataset import LabeledPatch, PatchSet
from defectssl.errors import (DegenerateClassError, DegenerateEmbeddingError, InputError,
                              LabelError, ParameterError)
from defectssl.fewshot import ImprintedHead, TransMatchConfig
from defectssl.network import Conv2D, Dense, Flatten, MaxPool, NetworkSpec, ReLU, Softmax, TrainConfig


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def tiny_spec(k=2):
    return NetworkSpec([Conv2D(4, 3), ReLU(), MaxPool(2, 2), Conv2D(6, 3), ReLU(), Flatten(), Dense(8), Dense(k),
                        Softmax()], (10, 10, 1), embedding_layer=6)


LEVELS = {0: 70, 1: 110, 2: 20, 3: 230}


def blobs(labels, seed=0, start=0, hide=False):
    rng = np.random.default_rng(seed)
    out = []
    for i, c in enumerate(labels):
        img = np.full((10, 10), 128.0)
        img[3:7, 3:7] = LEVELS[c]
        img += rng.normal(0, 4, img.shape)
        out.append(LabeledPatch(np.clip(img, 0, 255).astype(np.uint8), None if hide else c,
                                patch_id=f"p{start + i}"))
    return out


# -- imprinting ---------------------------------------------------------------------

def test_imprint_matches_mean_then_normalize_oracle():
    rng = np.random.default_rng(0)
    embs = {c: [unit(rng.normal(size=16)) for _ in range(5)] for c in (3, 1)}
    head = fewshot.imprint(embs)
    assert head.classes == [1, 3]
    for row, c in zip(head.weights, head.classes):
        mean = sum(embs[c]) / 5
        assert np.max(np.abs(row - mean / np.sqrt(np.sum(mean * mean)))) <= 1e-12


def test_single_embedding_is_its_own_vector():
    e = unit([1.0, 2.0, -2.0])
    assert np.allclose(fewshot.imprint({0: [e]}).weights[0], e, atol=1e-15)


def test_antipodal_embeddings_degenerate():
    e = unit([1.0, 0.0, 0.0])
    with pytest.raises(DegenerateClassError):
        fewshot.imprint({0: [e, -e]})


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 6))
def test_duplicate_of_mean_direction_is_idempotent(seed, n):
    rng = np.random.default_rng(seed)
    embs = [unit(rng.normal(size=8) + 2) for _ in range(n)]
    w = fewshot.imprint({0: embs}).weights[0]
    w2 = fewshot.imprint({0: embs + [w]}).weights[0]
    assert np.allclose(w, w2, atol=1e-12)
    assert np.isclose(np.linalg.norm(w), 1.0)


def test_head_predict_examples():
    head = ImprintedHead(np.eye(3)[:2], [0, 1], 10.0)
    assert np.argmax(fewshot.head_predict(head, np.array([0.0, 1.0, 0.0]))) == 1
    assert np.allclose(fewshot.head_predict(head, np.array([0.0, 0.0, 1.0])), 0.5)
    with pytest.raises(InputError):
        fewshot.head_predict(head, np.ones(4))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_head_argmax_scale_invariant(seed):
    rng = np.random.default_rng(seed)
    w = np.array([unit(r) for r in rng.normal(size=(4, 6))])
    e = np.array([unit(r) for r in rng.normal(size=(10, 6))])
    preds = []
    for s in (0.1, 1, 10, 100):
        p = fewshot.head_predict(ImprintedHead(w, [0, 1, 2, 3], s), e)
        assert np.allclose(p.sum(axis=1), 1, atol=1e-9)
        preds.append(np.argmax(p, axis=1))
    assert all(np.array_equal(preds[0], q) for q in preds[1:])
    tiny = fewshot.head_predict(ImprintedHead(w, [0, 1, 2, 3], 1e-9), e)
    assert np.allclose(tiny, 0.25, atol=1e-8)


# -- embeddings ----------------------------------------------------------------------

def test_embeddings_unit_norm_and_match_trace():
    params = network.build(tiny_spec(), 0)
    data = PatchSet(blobs([0, 1, 2, 3, 0]))
    emb = fewshot.extract_embeddings(params, data)
    assert np.allclose(np.linalg.norm(emb, axis=1), 1, atol=1e-9)
    _, trace = network.forward(params, data.arrays()[0])
    act = trace.activation(6)
    assert np.allclose(emb, act / np.linalg.norm(act, axis=1, keepdims=True), atol=1e-12)
    one = fewshot.extract_embedding(params, data[0])
    assert np.allclose(one, emb[0]) and np.array_equal(one, fewshot.extract_embedding(params, data[0].patch))


def test_degenerate_embedding():
    params = network.build(tiny_spec(), 0)
    params.layers[6]["W"][:] = 0
    with pytest.raises(DegenerateEmbeddingError):
        fewshot.extract_embeddings(params, PatchSet(blobs([0])))


# -- fine-tuning ---------------------------------------------------------------------

def test_trainable_layers_for_default_network():
    spec = network.default_spec()
    assert fewshot.trainable_layers(spec, "last-block+head") == {7}
    assert fewshot.trainable_layers(spec, "none") == {0, 3, 7}
    assert fewshot.trainable_layers(spec, "all-but-head") == set()


def _pretrained():
    params, _ = network.train(network.build(tiny_spec(), 0), PatchSet(blobs([0, 1] * 20)),
                              TrainConfig(epochs=8, batch_size=8))
    return params


def _cfg(freeze="last-block+head", epochs=20):
    return TransMatchConfig(freeze=freeze, fine_tune=TrainConfig(epochs=epochs, batch_size=4))


def test_fine_tune_all_but_head_freezes_base():
    params = _pretrained()
    support = PatchSet(blobs([2, 3] * 3, seed=1))
    head = fewshot.ImprintLearner(params, [2, 3]).imprint(support)
    p2, h2 = fewshot.fine_tune(params, head, support, _cfg("all-but-head", 5))
    assert all(a.tobytes() == b.tobytes() for (_, _, a), (_, _, b) in zip(params.named(), p2.named()))
    assert not np.array_equal(h2.weights, head.weights)
    assert np.allclose(np.linalg.norm(h2.weights, axis=1), 1)


def test_fine_tune_zero_epochs_changes_nothing():
    params = _pretrained()
    support = PatchSet(blobs([2, 3] * 3, seed=1))
    head = fewshot.ImprintLearner(params, [2, 3]).imprint(support)
    p2, h2 = fewshot.fine_tune(params, head, support, _cfg("none", 0))
    assert network.dumps_weights(p2) == network.dumps_weights(params)
    assert np.array_equal(h2.weights, head.weights)


def test_fine_tune_only_touches_unfrozen_layers():
    params = _pretrained()
    support = PatchSet(blobs([2, 3] * 3, seed=1))
    head = fewshot.ImprintLearner(params, [2, 3]).imprint(support)
    p2, _ = fewshot.fine_tune(params, head, support, _cfg("last-block+head", 3))
    changed = {i for (i, _, a), (_, _, b) in zip(params.named(), p2.named()) if not np.array_equal(a, b)}
    assert changed == fewshot.trainable_layers(tiny_spec(), "last-block+head") == {3, 6}


def test_fine_tune_separable_support_reaches_full_accuracy():
    params = _pretrained()
    support = PatchSet(blobs([2, 3] * 5, seed=2))
    head = fewshot.ImprintLearner(params, [2, 3]).imprint(support)
    p2, h2 = fewshot.fine_tune(params, head, support, _cfg("last-block+head", 20))
    pred, _, _ = fewshot.predict_head(p2, h2, support)
    assert np.array_equal(pred, [p.label for p in support])


def test_fine_tune_input_errors():
    params = _pretrained()
    head = ImprintedHead(np.eye(8)[:2], [2, 3])
    with pytest.raises(InputError):
        fewshot.fine_tune(params, head, PatchSet([]), _cfg())
    with pytest.raises(InputError):
        fewshot.fine_tune(params, head, PatchSet(blobs([0])), _cfg())
    with pytest.raises(ParameterError):
        fewshot.fine_tune(params, head, PatchSet(blobs([2])), TransMatchConfig(freeze="half"))


# -- episodes and the combined run --------------------------------------------------

def test_split_episode_structure():
    train = PatchSet(blobs([0, 1, 2, 3] * 6))
    query = PatchSet(blobs([0, 1, 2, 3] * 2, seed=5))
    ep = fewshot.make_split_episode(train, query, [0, 1], [2, 3], 4, seed=0)
    assert ep.validate() is ep
    assert ep.support.class_counts == {2: 4, 3: 4}
    assert len(ep.pool) == 4 and all(p.label is None for p in ep.pool)
    assert sorted(set(p.label for p in ep.query)) == [2, 3]
    assert ep.description()["pool_size"] == 4
    with pytest.raises(InputError):
        fewshot.make_split_episode(train, query, [0, 1], [2, 3], 7)


def test_episode_validation():
    train = PatchSet(blobs([0, 1, 2, 3] * 3))
    ep = fewshot.make_split_episode(train, train, [0, 1], [2, 3], 2)
    ep.base_classes = [0, 2]
    with pytest.raises(InputError):
        ep.validate()
    ep.base_classes, ep.shots = [0, 1], 3
    with pytest.raises(InputError):
        ep.validate()


def _episode(shots, n_per_class):
    train = PatchSet(blobs([0, 1, 2, 3] * n_per_class))
    query = PatchSet(blobs([2, 3] * 6, seed=9, start=1000))
    return fewshot.make_split_episode(train, query, [0, 1], [2, 3], shots, seed=0)


def test_transmatch_with_empty_pool_is_imprint_plus_fine_tune():
    ep = _episode(shots=4, n_per_class=4)
    assert len(ep.pool) == 0
    params = _pretrained()
    cfg = _cfg(epochs=5)
    res = fewshot.transmatch_run(ep, params, cfg)
    assert len(res.reports) == 1 and sum(res.reports[0].additions) == 0
    head = fewshot.ImprintLearner(params, [2, 3]).imprint(ep.support)
    p2, h2 = fewshot.fine_tune(params, head, ep.support, cfg)
    assert network.dumps_weights(p2) == network.dumps_weights(res.params)
    assert np.array_equal(h2.weights, res.head.weights)


def test_transmatch_split_run_on_separable_episode():
    res = fewshot.transmatch_run(_episode(shots=2, n_per_class=8), _pretrained(), _cfg(epochs=10))
    assert res.evaluation.accuracy == 1.0
    assert res.imprint_evaluation is not None
    assert all(r.pseudo_precision in (None, 1.0) for r in res.reports)
    assert len(res.labeled) == 16


def test_evaluate_head_unknown_classes():
    params = _pretrained()
    head = ImprintedHead(np.eye(8)[:2], [2, 3])
    with pytest.raises(LabelError):
        fewshot.evaluate_head(params, head, PatchSet(blobs([0])))


def test_model_with_head_round_trip(tmp_path):
    params = _pretrained()
    head = fewshot.ImprintLearner(params, [2, 3], scale=7.5).imprint(PatchSet(blobs([2, 3])))
    fewshot.save_model(params, head, tmp_path / "m.tmw")
    p2, h2 = fewshot.load_model(tmp_path / "m.tmw")
    assert h2.classes == [2, 3] and h2.scale == 7.5
    assert h2.weights.tobytes() == head.weights.tobytes()
    assert all(a.tobytes() == b.tobytes() for (_, _, a), (_, _, b) in zip(params.named(), p2.named()))
    assert fewshot.detach_head(params) is None


def test_config_validation():
    with pytest.raises(ParameterError):
        TransMatchConfig(mode="other").validate()
    with pytest.raises(ParameterError):
        TransMatchConfig(scale=0).validate()
