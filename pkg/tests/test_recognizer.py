import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coamd import diffcore as dc
from coamd.batching import stack_streams
from coamd.dataset import ClassTable, GeneratorConfig, generate_synthetic
from coamd.dataset.annotate import ActionClass
from coamd.diffcore import Rng
from coamd.diffcore.gradcheck import check_grad
from coamd.motion import HUMANOID9, NormalizationStats, derive_streams
from coamd.recognizer import (
    Recognizer,
    RecognizerConfig,
    TextVocab,
    batched_retrieval,
    classify,
    embed_samples,
    embed_texts,
    info_nce_loss,
    match_ranks,
    retrieve,
    tokenize,
    train_mar,
)

TOY = RecognizerConfig(dim=8, width=8, heads=2, layers=1)
VOCAB = TextVocab.build(["a person walks forward", "someone raises the left hand"])


def toy_model(cfg=TOY, dtype=np.float64):
    return Recognizer(cfg, VOCAB, NormalizationStats.identity(9), Rng(0)).astype(dtype)


def random_motion(L, seed=0, B=1):
    rng = np.random.default_rng(seed)
    return np.cumsum(rng.normal(scale=0.05, size=(B, L, 9, 3)), axis=1)


def unit_rows(n, d, seed):
    x = np.random.default_rng(seed).normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture(scope="module")
def trained():
    ds = generate_synthetic(GeneratorConfig(), 600, seed=3)
    train, held = ds.split()
    model, log = train_mar(train, ds.class_table, RecognizerConfig(dim=32, width=32), 12, seed=0)
    return ds, held, model, log


# -- embeddings --------------------------------------------------------
def test_bundle_is_unit_norm_and_deterministic():
    model = toy_model()
    mm = derive_streams(random_motion(10, B=3), HUMANOID9)
    a, b = model.embed_motion(mm), model.embed_motion(mm)
    for e, f in zip((a.e_f, a.e_j, a.e_b, a.e_m), (b.e_f, b.e_j, b.e_b, b.e_m)):
        assert e.shape == (3, 8)
        assert np.allclose(np.linalg.norm(e.data, axis=1), 1, atol=1e-5)
        assert np.array_equal(e.data, f.data)


def test_embed_motion_gradient():
    model = toy_model()
    w = np.random.default_rng(1).normal(size=(1, 8))

    def fn(ts):
        return dc.sum_(model.embed_motion(derive_streams(ts[0], HUMANOID9)).e_f * w)

    assert check_grad(fn, [random_motion(4, seed=2)]) < 1e-3


def test_time_reversal_changes_motion_embedding():
    model = toy_model()
    x = random_motion(12, seed=5)
    fwd = model.embed_motion(derive_streams(x, HUMANOID9)).e_m.data
    rev = model.embed_motion(derive_streams(x[:, ::-1].copy(), HUMANOID9)).e_m.data
    assert not np.allclose(fwd, rev)


def test_stream_subset_ablation():
    model = toy_model(RecognizerConfig(dim=8, width=8, heads=2, streams=("joints",)))
    b = model.embed_motion(derive_streams(random_motion(6), HUMANOID9))
    assert b.e_j is not None and b.e_b is None and b.e_m is None
    with pytest.raises(ValueError):
        RecognizerConfig(streams=("hands",)).validate()


def test_embed_motion_shape_error():
    model = toy_model()
    mm = derive_streams(random_motion(6), HUMANOID9)
    with pytest.raises(dc.ShapeError):
        model.embed_motion(type(mm)(mm.joints, mm.bones[:, :4], mm.motion))


def test_text_embedding_contract():
    model = toy_model()
    a = model.embed_text("A person walks forward!").c.data
    b = model.embed_text("a person walks forward").c.data
    assert np.array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1) < 1e-5
    empty = model.embed_text("")
    assert abs(np.linalg.norm(empty.c.data) - 1) < 1e-5
    assert model.embed_text("jump", "class-label").kind == "class-label"


def test_vocab():
    assert tokenize("Walks, then JUMPS.") == ["walks", "then", "jumps"]
    assert VOCAB.tokens[:2] == ["<pad>", "<unk>"]
    assert VOCAB.encode("a zebra", 8) == [VOCAB.ids["a"], 1]
    assert VOCAB.encode("", 8) == [1]
    assert TextVocab.from_text(VOCAB.to_text()).tokens == VOCAB.tokens


# -- InfoNCE -----------------------------------------------------------
def test_info_nce_single_pair_is_zero():
    e = unit_rows(1, 8, 0)
    assert info_nce_loss(e, unit_rows(1, 8, 1), 0.1).item() == pytest.approx(0.0, abs=1e-12)


def test_info_nce_two_by_two():
    e = np.eye(2)
    assert info_nce_loss(e, e, 1.0).item() == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert -math.log(math.e / (math.e + 1)) == pytest.approx(0.3133, abs=1e-4)


def test_info_nce_random_embeddings_near_log_n():
    loss = info_nce_loss(unit_rows(256, 512, 0), unit_rows(256, 512, 1), 0.1).item()
    assert abs(loss - math.log(256)) <= 0.1 * math.log(256)


def test_info_nce_errors_and_symmetric_variant():
    with pytest.raises(ValueError):
        info_nce_loss(np.eye(2), np.eye(2), 0.0)
    with pytest.raises(dc.ShapeError):
        info_nce_loss(np.eye(2), np.eye(3)[:, :2], 0.1)
    e, c = unit_rows(5, 4, 2), unit_rows(5, 4, 3)
    sym = info_nce_loss(e, c, 0.5, symmetric=True).item()
    a, b = info_nce_loss(e, c, 0.5).item(), info_nce_loss(c, e, 0.5).item()
    assert sym == pytest.approx((a + b) / 2, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10**6))
def test_info_nce_nonnegative(n, seed):
    assert info_nce_loss(unit_rows(n, 6, seed), unit_rows(n, 6, seed + 1), 0.1).item() >= 0


# -- retrieval / classification ----------------------------------------
def test_retrieve_identical_embeddings_is_perfect():
    e = unit_rows(32, 16, 0)
    r = retrieve(e, e, 1)
    assert (r.t2m, r.m2t) == (1.0, 1.0)


def test_retrieve_random_is_chance():
    r1 = [retrieve(unit_rows(32, 16, 2 * i), unit_rows(32, 16, 2 * i + 1), 1) for i in range(200)]
    vals = np.array([r.m2t for r in r1])
    se = math.sqrt((1 / 32) * (31 / 32) / (32 * 200))
    assert abs(vals.mean() - 1 / 32) < 3 * se


def test_recall_monotone_in_k_and_errors():
    q, g = unit_rows(32, 8, 5), unit_rows(32, 8, 6)
    vals = [retrieve(q, g, k).t2m for k in range(1, 33)]
    assert all(b >= a for a, b in zip(vals, vals[1:])) and vals[-1] == 1.0
    with pytest.raises(ValueError):
        retrieve(q[:0], g[:0], 1)


def test_match_ranks_tie_rule():
    sim = np.array([[0.5, 0.5, 0.1], [0.9, 0.2, 0.2], [0.0, 0.0, 0.0]])
    assert match_ranks(sim).tolist() == [1, 2, 1]


def test_batched_retrieval_uses_full_batches():
    e = unit_rows(70, 8, 1)
    assert batched_retrieval(e, e).m2t == 1.0
    with pytest.raises(ValueError):
        batched_retrieval(e[:10], e[:10])


def test_classify_single_class_and_score_range():
    m = unit_rows(5, 8, 0)
    ranked, scores = classify(m, unit_rows(1, 8, 1))
    assert (ranked[:, 0] == 0).all()
    ranked, scores = classify(m, unit_rows(7, 8, 2))
    assert np.all(np.abs(scores) <= 1 + 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 10**6))
def test_classify_argmax_invariant_to_scaling(scale, seed):
    m, c = unit_rows(4, 8, seed), unit_rows(6, 8, seed + 1)
    ranked, scores = classify(m, c)
    assert (np.argmax(scores * scale, axis=1) == ranked[:, 0]).all()


def test_dot_equals_cosine():
    model = toy_model()
    e = model.embed_motion(derive_streams(random_motion(8, B=2), HUMANOID9)).e_f.data
    c = model.embed_text(["a person walks forward", "someone raises the left hand"]).c.data
    cos = (e @ c.T) / np.outer(np.linalg.norm(e, axis=1), np.linalg.norm(c, axis=1))
    assert np.allclose(e @ c.T, cos, atol=1e-6)


# -- training ----------------------------------------------------------
def test_train_mar_requires_class_table():
    with pytest.raises(ValueError):
        train_mar(generate_synthetic(GeneratorConfig(), 4, 0), None, TOY, 1, 0)


def test_train_mar_deterministic(tmp_path):
    ds = generate_synthetic(GeneratorConfig(), 16, seed=1)
    cfg = RecognizerConfig(dim=8, width=8, heads=2, batch_size=8)
    for name in "ab":
        model, _ = train_mar(ds, ds.class_table, cfg, 2, seed=4)
        model.save(tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    loaded = Recognizer.load(tmp_path / "a")
    mm = stack_streams([ds.samples[0].motion], HUMANOID9)
    assert np.array_equal(loaded.embed_motion(mm).e_f.data, model.embed_motion(mm).e_f.data)
    assert loaded.vocab.tokens == model.vocab.tokens


@pytest.mark.slow
def test_training_reduces_loss(trained):
    _, _, _, log = trained
    assert log.epoch_loss[-1] < 0.6 * log.epoch_loss[0]


@pytest.mark.slow
def test_walk_text_prefers_walk_motion(trained):
    ds, held, model, _ = trained
    walks = [s.motion for s in held.samples if s.caption and _only(ds, s, "walk forward")]
    raises = [s.motion for s in held.samples if _only(ds, s, "raise left hand") or _only(ds, s, "raise right hand")]
    assert walks and raises
    t = embed_texts(model, ["walk forward"])[0]
    assert (embed_samples(model, walks) @ t).mean() > (embed_samples(model, raises) @ t).mean()


def _only(ds, sample, phrase):
    return sample.label_ids == [ds.class_table.phrase_to_class[phrase]]


def test_classify_with_one_class_table():
    table = ClassTable([ActionClass("jump", ["jump"], 1)])
    ranked, _ = classify(unit_rows(3, 8, 0), unit_rows(len(table), 8, 1))
    assert (ranked[:, 0] == 0).all()
