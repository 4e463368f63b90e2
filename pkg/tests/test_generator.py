import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coamd import diffcore as dc
from coamd.autoencoder import AEConfig, MotionAutoencoder
from coamd.dataset import GeneratorConfig, generate_synthetic
from coamd.diffcore import Rng
from coamd.diffcore.gradcheck import check_grad
from coamd.generator import (
    GenConfig,
    MaskedGenerator,
    diffusion_forward,
    diffusion_loss,
    edit,
    edit_fixed_mask,
    euler_sample,
    generate,
    ode_sample,
    sample_training_mask,
    train_generator,
    unmask_schedule,
)
from coamd.motion import NormalizationStats

TOY = GenConfig(latent_dim=4, cond_dim=6, layers=1, width=8, heads=2, head_width=8, head_blocks=1,
                ode_steps=3, ar_steps=4)


def toy_gen(dtype=np.float32, cfg=TOY):
    return MaskedGenerator(cfg, Rng(0)).astype(dtype)


def text(B, seed=0, dim=6):
    x = np.random.default_rng(seed).normal(size=(B, dim))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


# -- masks -------------------------------------------------------------
def test_single_token_mask():
    assert sample_training_mask(1, Rng(0)).tolist() == [True]


def test_mask_ratio_distribution():
    rng = Rng(3)
    ratios = np.array([sample_training_mask(16, rng.spawn(i)).mean() for i in range(10_000)])
    assert ratios.min() >= 0.45 and ratios.max() <= 1.0
    assert 0.6 <= ratios.mean() <= 0.85


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 64), st.integers(0, 10**6))
def test_mask_keeps_one_visible_and_one_masked(L, seed):
    m = sample_training_mask(L, Rng(seed))
    assert 1 <= m.sum() <= L - 1
    assert np.array_equal(m, sample_training_mask(L, Rng(seed)))


@pytest.mark.parametrize("mode,L,expected", [
    ("inpaint", 16, 8), ("outpaint", 16, 8), ("prefix", 16, 4), ("suffix", 16, 4),
    ("inpaint", 10, 5), ("prefix", 10, 2),
])
def test_edit_fixed_fractions(mode, L, expected):
    f = edit_fixed_mask(L, mode)
    assert f.sum() == expected
    if mode == "prefix":
        assert f[: expected].all()
    if mode == "suffix":
        assert f[-expected:].all()
    if mode == "inpaint":
        assert f[0] and f[-1] and not f[L // 2]
    if mode == "outpaint":
        assert not f[0] and not f[-1] and f[L // 2]


def test_edit_unknown_mode():
    with pytest.raises(ValueError):
        edit_fixed_mask(8, "middle")


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 64), st.integers(1, 12))
def test_unmask_schedule_is_monotone_and_complete(n, K):
    s = unmask_schedule(n, K)
    assert s[-1] == 0 and len(s) == K
    left = [n] + s
    assert all(b <= a for a, b in zip(left, left[1:]))
    assert all(b < a for a, b in zip(left, left[1:]) if a > 0)


# -- context transformer ----------------------------------------------
def test_context_ignores_masked_content():
    model = toy_gen()
    z = np.random.default_rng(0).normal(size=(2, 5, 4)).astype(np.float32)
    mask = np.array([[1, 0, 0, 1, 0], [0, 1, 1, 0, 0]], bool)
    h1 = model.context(z, mask, text(2)).data
    z2 = z.copy()
    z2[mask] = 99.0
    h2 = model.context(z2, mask, text(2)).data
    assert np.array_equal(h1, h2)
    assert np.array_equal(h1, model.context(z, mask, text(2)).data)
    assert h1.shape == (2, 5, 8)


def test_context_gradient():
    model = toy_gen(np.float64)
    mask = np.array([[True, False, False, True]])
    c = text(1).astype(np.float64)
    w = np.random.default_rng(1).normal(size=(1, 4, 8))

    def fn(ts):
        return dc.sum_(model.context(ts[0], mask, c) * w)

    assert check_grad(fn, [np.random.default_rng(2).normal(size=(1, 4, 4))]) < 1e-3


def test_context_shape_errors():
    model = toy_gen()
    with pytest.raises(dc.ShapeError):
        model.context(np.zeros((1, 3, 5)), np.zeros((1, 3), bool), text(1))
    with pytest.raises(dc.ShapeError):
        model.context(np.zeros((1, 3, 4)), np.zeros((1, 3), bool), text(1, dim=5))


# -- flow matching -----------------------------------------------------
def test_diffusion_forward_examples():
    z0, eps = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert np.array_equal(diffusion_forward(z0, 0.0, eps), z0)
    assert np.array_equal(diffusion_forward(z0, 1.0, eps), eps)
    assert np.allclose(diffusion_forward(z0, 0.25, eps), [0.75, 0.25])
    with pytest.raises(ValueError):
        diffusion_forward(z0, 1.5, eps)


def test_diffusion_loss_examples():
    eps = np.array([[3.0, 4.0]])
    z0 = np.zeros((1, 2))
    assert diffusion_loss(np.zeros((1, 2)), eps, z0).item() == pytest.approx(12.5)
    assert diffusion_loss(eps - z0, eps, z0).item() == 0.0
    with pytest.raises(dc.ShapeError):
        diffusion_loss(np.zeros((2, 2)), eps, z0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 10**6))
def test_diffusion_loss_matches_brute_force(n, d, seed):
    rng = np.random.default_rng(seed)
    v, eps, z0 = rng.normal(size=(3, n, 3, d))
    mask = rng.random((n, 3)) < 0.5
    mask[0, 0] = True
    got = diffusion_loss(v, eps, z0, mask).item()
    terms = [(v[i, j, k] - (eps[i, j, k] - z0[i, j, k])) ** 2
             for i in range(n) for j in range(3) if mask[i, j] for k in range(d)]
    assert got == pytest.approx(sum(terms) / len(terms), abs=1e-6)


def test_euler_single_step_constant_field():
    z1 = np.array([0.3, -1.2])
    v = np.array([1.0, 2.0])
    assert np.allclose(euler_sample(lambda z, t: v, z1, 1), z1 - v)


@pytest.mark.parametrize("N", [1, 2, 10, 50])
def test_euler_exact_on_linear_path_field(N):
    rng = np.random.default_rng(N)
    z1, zstar = rng.normal(size=(2, 5, 7))
    out = euler_sample(lambda z, t: z1 - zstar, z1, N)
    assert np.abs(out - zstar).max() <= 1e-6


def test_euler_scripted_two_steps():
    a, b = np.array([1.0, 0.0]), np.array([0.0, 4.0])
    z1 = np.array([2.0, 2.0])
    seen = []

    def v(z, t):
        seen.append(t)
        return a if t == 1.0 else b

    assert np.allclose(euler_sample(v, z1, 2), z1 - a / 2 - b / 2)
    assert seen == [1.0, 0.5]


def test_euler_errors():
    with pytest.raises(ValueError):
        euler_sample(lambda z, t: z, np.zeros(2), 0)
    with pytest.raises(dc.NumericError, match="step 1"):
        euler_sample(lambda z, t: np.full_like(z, np.inf) if t < 1 else z, np.zeros(2), 3)


def test_ode_sample_is_seeded():
    model = toy_gen()
    h = np.random.default_rng(0).normal(size=(3, 8)).astype(np.float32)
    a = ode_sample(model.head, h, 5, Rng(1))
    assert np.array_equal(a, ode_sample(model.head, h, 5, Rng(1)))
    assert a.shape == (3, 4)


# -- generation / editing ---------------------------------------------
def test_generate_freezes_monotonically():
    model = toy_gen()
    trace = []
    z = generate(model, text(2), 9, Rng(5), trace=trace)
    assert len(trace) == TOY.ar_steps and z.shape == (2, 9, 4)
    for (f0, z0), (f1, z1) in zip(trace, trace[1:]):
        assert (f1 >= f0).all()
        assert np.array_equal(z1[f0], z0[f0])
    assert trace[-1][0].all()
    assert np.array_equal(generate(model, text(2), 9, Rng(5)), z)


def test_single_shot_generation():
    trace = []
    generate(toy_gen(), text(1), 6, Rng(0), ar_steps=1, trace=trace)
    assert len(trace) == 1 and trace[0][0].all()


def test_edit_preserves_fixed_tokens():
    model = toy_gen()
    z_ctx = np.random.default_rng(0).normal(size=(2, 8, 4)).astype(np.float32)
    for mode in ("inpaint", "outpaint", "prefix", "suffix"):
        out = edit(model, z_ctx, text(2), mode, Rng(1))
        f = edit_fixed_mask(8, mode)
        assert np.array_equal(out[:, f], z_ctx[:, f])
        assert not np.array_equal(out[:, ~f], z_ctx[:, ~f])


def test_edit_all_but_one():
    z_ctx = np.random.default_rng(1).normal(size=(1, 6, 4)).astype(np.float32)
    fixed = np.ones(6, bool)
    fixed[2] = False
    out = edit(toy_gen(), z_ctx, text(1), "inpaint", Rng(0), fixed=fixed)
    differs = (out != z_ctx).any(-1)[0]
    assert differs.tolist() == [False, False, True, False, False, False]
    with pytest.raises(ValueError):
        edit(toy_gen(), z_ctx, text(1), "inpaint", Rng(0), fixed=np.ones(6, bool))


def test_classifier_free_rejected():
    with pytest.raises(ValueError):
        GenConfig(classifier_free=True).validate()
    with pytest.raises(ValueError):
        GenConfig(ode_steps=0).validate()


# -- training ----------------------------------------------------------
def test_train_generator_contract(tmp_path):
    ds = generate_synthetic(GeneratorConfig(), 12, seed=1)
    ae = MotionAutoencoder(AEConfig(latent_dim=8, width=8), NormalizationStats.identity(9), Rng(0))
    emb = text(12, dim=6)
    cfg = GenConfig(layers=1, width=8, heads=2, head_width=8, head_blocks=1, batch_size=4)
    with pytest.raises(ValueError):
        train_generator(ds, None, cfg, 1, 0, emb)
    for name in "ab":
        model, log = train_generator(ds, ae, cfg, 2, seed=3, text_embeddings=emb)
        model.save(tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert 0.0 <= log.t_min <= log.t_max < 1.0
    assert len(log.epoch_loss) == 2
    loaded = MaskedGenerator.load(tmp_path / "a")
    assert loaded.latent_scale == model.latent_scale
    assert loaded.config.latent_dim == 8 and loaded.config.cond_dim == 6
    assert np.array_equal(generate(loaded, emb[:1], 3, Rng(0)), generate(model, emb[:1], 3, Rng(0)))
