import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfl_lab.cgan import (
    Discriminator, Generator, LabeledBatch, conditional_log_ratio, disc_backward, discriminate,
    generate, generator_backward, loss_discriminator, loss_generator,
)
from sfl_lab.nn import NumericError

from conftest import numeric_grad, rel_err


def small_disc(rng, head="approx", C=3):
    return Discriminator.init(C, rng, head=head, hidden=(6, 5), feat_dim=4)


def test_zero_body_generator_is_constant(rng):
    gen = Generator.init(4, rng)
    for layer in gen.body.layers:
        layer.W[:] = 0.0
    gen.body.layers[-1].b[:] = [0.3, -0.7]
    out = generate(gen, rng.normal(size=(5, 2)), np.array([0, 1, 2, 3, 0]))
    np.testing.assert_array_equal(out.x, np.tile([0.3, -0.7], (5, 1)))


def test_labels_change_generator_output(rng):
    gen = Generator.init(4, rng)
    z = np.tile(rng.normal(size=(1, 2)), (2, 1))
    out = generate(gen, z, np.array([0, 1]))
    assert not np.allclose(out.x[0], out.x[1])


def test_generator_is_row_wise(rng):
    gen = Generator.init(4, rng)
    z = rng.normal(size=(8, 2))
    y = rng.integers(0, 4, 8)
    full = generate(gen, z, y).x
    one = generate(gen, z[3:4], y[3:4]).x
    # BLAS may round a 1-row product differently from an 8-row one
    np.testing.assert_allclose(one[0], full[3], rtol=1e-12, atol=1e-14)


def test_generator_rejects_bad_labels(rng):
    gen = Generator.init(4, rng)
    with pytest.raises(ValueError):
        generate(gen, np.zeros((2, 2)), np.array([0, 4]))


def test_exact_head_with_equal_embeddings_has_zero_conditional(rng):
    disc = small_disc(rng, "exact")
    disc.embeds[1][:] = disc.embeds[0]
    out = discriminate(disc, LabeledBatch(rng.normal(size=(10, 2)), rng.integers(0, 3, 10)))
    np.testing.assert_array_equal(out.d_conditional, 0.0)


def test_single_class_approx_head(rng):
    disc = small_disc(rng, "approx", C=1)
    x = rng.normal(size=(5, 2))
    out = discriminate(disc, LabeledBatch(x, np.zeros(5, dtype=int)))
    np.testing.assert_allclose(out.d_conditional, disc.phi(x) @ disc.embeds[0][0], rtol=1e-13)


def test_exact_head_matches_log_softmax_oracle(rng):
    disc = small_disc(rng, "exact")
    x = rng.normal(size=(12, 2))
    y = rng.integers(0, 3, 12)
    out = discriminate(disc, LabeledBatch(x, y))
    # independent route: explicit softmax probabilities, then log of their ratio
    feat = disc.phi(x)
    Vp, Vg = disc.embeds
    pp = np.exp(feat @ Vp.T)
    pg = np.exp(feat @ Vg.T)
    pp /= pp.sum(axis=1, keepdims=True)
    pg /= pg.sum(axis=1, keepdims=True)
    expected = np.log(pp[np.arange(12), y]) - np.log(pg[np.arange(12), y])
    np.testing.assert_allclose(out.d_conditional, expected, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(conditional_log_ratio(disc, x, y), expected, rtol=1e-10, atol=1e-12)


def test_exact_with_zero_generated_embedding_relates_to_approx(rng):
    exact = small_disc(rng, "exact", C=5)
    exact.embeds[1][:] = 0.0
    approx = Discriminator(exact.phi, exact.psi, "approx", [exact.embeds[0]])
    x = rng.normal(size=(9, 2))
    y = rng.integers(0, 5, 9)
    d_exact = discriminate(exact, LabeledBatch(x, y)).d_conditional
    d_approx = discriminate(approx, LabeledBatch(x, y)).d_conditional
    logits = exact.phi(x) @ exact.embeds[0].T
    log_z = np.log(np.exp(logits).sum(axis=1))
    np.testing.assert_allclose(d_exact, d_approx - (log_z - np.log(5)), atol=1e-10)


@pytest.mark.parametrize("head", ["approx", "exact"])
def test_decomposition_is_exact(rng, head):
    disc = small_disc(rng, head)
    out = discriminate(disc, LabeledBatch(rng.normal(size=(30, 2)), rng.integers(0, 3, 30)))
    assert np.all(out.d_total - (out.d_marginal + out.d_conditional) == 0.0)


@pytest.mark.parametrize("head", ["approx", "exact"])
def test_permuting_labels_keeps_marginal(rng, head):
    disc = small_disc(rng, head)
    x = rng.normal(size=(10, 2))
    y = np.arange(10) % 3
    a = discriminate(disc, LabeledBatch(x, y))
    b = discriminate(disc, LabeledBatch(x, (y + 1) % 3))
    np.testing.assert_array_equal(a.d_marginal, b.d_marginal)
    assert not np.allclose(a.d_conditional, b.d_conditional)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_features_raise(rng):
    disc = small_disc(rng)
    disc.phi.layers[0].W[0, 0] = np.inf
    with pytest.raises(NumericError):
        discriminate(disc, LabeledBatch(np.ones((2, 2)), np.array([0, 1])))


@pytest.mark.parametrize("head", ["approx", "exact"])
def test_disc_backward_matches_finite_differences(rng, head):
    disc = small_disc(rng, head)
    batch = LabeledBatch(rng.normal(size=(7, 2)), rng.integers(0, 3, 7))
    wm, wc = rng.normal(size=7), rng.normal(size=7)

    def loss():
        o = discriminate(disc, batch)
        return float(wm @ o.d_marginal + wc @ o.d_conditional)

    g = disc_backward(disc, discriminate(disc, batch), wm, wc)
    for p, gp in zip(disc.parameters(), g.params):
        assert rel_err(gp, numeric_grad(loss, p)) < 1e-4
    assert rel_err(g.dx, numeric_grad(loss, batch.x)) < 1e-4
    dx_only = disc_backward(disc, discriminate(disc, batch), wm, wc, input_only=True).dx
    np.testing.assert_array_equal(dx_only, g.dx)


def test_generator_backward_matches_finite_differences(rng):
    gen = Generator.init(3, rng, hidden=(6, 5))
    z = rng.normal(size=(6, 2))
    y = rng.integers(0, 3, 6)
    up = rng.normal(size=(6, 2))

    def loss():
        return float(np.sum(generate(gen, z, y).x * up))

    _, trace = generate(gen, z, y, return_trace=True)
    g = generator_backward(gen, y, trace, up)
    for p, gp in zip(gen.parameters(), g.params):
        assert rel_err(gp, numeric_grad(loss, p)) < 1e-4


def test_bce_loss_at_zero():
    loss, g_real, g_fake = loss_discriminator([0.0], [0.0], "bce")
    assert loss == pytest.approx(2 * np.log(2), abs=1e-15)
    assert g_real[0] == -0.5
    assert g_fake[0] == 0.5


def test_hinge_loss_satisfied_margins():
    loss, g_real, g_fake = loss_discriminator([2.0], [-2.0], "hinge")
    assert loss == 0.0
    assert g_real[0] == 0.0 and g_fake[0] == 0.0


def test_bce_is_stable_for_large_scores():
    loss, g_real, g_fake = loss_discriminator([-800.0], [800.0], "bce")
    assert np.isfinite(loss) and loss == pytest.approx(1600.0)
    assert g_real[0] == -1.0 and g_fake[0] == 1.0


def test_generator_losses():
    loss, g = loss_generator([1.0, -1.0], "hinge")
    assert loss == 0.0
    np.testing.assert_array_equal(g, [-0.5, -0.5])
    loss, g = loss_generator([0.0], "bce")
    assert loss == pytest.approx(np.log(2), abs=1e-15)
    assert g[0] == -0.5


@pytest.mark.parametrize("kind", ["hinge", "bce"])
def test_loss_gradients_match_finite_differences(rng, kind):
    # keep hinge scores away from the kinks at +-1
    s_real = rng.uniform(-3, 3, 6)
    s_fake = rng.uniform(-3, 3, 5)
    s_real[np.abs(np.abs(s_real) - 1) < 0.05] += 0.2
    s_fake[np.abs(np.abs(s_fake) - 1) < 0.05] += 0.2
    _, g_r, g_f = loss_discriminator(s_real, s_fake, kind)
    assert rel_err(g_r, numeric_grad(lambda: loss_discriminator(s_real, s_fake, kind)[0], s_real)) < 1e-6
    assert rel_err(g_f, numeric_grad(lambda: loss_discriminator(s_real, s_fake, kind)[0], s_fake)) < 1e-6
    _, g = loss_generator(s_fake, kind)
    assert rel_err(g, numeric_grad(lambda: loss_generator(s_fake, kind)[0], s_fake)) < 1e-6


def test_unknown_loss_kind():
    with pytest.raises(ValueError):
        loss_generator([0.0], "wasserstein")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["approx", "exact"]))
def test_decomposition_property(seed, head):
    rng = np.random.default_rng(seed)
    disc = Discriminator.init(4, rng, head=head, hidden=(8,), feat_dim=4)
    out = discriminate(disc, LabeledBatch(rng.normal(0, 3, size=(16, 2)), rng.integers(0, 4, 16)))
    assert np.array_equal(out.d_total, out.d_marginal + out.d_conditional)
