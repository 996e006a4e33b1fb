import math

import numpy as np
import pytest

from attnguide import (AttentionStack, LossWeights, Metrics, TokenSpec, ValidationError, finite_diff_gradient,
                       gradcheck, latent_gradient, loss_gradient, softmax_backward, softmax_tokens)
from attnguide import total_loss
from attnguide.grad import (GRADCHECK_TOKENS, compare_gradients, frozen_loss_fn, gradcheck_sweep,
                            gradient_under, random_stack, roundoff_resolution)
from attnguide.losses import evaluate, select
from attnguide.sim import Readout


def test_max_only_gradient_is_minus_weight_at_argmax():
    rng = np.random.default_rng(0)
    v = rng.random((3, 8, 8))
    tokens = [TokenSpec("a"), TokenSpec("b"), TokenSpec("c", "background")]
    stack = AttentionStack(v, ("a", "b", "c"))
    g = loss_gradient(stack, tokens, LossWeights(0, 0, 0.25, 0)).values
    expected = np.zeros_like(v)
    for k in (0, 1):
        i, j = np.unravel_index(np.argmax(v[k]), (8, 8))
        expected[k, i, j] = -0.25 / 2
    np.testing.assert_array_equal(g, expected)


def test_iso_gradient_on_point_masses_matches_hand_derivation():
    h, w = 6, 7
    a, b = np.zeros((h, w)), np.zeros((h, w))
    a[1, 2], b[4, 5] = 0.5, 0.8
    stack = AttentionStack(np.stack([a, b]), ("m", "n"))
    lam = 2.0
    g = loss_gradient(stack, [TokenSpec("m"), TokenSpec("n")], LossWeights(0, lam, 0, 0)).values
    # L = 1 - d/d_max with d = |c_m - c_n| and c = sum(q v_q) / sum(v_q)
    d_max = math.sqrt(h * h + w * w)
    cm, cn = (1.0, 2.0), (4.0, 5.0)
    d = math.hypot(cm[0] - cn[0], cm[1] - cn[1])
    u = ((cm[0] - cn[0]) / d, (cm[1] - cn[1]) / d)
    for i in range(h):
        for j in range(w):
            dcm = ((i - cm[0]) / 0.5, (j - cm[1]) / 0.5)
            dcn = ((i - cn[0]) / 0.8, (j - cn[1]) / 0.8)
            gm = -lam * (u[0] * dcm[0] + u[1] * dcm[1]) / d_max
            gn = lam * (u[0] * dcn[0] + u[1] * dcn[1]) / d_max
            assert g[0, i, j] == pytest.approx(gm, rel=1e-6, abs=1e-12)
            assert g[1, i, j] == pytest.approx(gn, rel=1e-6, abs=1e-12)


def test_iso_gradient_with_coincident_centroids_is_finite():
    v = np.random.default_rng(1).random((6, 6))
    stack = AttentionStack(np.stack([v, v]), ("m", "n"))
    g = loss_gradient(stack, [TokenSpec("m"), TokenSpec("n")], LossWeights(0, 2, 0, 0)).values
    assert np.all(np.isfinite(g))


@pytest.mark.parametrize("metric", ["euc", "cos", "euc+cos", "cos+euc"])
@pytest.mark.parametrize("seed", [0, 1])
def test_full_loss_gradient_matches_finite_differences(metric, seed):
    rep = gradcheck(random_stack(seed), GRADCHECK_TOKENS, metrics=Metrics.parse(metric))
    assert rep.passed, rep


def test_gradient_at_later_step_uses_scheduled_radius():
    rep = gradcheck(random_stack(3), GRADCHECK_TOKENS, step=24)
    assert rep.passed, rep


def test_zero_loss_gives_zero_gradient():
    stack = random_stack(2)
    g = loss_gradient(stack, GRADCHECK_TOKENS, LossWeights(0, 0, 0, 0))
    assert g.norm == 0.0
    lg = latent_gradient(np.zeros((3, 4, 4)), stack.tokens, GRADCHECK_TOKENS, LossWeights(0, 0, 0, 0))
    assert lg.norm == 0.0


def test_latent_gradient_two_token_hand_case():
    # one position, uniform logits: A = (1/2, 1/2); only the subject has a max term
    tokens = [TokenSpec("s"), TokenSpec("bg", "background")]
    lam = 0.25
    g = latent_gradient(np.zeros((2, 1, 1)), ("s", "bg"), tokens, LossWeights(0, 0, lam, 0)).values
    # dL/dA = (-lam, 0); dL/dz_k = A_k (g_k - sum_j A_j g_j)
    assert g[0, 0, 0] == pytest.approx(0.5 * (-lam + lam / 2), abs=1e-16)
    assert g[1, 0, 0] == pytest.approx(0.5 * (0 + lam / 2), abs=1e-16)


def test_softmax_backward_matches_explicit_jacobian():
    rng = np.random.default_rng(9)
    z = rng.normal(size=(4, 3, 2))
    p = softmax_tokens(z)
    up = rng.normal(size=z.shape)
    got = softmax_backward(p, up)
    for i in range(3):
        for j in range(2):
            a = p[:, i, j]
            jac = np.diag(a) - np.outer(a, a)
            np.testing.assert_allclose(got[:, i, j], jac.T @ up[:, i, j], rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("seed", [0, 4])
def test_latent_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    z = 2 * rng.normal(size=(3, 16, 16))
    ids = tuple(t.id for t in GRADCHECK_TOKENS)
    probs = softmax_tokens(z)
    sel = select(AttentionStack(probs, ids), GRADCHECK_TOKENS)

    def fn(x):
        return evaluate(softmax_tokens(x), ids, GRADCHECK_TOKENS, sel).total

    analytic = latent_gradient(z, ids, GRADCHECK_TOKENS).values
    numeric = finite_diff_gradient(fn, z)
    rep = compare_gradients(analytic, numeric, ids, 1e-5, 1e-6, roundoff_resolution(fn(z), 1e-6))
    assert rep.passed, rep


def test_readout_chain_matches_finite_differences():
    rng = np.random.default_rng(12)
    z = rng.normal(size=(3, 10, 10))
    ids = tuple(t.id for t in GRADCHECK_TOKENS)
    R = Readout((10, 10), 1.0)
    probs = softmax_tokens(R.forward(z))
    sel = select(AttentionStack(probs, ids), GRADCHECK_TOKENS)
    analytic = R.adjoint(softmax_backward(probs, gradient_under(probs, ids, GRADCHECK_TOKENS, sel)))

    def fn(x):
        return evaluate(softmax_tokens(R.forward(x)), ids, GRADCHECK_TOKENS, sel).total

    numeric = finite_diff_gradient(fn, z)
    rep = compare_gradients(analytic, numeric, ids, 1e-5, 1e-6, roundoff_resolution(fn(z), 1e-6))
    assert rep.passed, rep


def test_readout_adjoint_identity():
    rng = np.random.default_rng(0)
    R = Readout((5, 7), 1.3)
    x, y = rng.normal(size=(2, 5, 7)), rng.normal(size=(2, 5, 7))
    assert float((R.forward(x) * y).sum()) == pytest.approx(float((x * R.adjoint(y)).sum()), rel=1e-12)


def test_finite_diff_quadratic_and_linear():
    x = np.array([[0.3, -1.2], [2.0, 0.0]])
    g = finite_diff_gradient(lambda v: float((v * v).sum()), x, 1e-4)
    np.testing.assert_allclose(g, 2 * x, atol=1e-8)
    c = np.array([[1.0, -2.0], [0.5, 3.0]])
    g = finite_diff_gradient(lambda v: float((c * v).sum()), x, 1e-3)
    np.testing.assert_allclose(g, c, atol=1e-12)


def test_finite_diff_errors():
    with pytest.raises(ValidationError):
        finite_diff_gradient(lambda v: 0.0, np.zeros(2), 0.0)
    with pytest.raises(FloatingPointError):
        finite_diff_gradient(lambda v: float("nan"), np.zeros(2))


def test_frozen_loss_reproduces_total():
    stack = random_stack(5)
    fn = frozen_loss_fn(stack, GRADCHECK_TOKENS)
    assert fn(stack.values) == total_loss(stack, GRADCHECK_TOKENS).total


def test_corrupted_gradient_fails_and_is_located():
    (rep,) = gradcheck_sweep(1, corrupt=True)
    assert not rep.passed
    assert rep.worst_cell == ("subject_a", 0, 0)


def test_compare_gradients_pass_and_fail():
    a = np.array([[[1.0, 2.0]]])
    assert compare_gradients(a, a.copy()).passed
    rep = compare_gradients(a, a * (1 + 1e-3))
    assert not rep.passed and rep.max_rel_err == pytest.approx(1e-3 / (1 + 1e-3), rel=1e-9)
    assert compare_gradients(np.zeros((1, 1, 1)), np.zeros((1, 1, 1))).max_rel_err == 0.0
    d = rep.as_dict()
    assert set(d) >= {"max_abs_err", "max_rel_err", "worst_token", "pass"}


def test_max_gradient_has_one_cell_per_subject():
    stack = random_stack(11)
    g = loss_gradient(stack, GRADCHECK_TOKENS, LossWeights(0, 0, 0.25, 0)).values
    assert [np.count_nonzero(g[k]) for k in range(3)] == [1, 1, 0]


def test_iso_gradient_consistent_under_swap():
    rng = np.random.default_rng(3)
    a, b = rng.random((7, 7)), rng.random((7, 7))
    toks = [TokenSpec("m"), TokenSpec("n")]
    g = loss_gradient(AttentionStack(np.stack([a, b]), ("m", "n")), toks, LossWeights(0, 1, 0, 0)).values
    h = loss_gradient(AttentionStack(np.stack([b, a]), ("m", "n")), toks, LossWeights(0, 1, 0, 0)).values
    np.testing.assert_allclose(g[0], h[1], rtol=1e-13, atol=1e-16)
    np.testing.assert_allclose(g[1], h[0], rtol=1e-13, atol=1e-16)


@pytest.mark.parametrize("alpha", [1e-3, 1e-4])
def test_small_step_decreases_loss(alpha):
    for seed in range(5):
        stack = random_stack(seed)
        fn = frozen_loss_fn(stack, GRADCHECK_TOKENS)
        g = loss_gradient(stack, GRADCHECK_TOKENS).values
        assert fn(stack.values - alpha * g) < fn(stack.values)
