import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phlab.models import (CAT, LinearToral, ModelError, SkewProduct, default_instance,
                          exact_splitting, make_chart, model_from_doc, torus_delta, wrap)
from phlab.perturbation import compose_global, single_rectangle

GOLDEN = (3 + np.sqrt(5)) / 2


def test_cat_map_fixed_point_and_half_point():
    f = LinearToral(CAT)
    assert np.array_equal(f.eval([0.0, 0.0]), [0.0, 0.0])
    assert np.array_equal(f.eval([0.5, 0.5]), [0.5, 0.0])


def test_skew_eval_at_zero_of_sine():
    f = SkewProduct(CAT, 0.1, 2)
    assert np.allclose(f.eval([0.0, 0.0, 0.25]), [0.0, 0.0, 0.25], atol=1e-16)


def test_derivatives_closed_form():
    assert np.array_equal(LinearToral(CAT).derivative([0.3, 0.1]), CAT)
    D = SkewProduct(CAT, 0.1, 2).derivative([0.2, 0.7, 0.0])
    assert D[2, 2] == pytest.approx(0.8)


def test_rejects_bad_models():
    with pytest.raises(ModelError):
        LinearToral(np.array([[2, 0], [0, 1]]))
    with pytest.raises(ModelError):
        SkewProduct(CAT, 0.5, 3)
    with pytest.raises(ModelError):
        model_from_doc({"kind": "nope"})


def test_exact_splitting_oracle():
    f = LinearToral(CAT)
    Es, Ec, Eu = exact_splitting(f)
    w, v = np.linalg.eigh(CAT.astype(float))
    assert abs(abs(Eu[:, 0] @ v[:, 1]) - 1) < 1e-12
    assert np.allclose(CAT @ Eu[:, 0], GOLDEN * Eu[:, 0])
    assert Ec.shape == (2, 0)
    assert abs(Es[:, 0] @ Eu[:, 0]) == pytest.approx(abs(v[:, 0] @ v[:, 1]), abs=1e-12)
    Es, Ec, Eu = exact_splitting(default_instance())
    assert np.array_equal(Ec[:, 0], [0.0, 0.0, 1.0])


def test_chart_invariants():
    f = default_instance()
    rho = 0.1
    ch = make_chart(f, [0.2, 0.9, 0.5], rho)
    assert np.allclose(ch.psi(ch.center), 0.5, atol=1e-15)
    rng = np.random.default_rng(1)
    q = rng.random((100, 3))
    p = ch.psi_inv(q)
    assert np.max(np.abs(torus_delta(ch.psi_inv(ch.psi(p)), p))) < 1e-12
    Eu = exact_splitting(f)[2][:, 0]
    assert np.allclose(ch.psi(wrap(ch.center + rho / 4 * Eu)), [0.5, 0.5, 0.75], atol=1e-12)
    with pytest.raises(ModelError):
        make_chart(f, [0, 0, 0], 0.3)


def test_skew_with_zero_eps_is_product():
    rng = np.random.default_rng(2)
    p = rng.random((200, 3))
    a = SkewProduct(CAT, 0.0, 3).eval(p)
    b = LinearToral(np.array([[2, 1, 0], [1, 1, 0], [0, 0, 1]])).eval(p)
    assert np.array_equal(a, b)


def _sample_composite():
    f = default_instance()
    cube = make_chart(f, [0.3, 0.6, 0.4], 0.1)
    return f, cube, compose_global(f, [single_rectangle(cube, [0.4, 0, 0.45], 0.05)], 0.05, 0.05)


@pytest.mark.parametrize("which", ["cat", "skew", "composite"])
def test_eval_derivative_consistency(which):
    rng = np.random.default_rng(3)
    if which == "cat":
        model = LinearToral(CAT)
        p = rng.random((50, 2))
    elif which == "skew":
        model = SkewProduct(CAT, 0.1, 2)
        p = rng.random((50, 3))
    else:
        # a wide rectangle, so that h = 1e-3 already resolves its profile
        f = default_instance()
        cube = make_chart(f, [0.3, 0.6, 0.4], 0.2)
        model = compose_global(f, [single_rectangle(cube, [0.4, 0, 0.4], 0.2)], 0.05, 0.2)
        q = np.column_stack([0.4 + 0.2 * rng.random(50), rng.random(50), 0.4 + 0.2 * rng.random(50)])
        p = f.inverse(cube.psi_inv(q))
    v = rng.normal(size=p.shape)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    D = model.derivative(p)
    errs = []
    for h in (1e-3, 1e-4, 1e-5):
        fd = torus_delta(model.eval(p), model.eval(wrap(p + h * v))) / h
        errs.append(np.max(np.linalg.norm(fd - np.einsum("nij,nj->ni", D, v), axis=1)))
    # first-order convergence, down to round-off for the linear maps
    assert errs[2] < 0.2 * errs[1] + 1e-9
    assert errs[1] < 0.2 * errs[0] + 1e-9


def test_composite_derivative_matches_central_differences():
    f, cube, g = _sample_composite()
    rng = np.random.default_rng(4)
    q = np.column_stack([0.4 + 0.05 * (0.2 + 0.6 * rng.random(10)), 0.2 + 0.6 * rng.random(10),
                         0.45 + 0.05 * (0.2 + 0.6 * rng.random(10))])
    p = f.inverse(cube.psi_inv(q))
    D = g.derivative(p)
    h = 1e-7
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = torus_delta(g.eval(p - e), g.eval(p + e)) / (2 * h)
        assert np.max(np.abs(fd - D[:, :, k])) < 1e-6


def test_composite_equals_base_off_rectangles_bitwise():
    f, cube, g = _sample_composite()
    p = np.random.default_rng(5).random((3000, 3))
    off = g.patch_of(f.eval(p)) < 0
    assert off.sum() > 2900
    assert np.array_equal(g.eval(p[off]), f.eval(p[off]))


def test_document_round_trip():
    f, cube, g = _sample_composite()
    g2 = model_from_doc(g.to_doc())
    p = np.random.default_rng(6).random((500, 3))
    assert np.array_equal(g.eval(p), g2.eval(p))
    assert g.digest() == g2.digest()
    s = SkewProduct(CAT, 0.1, 2)
    assert model_from_doc(s.to_doc()).to_doc() == s.to_doc()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=3))
def test_wrap_lands_in_unit_interval(xs):
    w = wrap(np.array(xs))
    assert np.all((w >= 0) & (w < 1))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1, exclude_max=True), min_size=3, max_size=3),
       st.floats(0.0, 0.15), st.integers(1, 4))
def test_skew_inverse_round_trip(p, eps, k):
    if eps * k >= 0.9:
        eps = 0.9 / k
    f = SkewProduct(CAT, eps, k)
    p = np.array(p)
    assert np.max(np.abs(torus_delta(f.inverse(f.eval(p)), p))) < 1e-12
