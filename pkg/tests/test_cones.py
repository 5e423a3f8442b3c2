import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phlab.cones import (CertificationError, ConeField, InverseModel, certify_invariance,
                         certify_model, cone_contains, default_samples, narrowing_iterations,
                         narrowing_oracle, standard_cones)
from phlab.models import CAT, LinearToral, default_instance, make_chart, splitting_matrix
from phlab.perturbation import compose_global, rectangle_points, single_rectangle

LAM = (3 + math.sqrt(5)) / 2


def test_cone_contains_basics():
    cone = ConeField(np.array([[1.0], [0.0]]), 0.5, "u")
    assert cone_contains(cone, np.array([1.0, 0.0]))
    assert not cone_contains(cone, np.array([0.0, 1.0]))
    assert cone_contains(cone, np.array([1.0, 0.4]))
    assert not cone_contains(cone, np.array([1.0, 0.6]))
    with pytest.raises(ValueError):
        cone_contains(cone, np.zeros(2))


def test_cat_times_id_expansion():
    cert = certify_model(default_instance(), width=0.1, n_samples=200)
    assert cert.passed
    assert cert.expansion_u >= 2.2
    assert cert.expansion_u <= LAM
    assert all(m > 0 for m in cert.margins.values())


def test_identity_fails():
    f = default_instance()
    cones = standard_cones(f, 0.1)
    with pytest.raises(CertificationError) as err:
        certify_invariance(LinearToral(np.eye(3)), cones, default_samples(f, 50),
                           frames=splitting_matrix(f), dims=(1, 1, 1))
    assert "point" in err.value.witness
    with pytest.raises(CertificationError):
        certify_model(LinearToral(np.eye(3)))


def test_duality_stable_forward_inverse():
    f = default_instance()
    S = default_samples(f, 60, seed=3)
    cs = standard_cones(f, 0.1)["s"]
    a = certify_invariance(f, [cs], S)
    b = certify_invariance(InverseModel(f), [ConeField(cs.frame, 0.1, "u")], S,
                           frames=splitting_matrix(f)[:, ::-1], dims=(1, 1, 1))
    assert a.margins["s"] == pytest.approx(b.margins["u"], rel=1e-12)
    assert a.expansion_s == pytest.approx(b.expansion_u, rel=1e-12)


def test_narrowing_two_dimensional_cat_oracle():
    cat = LinearToral(CAT)
    cone = standard_cones(cat, 0.1)["u"]
    S = default_samples(cat, 100)
    for a in (0.05, 0.004, 1e-4, 1e-6):
        assert abs(narrowing_iterations(cat, cone, a, S) - narrowing_oracle(LAM ** 2, 0.1, a)) <= 1


def test_narrowing_cat_times_id():
    f = default_instance()
    S = default_samples(f, 100)
    cone = standard_cones(f, 0.02)["u"]
    # squared-rate formula within one iterate at the default width and theta = 0.004
    assert abs(narrowing_iterations(f, cone, 0.004, S) - narrowing_oracle(LAM ** 2, 0.02, 0.004)) <= 1
    # the neutral center makes the rate lambda, not lambda^2
    for a in (0.004, 1e-4, 1e-7):
        assert narrowing_iterations(f, cone, a, S) == narrowing_oracle(LAM, 0.02, a)
    assert narrowing_iterations(f, cone, 0.02, S) == 0


def test_narrowing_default_schedule_value():
    cert = certify_model(default_instance(), width=0.02, narrowing_targets=[0.004])
    assert cert.narrowing[0.004] == 2


@settings(max_examples=20, deadline=None)
@given(st.floats(1e-6, 0.019), st.floats(1e-6, 0.019))
def test_narrowing_monotone(a, b):
    f = default_instance()
    S = default_samples(f, 20)
    cone = standard_cones(f, 0.02)["cu"]
    lo, hi = sorted([a, b])
    assert narrowing_iterations(f, cone, hi, S) <= narrowing_iterations(f, cone, lo, S)


def test_small_perturbation_keeps_all_cones():
    f = default_instance()
    cube = make_chart(f, [0.5, 0.5, 0.5], 0.1)
    g = compose_global(f, [single_rectangle(cube, [0.3, 0, 0.4], 0.05)], 0.005, 0.05)
    pts, _ = rectangle_points(g, 200, np.random.default_rng(0))
    cert = certify_model(g, width=0.02, extra_samples=f.inverse(pts))
    assert cert.passed


def test_strict_nesting_property():
    f = default_instance()
    cert = certify_model(f, width=0.02, n_samples=100, seed=11)
    assert min(cert.margins.values()) > 0
