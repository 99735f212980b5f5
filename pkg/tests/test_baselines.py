"""The optimization baseline and the naive averaging attack."""

import numpy as np
import pytest

from mixcrypt.baselines import (
    CarliniProblem,
    CoefficientSource,
    averaging_attack,
    build_carlini_problem,
    carlini_attack,
)
from mixcrypt.errors import DataError, DimensionError
from mixcrypt.harness import (
    clusters_from_oracle,
    generate_zero_noise_data,
    stage_rng,
)
from mixcrypt.metrics import mssim


def test_problem_validation():
    with pytest.raises(DimensionError):
        CarliniProblem(abs_b=np.zeros((2, 10)), coeffs=np.zeros((3, 2)), height=1, width=1)
    with pytest.raises(DataError):
        CarliniProblem(abs_b=-np.ones((2, 12)), coeffs=np.zeros((2, 2)), height=2, width=2)
    with pytest.raises(DataError):
        CoefficientSource(mode="guess")


def test_identity_coefficients_recover_exactly():
    rng = np.random.default_rng(1)
    targets = rng.uniform(0.0, 1.0, (3, 3 * 8 * 8))
    problem = CarliniProblem(abs_b=targets, coeffs=np.eye(3), height=8, width=8)
    images, objective = carlini_attack(problem, iterations=400, step_size=0.1)
    assert objective[-1] < 1e-8
    assert np.all(np.diff(objective) <= 0)
    flat = np.stack([img.reshape(-1) for img in images])
    assert np.allclose(np.abs(flat), targets, atol=1e-5)


def test_objective_monotone_on_noisy_problem():
    rng = np.random.default_rng(2)
    coeffs = np.abs(rng.uniform(0.1, 1.0, (12, 4)))
    truth = rng.uniform(-1, 1, (4, 3 * 6 * 6))
    abs_b = np.abs(coeffs @ truth)  # signed truth: irreducible residual
    problem = CarliniProblem(abs_b=abs_b, coeffs=coeffs, height=6, width=6)
    _, objective = carlini_attack(problem, iterations=200, step_size=0.05)
    assert np.all(np.diff(objective) <= 0)


def test_abs_non_commutation_two_pixel_instance():
    # mixing weights [0.5, 0.3] on values [-0.8, 1.0]: the true abs of the mix
    # is 0.1 but the model predicts 0.7, leaving irreducible residual
    coeffs = np.array([[0.5, 0.3]])
    values = np.array([[-0.8], [1.0]])
    true_abs = np.abs(coeffs @ values)
    model_abs = coeffs @ np.abs(values)
    assert true_abs[0, 0] == pytest.approx(0.1)
    assert model_abs[0, 0] == pytest.approx(0.7)
    residual = abs(true_abs[0, 0] - model_abs[0, 0])
    assert residual > 0.5


def test_zero_noise_set_solves_to_high_ssim():
    data = generate_zero_noise_data(4, 8, 16, 16, stage_rng(3, "zero-noise"))
    encs, privates = data["encryptions"], data["privates"]
    clusters = clusters_from_oracle(encs)
    problem = build_carlini_problem(encs, clusters, CoefficientSource(mode="oracle"))
    images, objective = carlini_attack(problem, iterations=400, step_size=0.1)
    assert np.all(np.diff(objective) <= 0)
    for ci, cl in enumerate(clusters):
        tid = encs[cl.member_ids[0]].oracle.target.source_id
        assert mssim(images[ci], privates[tid]) > 0.95


def test_label_inferred_coefficients_match_oracle_when_unambiguous():
    data = generate_zero_noise_data(3, 4, 16, 16, stage_rng(5, "zero-noise"))
    encs = data["encryptions"]
    clusters = clusters_from_oracle(encs)
    oracle_problem = build_carlini_problem(encs, clusters, CoefficientSource(mode="oracle"))
    label_problem = build_carlini_problem(encs, clusters, CoefficientSource(mode="label_inferred"))
    assert np.allclose(oracle_problem.coeffs, label_problem.coeffs)


def test_averaging_attack_identities():
    rng = np.random.default_rng(7)
    member = np.abs(rng.uniform(-1, 1, (3, 8, 8)))
    out = averaging_attack([member], [1.0])
    assert np.array_equal(out, np.clip(member, 0, 1))
    # duplicated member list returns the identical output
    dup = averaging_attack([member, member.copy()], [1.0, 1.0])
    assert np.array_equal(dup, out)
    # permutation invariance
    other = np.abs(rng.uniform(-1, 1, (3, 8, 8))) * 0.5
    ab = averaging_attack([member, other], [0.8, 0.6])
    ba = averaging_attack([other, member], [0.6, 0.8])
    assert np.array_equal(ab, ba)
    with pytest.raises(DataError):
        averaging_attack([], [])


def test_averaging_exact_on_zero_noise_members():
    data = generate_zero_noise_data(2, 5, 16, 16, stage_rng(9, "zero-noise"))
    encs, privates = data["encryptions"], data["privates"]
    clusters = clusters_from_oracle(encs)
    for cl in clusters:
        tid = encs[cl.member_ids[0]].oracle.target.source_id
        lams = [float(encs[m].oracle.lambdas[0]) for m in cl.member_ids]
        out = averaging_attack([np.abs(encs[m].image) for m in cl.member_ids], lams)
        assert np.allclose(out, privates[tid], atol=1e-12)
        assert mssim(out, privates[tid]) > 0.99
