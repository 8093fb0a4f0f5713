import numpy as np
import pytest

from app.apis.complex_core import build_complete
from app.apis.spectral import (
    DENSE,
    POWER,
    WalkMatrix,
    block_power_iteration,
    cheeger_audit,
    containment_graph,
    dense_second_eigenvalue,
    down_up_spectrum,
    down_up_walk,
    link_expansion,
    mixing_audit,
    sampling_audit,
    tolerances,
)
from app.apis.utils import DimensionError


def closed_form(n: int, i: int, j: int) -> float:
    return j * (n - i) / (i * (n - j))


def test_down_up_walk_is_reversible_and_stochastic():
    walk = down_up_walk(build_complete(8, 4), 3, 1)
    assert walk.row_sum_error() <= tolerances.row_sum
    assert walk.detailed_balance_error() <= tolerances.detailed_balance


@pytest.mark.parametrize("n,i,j", [(8, 3, 1), (10, 4, 2), (9, 4, 3)])
def test_down_up_matches_johnson_closed_form(n, i, j):
    report = down_up_spectrum(build_complete(n, i), i, j)
    assert report.method == DENSE
    assert report.second_eigenvalue == pytest.approx(closed_form(n, i, j), abs=1e-9)
    assert report.second_eigenvalue <= report.bound + 1e-9


def test_power_iteration_agrees_with_dense():
    X = build_complete(10, 4)
    dense = down_up_spectrum(X, 4, 2, method=DENSE)
    power = down_up_spectrum(X, 4, 2, method=POWER, seed=5)
    assert power.method == POWER
    assert power.second_eigenvalue == pytest.approx(dense.second_eigenvalue, abs=1e-6)
    assert power.residual <= tolerances.residual


def test_down_up_rejects_bad_levels(complete_6_3):
    with pytest.raises(DimensionError):
        down_up_spectrum(complete_6_3, 2, 3)


def test_link_expansion_of_complete_complex():
    one_sided = link_expansion(build_complete(10, 4), two_sided=False)
    assert one_sided.gamma <= 1e-9
    assert one_sided.links_checked == 3
    two_sided = link_expansion(build_complete(10, 4))
    # deepest link checked is K_8, smallest eigenvalue -1/7
    assert two_sided.gamma == pytest.approx(1 / 7, abs=1e-9)


def test_link_expansion_of_surfaces(rp2, torus):
    report = link_expansion(rp2)
    assert report.links_checked == 1 + 6
    assert 0 < report.gamma <= 1
    assert not report.sampled_links_only
    assert link_expansion(torus, two_sided=False).gamma > 0


def test_mixing_and_sampling_audits_hold(complete_8_4):
    G = containment_graph(complete_8_4, 4, 2)
    A = [face for face in G.left if 0 in face]
    B = [face for face in G.right if 1 in face]
    mixing = mixing_audit(G, A, B)
    assert mixing.holds
    assert mixing.lam == pytest.approx(G.second_singular)
    sampling = sampling_audit(G, B, 0.2)
    assert sampling.holds and not sampling.degenerate_eps
    assert sampling_audit(G, B, 0.0).degenerate_eps


def test_containment_singular_value_matches_walk(complete_8_4):
    G = containment_graph(complete_8_4, 4, 2)
    walk = down_up_spectrum(complete_8_4, 4, 2)
    assert G.second_singular ** 2 == pytest.approx(walk.second_eigenvalue, abs=1e-9)


def test_cheeger_audit_on_half_split(complete_6_3):
    facets = complete_6_3.facets
    audit = cheeger_audit(complete_6_3, facets[: len(facets) // 2], b=1)
    assert audit.mass == pytest.approx(0.5)
    assert 0 < audit.conductance <= 1
    assert cheeger_audit(complete_6_3, facets, b=1).cross_mass == pytest.approx(0.0)


def test_symmetrized_matrix_is_symmetric(rp2):
    walk = down_up_walk(rp2, 3, 2)
    S = walk.symmetrized()
    assert np.allclose(S, S.T)


@pytest.mark.parametrize("seed", range(50))
def test_power_iteration_agrees_with_dense_on_random_walks(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 17))
    weights = rng.random((n, n))
    walk = WalkMatrix.from_weights(range(n), weights + weights.T)
    dense = dense_second_eigenvalue(walk.symmetrized())[0]
    power, _, _, residual = block_power_iteration(walk.apply_symmetrized, np.sqrt(walk.stationary), n, seed=seed)
    assert power == pytest.approx(dense, abs=1e-6)
    assert residual <= tolerances.residual


@pytest.mark.parametrize("n,d,i,j", [(8, 4, 3, 1), (9, 4, 4, 2), (7, 5, 5, 4)])
def test_down_up_eigenvalues_lie_in_unit_interval(n, d, i, j, rp2):
    for X, (a, b) in ((build_complete(n, d), (i, j)), (rp2, (3, 2))):
        vals = np.linalg.eigvalsh(down_up_walk(X, a, b).symmetrized())
        assert vals.min() >= -tolerances.psd
        assert vals.max() <= 1 + tolerances.psd
