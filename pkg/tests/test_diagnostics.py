import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rxnflow.chemgraph import parse_smiles
from rxnflow.diagnostics import (FAILURE, OVERSHOOT, R_TO_P, R_TO_W, DecodedTrajectory, average_ranks,
                                 classify_trajectory, correlation_report, geometry, is_valid, pca_project, sim,
                                 spearman, tagi, verdict_row, write_pca_csv, write_verdicts_csv)

from diag_fixtures import (GRAPHS, TAGI_FIXTURES, ZIGZAG, brute_class, brute_geometry, graphs_of,
                           pooled_from_speeds, stable_trajectories, taxonomy_fixtures)

R, P = GRAPHS["R"], GRAPHS["P"]


# ----------------------------------------------------------------- taxonomy


def test_taxonomy_examples():
    v = classify_trajectory(graphs_of("R" + "P" * 10), P, R)
    assert v.cls == R_TO_P and v.hit_steps == tuple(range(1, 11)) and v.final_match
    v = classify_trajectory(graphs_of("RRRRRRPPPWW"), P, R)
    assert v.cls == OVERSHOOT and len(v.hit_steps) == 3
    assert classify_trajectory(graphs_of("RWWWWWWWWWR"), P, R).cls == FAILURE
    assert classify_trajectory(graphs_of("RRRRRRRRRRW"), P, R).cls == R_TO_W


def test_taxonomy_matches_brute_force():
    for labels in taxonomy_fixtures(300, seed=1):
        v = classify_trajectory(graphs_of(labels), P, R)
        assert (v.cls, v.hit_steps) == brute_class(labels)


def test_decoded_trajectory_lengths():
    with pytest.raises(ValueError):
        DecodedTrajectory([0.0, 1.0], graphs_of("RP"), np.zeros((3, 2)))


# --------------------------------------------------------------- similarity


def test_sim_examples():
    g = parse_smiles("CCCCCCCCCCCCCCCCCCCC")
    assert sim(g, g) == 1.0
    adj = g.adj.copy()
    adj[0, 1] = adj[1, 0] = 2.0
    assert math.isclose(sim(g, type(g)(g.atoms, adj)), 1 - 1 / 210)
    assert sim(R, P) == 0.9
    assert sim(GRAPHS["X"], GRAPHS["W"]) < 0.9
    with pytest.raises(ValueError):
        sim(R, parse_smiles("CC"))


def test_validity():
    assert is_valid(P) and not is_valid(GRAPHS["X"])


# --------------------------------------------------------------------- gate


@pytest.mark.parametrize("fx", TAGI_FIXTURES, ids=[f[0] for f in TAGI_FIXTURES])
def test_gate_fixtures(fx):
    _, labels, speeds, triggered, reason, t_star, chosen = fx
    d, g = tagi(pooled_from_speeds(speeds), graphs_of(labels), R)
    assert (d.triggered, d.reason, d.t_star) == (triggered, reason, t_star)
    assert g is GRAPHS[chosen]
    assert d.triggered == (d.reason != "none")


def test_gate_closed_on_stable_trajectories():
    for labels, speeds in stable_trajectories(200, seed=3):
        d, g = tagi(pooled_from_speeds(speeds), graphs_of(labels), R)
        assert not d.triggered and g is GRAPHS[labels[-1]]


def test_gate_rescue_soundness():
    rng = np.random.default_rng(4)
    checked = 0
    for _ in range(400):
        labels = "R" + "".join(rng.choice(list("RPWVX"), 10))
        speeds = list(rng.uniform(0, 0.6, 10))
        d, g = tagi(pooled_from_speeds(speeds), graphs_of(labels), R)
        best = max(d.scores.values()) if d.scores else None
        winners = {labels[t] for t, s in d.scores.items() if s == best}
        if d.triggered and winners == {"P"}:
            checked += 1
            assert g is P
    assert checked > 10


def test_gate_needs_aligned_input():
    with pytest.raises(ValueError):
        tagi(np.zeros((3, 2)), graphs_of("RP"), R)


# ----------------------------------------------------------------- geometry


def test_straight_line_closed_forms():
    d = np.array([3.0, -4.0])
    z = np.array([[1.0, 1.0]]) + np.linspace(0, 1, 11)[:, None] * d
    g = geometry(z)
    assert 1.0 <= g.eta <= 1.0 + 1e-6 and g.kappa < 1e-9 and g.alpha_min > 1 - 1e-9
    assert math.isclose(g.kinetic, 0.5)


def test_stationary_trajectory():
    g = geometry(np.ones((11, 3)))
    assert g.kinetic == 0 and g.kappa == 0 and g.eta == 1.0 and math.isnan(g.alpha_min)


def test_zigzag_brute_force():
    g = geometry(ZIGZAG)
    for a, b in zip((g.eta, g.kappa, g.alpha_min, g.kinetic), brute_geometry(ZIGZAG)):
        assert abs(a - b) < 1e-6


@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_geometry_scale_equivariance_and_bounds(seed, c):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((11, 4)) + np.linspace(0, 1, 11)[:, None] * 10 * rng.standard_normal(4)
    a, b = geometry(z), geometry(c * z)
    assert a.eta >= 1 - 1e-6 and a.kappa >= 0 and a.kinetic >= 0 and -1 <= a.alpha_min <= 1
    assert abs(a.eta - b.eta) < 1e-6 and abs(a.alpha_min - b.alpha_min) < 1e-6
    assert math.isclose(b.kinetic, c * a.kinetic, rel_tol=1e-12)
    assert math.isclose(b.kappa, c * a.kappa, rel_tol=1e-12)


def test_geometry_needs_three_points():
    with pytest.raises(ValueError):
        geometry(np.zeros((2, 2)))


# ---------------------------------------------------------------------- PCA


def test_pca_line_and_isotropic():
    t = np.linspace(-1, 1, 50)[:, None]
    p = pca_project(t * np.array([[1.0, 2.0, -1.0]]) + 1e-4 * np.random.default_rng(0).standard_normal((50, 3)))
    assert p.explained[0] >= 0.999
    iso = pca_project(np.random.default_rng(1).standard_normal((1000, 2)))
    assert abs(iso.explained[0] - 0.5) < 0.05 and abs(iso.explained.sum() - 1) < 1e-9


def test_pca_idempotent_distances():
    x = np.random.default_rng(2).standard_normal((40, 6))
    once = pca_project(x).coords
    twice = pca_project(once).coords
    d1 = np.linalg.norm(once[:, None] - once[None], axis=-1)
    d2 = np.linalg.norm(twice[:, None] - twice[None], axis=-1)
    assert np.abs(d1 - d2).max() < 1e-5


def test_pca_degenerate_flagged():
    p = pca_project(np.tile([[1.0, 2.0]], (5, 1)))
    assert p.degenerate and p.coords.shape == (5, 0)


def test_pca_deterministic():
    x = np.random.default_rng(3).standard_normal((30, 5))
    assert np.array_equal(pca_project(x, seed=7).coords, pca_project(x, seed=7).coords)


# -------------------------------------------------------------- correlation


def ref_spearman(x, y):
    def ranks(v):
        return [sum(1 for w in v if w < a) + (sum(1 for w in v if w == a) + 1) / 2 for a in v]
    rx, ry = ranks(list(x)), ranks(list(y))
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))
    return num / den


def test_spearman_monotone_and_oracle():
    x = np.arange(10.0)
    assert spearman(x, x ** 3) == 1.0 and spearman(x, -np.exp(x)) == -1.0
    rng = np.random.default_rng(5)
    for _ in range(100):
        a = rng.integers(0, 8, 15).astype(float)
        b = rng.standard_normal(15)
        assert abs(spearman(a, b) - ref_spearman(a, b)) < 1e-12
    assert list(average_ranks([3, 1, 3, 2])) == [3.5, 1.0, 3.5, 2.0]


def test_correlation_report_groups_and_exclusion():
    rows = []
    for g, acc in enumerate([0.2, 0.5, 0.8, 0.9]):
        for i in range(10):
            rows.append({"group": g, "correct": i < acc * 10, "alpha_min": acc, "kinetic": acc, "eta": 2 - acc,
                         "kappa": 0.0})
    rep = correlation_report(rows)
    assert rep.rho["alpha_min"] == 1.0 and rep.rho["eta"] == -1.0 and math.isnan(rep.rho["kappa"])
    rep = correlation_report(rows, exclude=[3])
    assert len(rep.groups) == 3 and rep.excluded == (3,)
    with pytest.raises(ValueError):
        correlation_report(rows, exclude=[0, 1])


# ---------------------------------------------------------------------- I/O


def test_verdict_and_pca_csv(tmp_path):
    v = classify_trajectory(graphs_of("RRRRRRPPPWW"), P, R)
    d, _ = tagi(pooled_from_speeds([0.1] * 10), graphs_of("RRRRRRPPPWW"), R)
    row = verdict_row("r7", v, d, geometry(ZIGZAG))
    write_verdicts_csv(tmp_path / "v.csv", [row])
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0].split(",")[:3] == ["reaction_id", "class", "hit_steps"]
    assert lines[1].startswith("r7,R->P->[W/R],6;7;8,")
    write_pca_csv(tmp_path / "p.csv", [("r7", 0, 0.5, -1.0)])
    assert (tmp_path / "p.csv").read_text().splitlines()[1] == "r7,0,0.5,-1.0"
