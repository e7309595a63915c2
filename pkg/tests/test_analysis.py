import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from repmtl import analysis as an
from repmtl.model import TaskSpec, build_model

NYU_SIGNS = [0, 0, 1, 1, 1, 1, 0, 0, 0]
NYU_GROUPS = [0, 0, 1, 1, 2, 2, 2, 2, 2]
NYU_STL = [53.50, 75.39, 0.3926, 0.1605, 21.99, 15.16, 39.04, 65.00, 75.16]
NYU_REP = [54.59, 76.04, 0.3750, 0.1542, 21.91, 15.28, 38.37, 64.72, 75.05]
CITY_SIGNS = [0, 0, 1, 1]
CITY_GROUPS = [0, 0, 1, 1]
CITY_STL = [69.06, 91.54, 0.01282, 43.53]
CITY_REP = [69.72, 91.85, 0.01270, 43.42]


def table(values, signs, groups):
    return an.MetricTable.from_rows(values, signs, groups)


def jacobi_eigenvalues(a, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi rotations on a symmetric matrix (independent of LAPACK)."""
    a = np.array(a, dtype=float)
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(a ** 2) - np.sum(np.diag(a) ** 2))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta ** 2 + 1)) if theta != 0 else 1.0
                c = 1 / np.sqrt(t ** 2 + 1)
                s = t * c
                r = np.eye(n)
                r[p, p] = r[q, q] = c
                r[p, q], r[q, p] = s, -s
                a = r.T @ a @ r
    return np.sort(np.diag(a))


# ---------------------------------------------------------------- Δp

def test_self_comparison_is_zero():
    t = table(NYU_STL, NYU_SIGNS, NYU_GROUPS)
    assert an.delta_p(t, t) == (0.0, 0.0)


def test_reference_table_reconciliation():
    task, metric = an.delta_p(table(NYU_REP, NYU_SIGNS, NYU_GROUPS), table(NYU_STL, NYU_SIGNS, NYU_GROUPS))
    assert abs(task - 1.70) <= 0.01 and abs(metric - 0.95) <= 0.01
    task, _ = an.delta_p(table(CITY_REP, CITY_SIGNS, CITY_GROUPS), table(CITY_STL, CITY_SIGNS, CITY_GROUPS))
    assert abs(task - 0.62) <= 0.01


def test_exact_formula_linearity_and_antisymmetry():
    rng = np.random.default_rng(0)
    base = rng.uniform(1, 5, size=9)
    meth = base * rng.uniform(0.8, 1.2, size=9)
    b, m = table(base, NYU_SIGNS, NYU_GROUPS), table(meth, NYU_SIGNS, NYU_GROUPS)
    gains = an.metric_gains(m, b)
    flat = [g for row in gains for g in row]
    for i in range(9):
        sign = -1 if NYU_SIGNS[i] else 1
        assert flat[i] == sign * (meth[i] - base[i]) / base[i]
    swapped = [g for row in an.metric_gains(b, m) for g in row]
    for i in range(9):
        sign = -1 if NYU_SIGNS[i] else 1
        assert np.isclose(swapped[i], sign * (base[i] - meth[i]) / meth[i], rtol=1e-15)
    # moving one method value by δ moves Δp_metric by exactly ±100·δ/(b·n)
    d = 0.37
    bumped = meth.copy()
    bumped[4] += d
    _, m0 = an.delta_p(m, b)
    _, m1 = an.delta_p(table(bumped, NYU_SIGNS, NYU_GROUPS), b)
    assert np.isclose(m1 - m0, -100 * d / (base[4] * 9), rtol=1e-10)


def test_flipping_a_sign_negates_only_that_metric():
    b = table(NYU_STL, NYU_SIGNS, NYU_GROUPS)
    m = table(NYU_REP, NYU_SIGNS, NYU_GROUPS)
    flipped = list(NYU_SIGNS)
    flipped[6] = 1 - flipped[6]
    g0 = [x for row in an.metric_gains(m, b) for x in row]
    g1 = [x for row in an.metric_gains(table(NYU_REP, flipped, NYU_GROUPS), table(NYU_STL, flipped, NYU_GROUPS))
          for x in row]
    assert g1[6] == -g0[6] and all(g1[i] == g0[i] for i in range(9) if i != 6)


def test_structure_mismatch_and_zero_baseline():
    with pytest.raises(an.AnalysisError):
        an.delta_p(table([1, 2], [0, 0], [0, 1]), table([1, 2], [0, 1], [0, 1]))
    with pytest.raises(an.AnalysisError):
        an.delta_p(table([1.0], [0], [0]), table([0.0], [0], [0]))


# ---------------------------------------------------------------- spectra

def test_esd_examples():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(4, 4)))
    assert np.allclose(an.esd(q), 1.0)
    assert np.allclose(an.esd(np.diag([1.0, 2.0])), [1.0, 4.0])
    w = np.random.default_rng(1).normal(size=(5, 3))
    assert np.allclose(an.esd(w), jacobi_eigenvalues(w.T @ w), atol=1e-8)
    assert an.esd(np.ones((2, 3, 3, 3))).shape == (2,)
    with pytest.raises(an.AnalysisError):
        an.esd(np.ones((1, 5)))


@given(arrays(np.float64, (4, 6), elements=st.floats(-3, 3)), st.integers(0, 1000))
def test_esd_is_invariant_under_left_rotation(w, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(4, 4)))
    a, b = an.esd(w), an.esd(q @ w)
    assert np.allclose(a, b, atol=1e-9 * max(1.0, a.max()))


def _pareto(alpha, n, seed, xmin=1.0):
    u = 1.0 - np.random.default_rng(seed).random(n)
    return xmin * u ** (-1.0 / (alpha - 1.0))


def test_pl_fit_recovers_pareto_exponent():
    for seed in range(10):
        fit = an.pl_fit(_pareto(3.0, 10_000, seed))
        assert 2.9 <= fit.alpha <= 3.1, (seed, fit)


def test_pl_fit_scale_property():
    x = _pareto(3.0, 2000, 0)
    base = an.pl_fit(x)
    for c in (0.125, 2.0, 1024.0):
        f = an.pl_fit(x * c)
        assert f.alpha == base.alpha and f.xmin == base.xmin * c and f.ks == base.ks
    for c in (0.3, 7.0, 1e6):
        f = an.pl_fit(x * c)
        assert np.isclose(f.alpha, base.alpha, rtol=1e-12) and np.isclose(f.xmin, base.xmin * c, rtol=1e-12)


def test_pl_fit_guards_and_labels():
    with pytest.raises(an.AnalysisError, match="insufficient tail"):
        an.pl_fit(np.arange(1.0, 6.0), min_tail=8)
    with pytest.raises(an.AnalysisError):
        an.pl_fit(np.ones(20))
    th = an.PlThresholds()
    assert th.label(2.92) == "well-trained"
    assert th.label(1.5) == "under-trained"
    assert th.label(5.0) == "intermediate"
    assert th.label(6.5) == "over-or-under-trained"


# ---------------------------------------------------------------- audit

def test_audit_untrained_model_smoke():
    model = build_model([TaskSpec("a", "mse", 1), TaskSpec("b", "cross_entropy", 2)], seed=0)
    rep = an.audit_checkpoint(model.params)
    assert set(rep.parts) == {"backbone", "head:a", "head:b"}
    assert rep.head_spread is not None and rep.head_spread >= 0
    for audit in rep.parts.values():
        assert np.isfinite(audit.aggregate)


def test_identical_heads_have_zero_spread():
    model = build_model([TaskSpec("a", "mse", 1), TaskSpec("b", "mse", 1)], seed=0)
    params = dict(model.params)
    for k in ("0.weight", "0.bias", "1.weight", "1.bias"):
        params[f"heads.b.{k}"] = params[f"heads.a.{k}"]
    rep = an.audit_checkpoint(params)
    assert rep.parts["head:a"].aggregate == rep.parts["head:b"].aggregate
    assert rep.head_spread == 0.0


def test_planted_pareto_spectra_are_recovered():
    rng = np.random.default_rng(0)
    params = {}
    for i in range(3):
        lam = _pareto(2.5, 800, 100 + i)
        q, _ = np.linalg.qr(rng.normal(size=(800, 800)))
        params[f"encoder.{i}.weight"] = q @ np.diag(np.sqrt(lam))
    audit = an.audit_part(params, "backbone")
    assert 2.4 <= audit.aggregate <= 2.6, audit.aggregate


def test_part_selection_and_reports(tmp_path):
    assert an.part_of("encoder.0.weight") == "backbone"
    assert an.part_of("heads.depth.1.bias") == "head:depth"
    assert an.part_of("mto.logvar") is None
    model = build_model([TaskSpec("a", "mse", 1)], seed=1)
    rep = an.audit_checkpoint(model.params)
    an.write_audit(rep, tmp_path / "a.json", tmp_path / "a.csv")
    payload = json.loads((tmp_path / "a.json").read_text())
    assert payload["parts"]["head:a"]["aggregate_alpha"] == rep.parts["head:a"].aggregate
    rows = list(csv.DictReader((tmp_path / "a.csv").open()))
    assert {r["part"] for r in rows} == {"backbone", "head:a"}
    assert all(r["label"] in an.LABELS for r in rows)
    with pytest.raises(an.AnalysisError):
        an.audit_part(model.params, "head:zzz")
