import json
import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mggp.expr import FunctionSet, GrowthConfig, parse_infix, random_tree, evaluate_column
from mggp.model import (DegenerateDesign, MultiGeneModel, ZeroVariance, compute_metrics,
                        export_model, export_models_json, export_models_text, fit_weights,
                        format_model, model_complexity, model_from_dict, parse_models_text,
                        predict, variable_frequency)

FS_COS = FunctionSet.with_cos()


def normal_equations_mp(A, y, dps=50):
    """High-precision normal-equations solve, independent of the SVD path."""
    with mpmath.workdps(dps):
        M = mpmath.matrix(A.tolist())
        v = mpmath.matrix(y.tolist())
        coef = mpmath.lu_solve(M.T * M, M.T * v)
        return np.array([float(c) for c in coef])


def design(genes, X):
    cols = [np.ones(X.shape[0])] + [evaluate_column(g, X) for g in genes]
    return np.column_stack(cols)


def well_posed_gene_sets(rng, n_sets, n_rows=200, n_vars=4, max_cond=1e6):
    """Random 1..10-gene sets with finite outputs and a tame design matrix."""
    growth = GrowthConfig(n_vars=n_vars, max_depth=5)
    out = []
    while len(out) < n_sets:
        X = rng.normal(size=(n_rows, n_vars))
        y = rng.normal(size=n_rows) + X[:, 0]
        genes = [random_tree(growth, rng) for _ in range(int(rng.integers(1, 11)))]
        A = design(genes, X)
        if not np.all(np.isfinite(A)) or np.linalg.cond(A) > max_cond:
            continue
        out.append((genes, X, y, A))
    return out


# ---------------------------------------------------------------- fitting

def test_exact_linear_relation():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    m = fit_weights([parse_infix("x1")], X, 2 * X[:, 0] + 1)
    assert m.bias == pytest.approx(1.0, abs=1e-12)
    assert m.weights[0] == pytest.approx(2.0, abs=1e-12)


def test_duplicate_genes_min_norm_split():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    m = fit_weights([parse_infix("x1"), parse_infix("x1")], X, X[:, 0])
    assert m.bias == pytest.approx(0.0, abs=1e-12)
    assert m.weights == pytest.approx((0.5, 0.5), abs=1e-12)


def test_collinear_scaled_copy_min_norm():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    m = fit_weights([parse_infix("x1"), parse_infix("(2.0*x1)")], X, X[:, 0])
    # minimum norm over d1 + 2*d2 = 1 is (0.2, 0.4)
    assert m.weights == pytest.approx((0.2, 0.4), abs=1e-12)


def test_huge_gene_does_not_mask_bias(rng):
    X = rng.normal(size=(60, 2))
    y = 1 + 3 * X[:, 0]
    big = "exp(exp((x2 + 3.0)))"
    m = fit_weights([parse_infix("x1"), parse_infix(big)], X, y)
    assert np.abs(evaluate_column(parse_infix(big), X)).max() > 1e20
    assert m.bias == pytest.approx(1.0, abs=1e-8)
    assert m.weights[0] == pytest.approx(3.0, abs=1e-8)


def test_zero_gene_gets_zero_weight():
    X = np.arange(10.0).reshape(-1, 1)
    m = fit_weights([parse_infix("(x1 - x1)"), parse_infix("x1")], X, 3 + X[:, 0])
    assert m.weights[0] == 0.0
    assert (m.bias, m.weights[1]) == pytest.approx((3.0, 1.0), abs=1e-12)


def test_five_gene_fit_matches_normal_equations(rng):
    sets = [s for s in well_posed_gene_sets(rng, 40) if len(s[0]) == 5]
    while not sets:
        sets = [s for s in well_posed_gene_sets(rng, 40) if len(s[0]) == 5]
    genes, X, y, A = sets[0]
    m = fit_weights(genes, X, y)
    assert np.max(np.abs(m.coefficients - normal_equations_mp(A, y))) <= 1e-8


def test_fit_on_dataset_records_fingerprint(small_dataset):
    m = fit_weights([parse_infix("x1"), parse_infix("(x2^2)")], small_dataset)
    assert m.fitted_on == small_dataset.fingerprint()
    assert m.coefficients == pytest.approx([1.0, 2.0, 0.5], abs=1e-10)


def test_degenerate_design_warns():
    X = np.arange(10.0).reshape(-1, 1)
    y = X[:, 0] * 2
    with pytest.warns(DegenerateDesign):
        m = fit_weights([parse_infix("3.0"), parse_infix("3.0")], X, y)
    assert all(math.isfinite(c) for c in m.coefficients)


def test_non_finite_gene_rejected():
    X = np.array([[-1.0], [1.0], [2.0], [3.0]])
    with pytest.raises(ValueError):
        fit_weights([parse_infix("log(x1)")], X, X[:, 0])


def test_least_squares_properties(rng):
    for genes, X, y, A in well_posed_gene_sets(rng, 20, max_cond=1e4):
        m = fit_weights(genes, X, y)
        yhat = predict(m, X)
        resid = y - yhat
        assert np.max(np.abs(A.T @ resid)) <= 1e-6 * np.linalg.norm(y) * np.max(np.abs(A))
        base = compute_metrics(y, yhat).mse
        coef = m.coefficients
        for k in range(len(coef)):
            for d in (1e-4, -1e-4):
                c = coef.copy()
                c[k] += d
                assert compute_metrics(y, A @ c).mse >= base


# ---------------------------------------------------------------- prediction

def test_bias_only_model():
    m = MultiGeneModel((), 5.0, ())
    assert predict(m, np.zeros((3, 2))).tolist() == [5.0, 5.0, 5.0]


def test_two_gene_model_prediction():
    g1 = parse_infix("(cos(x1) + (x2*0.5))", FS_COS)
    g2 = parse_infix("((x1/x2) + 2)", FS_COS)
    d0, d1, d2 = 0.25, 1.5, -0.75
    m = MultiGeneModel((g1, g2), d0, (d1, d2))
    assert predict(m, np.array([[0.0, 2.0]]))[0] == pytest.approx(d0 + 2 * d1 + 2 * d2, abs=1e-15)


def test_predict_matches_gene_loop(rng, growth4):
    X = rng.uniform(0.1, 2, (60, 4))
    genes = [random_tree(growth4, rng) for _ in range(4)]
    m = MultiGeneModel(genes, 0.3, (1.0, -2.0, 0.5, 3.0))
    loop = np.full(60, 0.3)
    for w, g in zip(m.weights, genes):
        loop = loop + w * evaluate_column(g, X)
    with np.errstate(all="ignore"):
        np.testing.assert_array_equal(predict(m, X), loop)


# ---------------------------------------------------------------- metrics

def test_perfect_fit_metrics():
    m = compute_metrics([1, 2, 3], [1, 2, 3])
    assert (m.rmse, m.mae, m.mse, m.r2) == (0.0, 0.0, 0.0, 1.0)


def test_worked_example_metrics():
    m = compute_metrics([1, 2, 3], [2, 2, 2])
    assert m.mae == pytest.approx(2 / 3, abs=1e-12)
    assert m.mse == pytest.approx(2 / 3, abs=1e-12)
    assert m.rmse == pytest.approx(math.sqrt(2 / 3), abs=1e-12)
    assert m.r2 == pytest.approx(0.0, abs=1e-12)


def test_mean_predictor_r2_zero(rng):
    y = rng.normal(size=30)
    assert compute_metrics(y, np.full(30, y.mean())).r2 == pytest.approx(0.0, abs=1e-12)


def test_zero_variance_flag():
    with pytest.warns(ZeroVariance):
        m = compute_metrics([2, 2, 2], [1, 2, 3])
    assert math.isnan(m.r2)
    assert m.mse == pytest.approx(2 / 3)


def test_length_mismatch():
    with pytest.raises(ValueError):
        compute_metrics([1, 2], [1, 2, 3])


# squares of tiny magnitudes underflow, which is outside what the identities describe
_val = st.floats(-1e3, 1e3).filter(lambda v: v == 0 or abs(v) > 1e-100)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(_val, _val), min_size=2, max_size=50))
def test_metric_identities(pairs):
    y = np.array([p[0] for p in pairs])
    yhat = np.array([p[1] for p in pairs])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroVariance)
        m = compute_metrics(y, yhat)
    assert m.rmse ** 2 == pytest.approx(m.mse, rel=1e-12, abs=1e-300)
    assert m.mae <= m.rmse * (1 + 1e-12) + 1e-300
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst > 0:
        assert m.r2 <= 1.0
        assert m.r2 == pytest.approx(1 - m.mse * len(y) / sst, rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------- complexity / frequency

def test_model_complexity():
    leaf = MultiGeneModel((parse_infix("x1"),), 0.0, (1.0,))
    assert model_complexity(leaf) == 1
    two = MultiGeneModel((parse_infix("(x1 + x2)"),) * 2, 0.0, (1.0, 1.0))
    assert model_complexity(two) == 10


def test_adding_gene_never_decreases_complexity(rng, growth4):
    genes = []
    prev = 0
    for _ in range(10):
        genes.append(random_tree(growth4, rng))
        c = model_complexity(genes)
        assert c >= prev
        prev = c


def test_frequency_single():
    rep = variable_frequency([MultiGeneModel((parse_infix("x1"),), 0.0, (1.0,))])
    assert [(e.name, e.percent) for e in rep.entries] == [("x1", 100.0)]


def test_frequency_two_models():
    a = MultiGeneModel((parse_infix("(x1 + x2)"),), 0.0, (1.0,))
    b = MultiGeneModel((parse_infix("x1"),), 0.0, (1.0,))
    rep = variable_frequency([a, b])
    got = {e.name: round(e.percent, 1) for e in rep.entries}
    assert got == {"x1": 66.7, "x2": 33.3}
    rev = variable_frequency([b, a])
    assert rev == rep


def test_frequency_sums_to_100(rng, growth4):
    models = [MultiGeneModel([random_tree(growth4, rng) for _ in range(3)], 0.0, (1.0,) * 3)
              for _ in range(10)]
    models = [m for m in models if m.used_variables()]
    rep = variable_frequency(models)
    assert sum(e.percent for e in rep.entries) == pytest.approx(100.0, abs=0.1)
    pct = [e.percent for e in rep.entries]
    assert pct == sorted(pct, reverse=True)


# ---------------------------------------------------------------- export

def test_bias_only_export():
    assert export_model(MultiGeneModel((), 0.133, ())) == "0.133"


def test_weighted_term_export():
    m = MultiGeneModel((parse_infix("x6"),), 0.133, (0.8,))
    assert export_model(m) == "0.8*x6 + 0.133"
    neg = MultiGeneModel((parse_infix("x6"), parse_infix("x18")), -0.5, (0.8, -0.123))
    assert export_model(neg) == "0.8*x6 - 0.123*x18 - 0.5"


def test_export_reparses_equivalently(rng, growth4):
    X = rng.uniform(0.2, 2, (40, 4))
    for _ in range(50):
        genes = [random_tree(growth4, rng) for _ in range(int(rng.integers(1, 6)))]
        w = tuple(rng.normal(size=len(genes)))
        m = MultiGeneModel(genes, float(rng.normal()), w)
        flat = parse_infix(format_model(m, digits=None), FS_COS)
        with np.errstate(all="ignore"):
            a, b = predict(m, X), evaluate_column(flat, X)
        ok = np.isclose(a, b, rtol=1e-12, atol=1e-12) | (~np.isfinite(a) & ~np.isfinite(b))
        assert ok.all()
        (_, back), = parse_models_text(export_models_text([m]), FS_COS)
        np.testing.assert_array_equal(predict(back, X), a)


def test_text_and_json_records():
    m = MultiGeneModel((parse_infix("x1"), parse_infix("exp(x2)")), 0.1, (2.0, -1e-4))
    text = export_models_text([m], ["a"])
    assert text.splitlines() == ["model a bias=0.1", "w=2.0 expr=x1", "w=-0.0001 expr=exp(x2)"]
    d = json.loads(export_models_json([m]))["models"][0]
    back = model_from_dict(d)
    assert back.weights == m.weights and back.bias == m.bias
    assert [g.root for g in back.genes] == [g.root for g in m.genes]


def test_bad_record_rejected():
    with pytest.raises(ValueError):
        parse_models_text("garbage line\n")
