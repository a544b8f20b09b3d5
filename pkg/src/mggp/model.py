"""Multi-gene models: least-squares weights, prediction, error metrics,
complexity, variable frequency and text/JSON export."""
from __future__ import annotations

import json
import math
import re
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .expr import (ExprTree, FunctionSet, evaluate_columns, format_constant,
                   input_columns, parse_infix, to_infix, var_name)

RANK_RTOL = 1e-10


class DegenerateDesign(UserWarning):
    """Every gene column is constant and identical; the fit is min-norm."""


class ZeroVariance(UserWarning):
    """Observed vector is constant so R^2 is undefined (reported as NaN)."""


@dataclass(frozen=True)
class MultiGeneModel:
    """Bias plus weighted sum of gene trees."""

    genes: tuple[ExprTree, ...]
    bias: float
    weights: tuple[float, ...]
    fitted_on: str = ""

    def __post_init__(self):
        object.__setattr__(self, "genes", tuple(self.genes))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "bias", float(self.bias))
        if len(self.weights) != len(self.genes):
            raise ValueError("weight count must equal gene count")

    @property
    def n_genes(self) -> int:
        return len(self.genes)

    @property
    def coefficients(self) -> np.ndarray:
        return np.array((self.bias,) + self.weights)

    def used_variables(self) -> list[int]:
        return sorted({i for g in self.genes for i in g.variables()})


@dataclass(frozen=True)
class Metrics:
    r2: float
    rmse: float
    mae: float
    mse: float

    def to_dict(self) -> dict:
        return {"r2": self.r2, "rmse": self.rmse, "mae": self.mae, "mse": self.mse}


# --------------------------------------------------------------------------
# fitting

def gene_matrix(genes: Sequence[ExprTree], data) -> np.ndarray:
    """Columns of gene outputs, shape (rows, n_genes)."""
    cols = input_columns(data)
    n = getattr(data, "row_count", None)
    if n is None:
        n = len(cols[0])
    G = np.empty((n, len(genes)))
    for k, g in enumerate(genes):
        G[:, k] = evaluate_columns(g, cols, n)
    return G


def solve_weights(G: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least-squares (bias, weights) for design [1 | G].

    The rank decision is made on the column-equilibrated design (each
    column scaled to unit norm): singular values below RANK_RTOL times the
    largest are dropped. Among the remaining least-squares solutions the
    one with minimum Euclidean norm in the original weights is returned.
    Equilibrating first keeps a single huge gene column from masking the
    bias and the other genes. Raises numpy.linalg.LinAlgError if the SVD
    does not converge.
    """
    A = np.empty((G.shape[0], G.shape[1] + 1))
    A[:, 0] = 1.0
    A[:, 1:] = G
    norms = np.sqrt(np.einsum("ij,ij->j", A, A))
    scale = np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 1.0)
    U, s, Vt = np.linalg.svd(A * scale, full_matrices=False)
    r = int(np.sum(s > RANK_RTOL * s[0])) if s[0] > 0 else 0
    coef = scale * (Vt[:r].T @ ((U[:, :r].T @ y) / s[:r]))
    if r < A.shape[1]:
        # project out the null-space component in original coordinates
        Q, _ = np.linalg.qr(scale[:, None] * Vt[r:].T)
        coef = coef - Q @ (Q.T @ coef)
    return coef


def _degenerate(G: np.ndarray) -> bool:
    if G.shape[1] == 0:
        return False
    first = G[0, 0]
    return bool(np.all(G == first))


def fit_weights(genes: Sequence[ExprTree], data, y=None) -> MultiGeneModel:
    """Fit bias and gene weights by ordinary least squares.

    ``data`` is a Dataset (target taken from it) or an input array with
    ``y`` given separately. Gene outputs must be finite on every row.
    """
    genes = tuple(genes)
    if y is None:
        y = data.y
    y = np.asarray(y, dtype=float)
    G = gene_matrix(genes, data)
    if not np.all(np.isfinite(G)):
        raise ValueError("gene outputs contain non-finite values")
    if len(y) <= len(genes) + 1:
        raise ValueError("need more rows than coefficients")
    if _degenerate(G):
        warnings.warn("all gene columns are constant and identical", DegenerateDesign,
                      stacklevel=2)
    coef = solve_weights(G, y)
    fp = data.fingerprint() if hasattr(data, "fingerprint") else ""
    return MultiGeneModel(genes, coef[0], coef[1:], fp)


def combine(bias: float, weights: Sequence[float], G: np.ndarray) -> np.ndarray:
    """bias + sum_k weights[k] * G[:, k], accumulated gene by gene."""
    out = np.full(G.shape[0], float(bias))
    with np.errstate(all="ignore"):
        for k, w in enumerate(weights):
            out = out + w * G[:, k]
    return out


def predict(model: MultiGeneModel, data) -> np.ndarray:
    return combine(model.bias, model.weights, gene_matrix(model.genes, data))


# --------------------------------------------------------------------------
# metrics

def rmse(y: np.ndarray, yhat: np.ndarray) -> float:
    with np.errstate(all="ignore"):
        resid = y - yhat
        mse = float(np.sum(resid * resid)) / y.size
    return math.sqrt(mse) if mse >= 0 else math.nan


def compute_metrics(y, yhat) -> Metrics:
    """RMSE, MSE, MAE and R^2 (against the observed mean)."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.size == 0:
        raise ValueError("y and yhat must be non-empty with equal shape")
    with np.errstate(all="ignore"):
        resid = y - yhat
        sse = float(np.sum(resid * resid))
        n = y.size
        mse = sse / n
        rmse = math.sqrt(mse) if mse >= 0 else math.nan
        mae = float(np.sum(np.abs(resid))) / n
        dev = y - y.mean()
        sst = float(np.sum(dev * dev))
    if sst == 0.0:
        warnings.warn("observed values are constant; R^2 undefined", ZeroVariance, stacklevel=2)
        r2 = math.nan
    else:
        r2 = 1.0 - sse / sst
    return Metrics(r2=r2, rmse=rmse, mae=mae, mse=mse)


def model_complexity(model: MultiGeneModel | Sequence[ExprTree]) -> int:
    genes = model.genes if isinstance(model, MultiGeneModel) else model
    return sum(g.complexity for g in genes)


# --------------------------------------------------------------------------
# variable frequency

@dataclass(frozen=True)
class VariableFrequency:
    name: str
    index: int
    count: int
    percent: float


@dataclass(frozen=True)
class VariableFrequencyReport:
    entries: tuple[VariableFrequency, ...]
    total: int

    def to_text(self) -> str:
        lines = ["variable  count  % of appearance"]
        for e in self.entries:
            lines.append(f"{e.name:<8}  {e.count:>5}  {e.percent:.2f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        rows = ["variable,count,percent"]
        rows += [f"{e.name},{e.count},{e.percent!r}" for e in self.entries]
        return "\n".join(rows) + "\n"


def variable_frequency(models: Sequence[MultiGeneModel],
                       names: Sequence[str] | None = None) -> VariableFrequencyReport:
    """Share of all variable occurrences, across all genes of all models."""
    if not models:
        raise ValueError("need at least one model")
    counts: Counter[int] = Counter()
    for m in models:
        for g in m.genes:
            counts.update(g.variables())
    total = sum(counts.values())
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    entries = tuple(
        VariableFrequency(var_name(i, names), i, c, 100.0 * c / total)
        for i, c in ordered
    )
    return VariableFrequencyReport(entries, total)


# --------------------------------------------------------------------------
# export

def _term(weight: float, gene: ExprTree, digits, names) -> tuple[str, str]:
    body = to_infix(gene, digits, names)
    mag = format_constant(abs(weight), digits)
    sign = "-" if math.copysign(1.0, weight) < 0 else "+"
    return sign, f"{mag}*{body}"


def format_model(model: MultiGeneModel, names: Sequence[str] | None = None,
                 digits: int | None = 3) -> str:
    """Single-line formula: weighted genes in order, bias last.

    ``digits=None`` keeps full precision (parses back exactly).
    """
    parts: list[str] = []
    for w, g in zip(model.weights, model.genes):
        sign, text = _term(w, g, digits, names)
        if not parts:
            parts.append(text if sign == "+" else f"-{text}")
        else:
            parts.append(f"{sign} {text}")
    bias = model.bias
    if not parts:
        return format_constant(bias, digits)
    sign = "-" if math.copysign(1.0, bias) < 0 else "+"
    parts.append(f"{sign} {format_constant(abs(bias), digits)}")
    return " ".join(parts)


def export_model(model: MultiGeneModel, names: Sequence[str] | None = None,
                 digits: int | None = 3) -> str:
    return format_model(model, names, digits)


def model_record(model: MultiGeneModel, model_id) -> str:
    """Line-oriented record: header then one ``w=... expr=...`` per gene."""
    lines = [f"model {model_id} bias={model.bias!r}"]
    for w, g in zip(model.weights, model.genes):
        lines.append(f"w={w!r} expr={g.key}")
    return "\n".join(lines) + "\n"


def export_models_text(models: Sequence[MultiGeneModel], ids=None) -> str:
    ids = range(1, len(models) + 1) if ids is None else ids
    return "".join(model_record(m, i) for m, i in zip(models, ids))


_HEADER_RE = re.compile(r"^model\s+(\S+)\s+bias=(\S+)\s*$")
_GENE_RE = re.compile(r"^w=(\S+)\s+expr=(.+?)\s*$")


def parse_models_text(text: str, fnset: FunctionSet | None = None) -> list[tuple[str, MultiGeneModel]]:
    records: list[tuple[str, float, list]] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if m := _HEADER_RE.match(line):
            records.append((m.group(1), float(m.group(2)), []))
            continue
        if (m := _GENE_RE.match(line)) and records:
            records[-1][2].append((float(m.group(1)), parse_infix(m.group(2), fnset)))
            continue
        raise ValueError(f"line {line_no}: not a model record: {line!r}")
    out = []
    for mid, bias, genes in records:
        out.append((mid, MultiGeneModel(tuple(g for _, g in genes), bias,
                                        tuple(w for w, _ in genes))))
    return out


def model_to_dict(model: MultiGeneModel, model_id=None, names=None) -> dict:
    d = {
        "bias": model.bias,
        "genes": [{"weight": w, "expr": g.key} for w, g in zip(model.weights, model.genes)],
        "complexity": model_complexity(model),
        "formula": format_model(model, names, 3),
        "fitted_on": model.fitted_on,
    }
    if model_id is not None:
        d = {"id": model_id, **d}
    return d


def model_from_dict(d: dict, fnset: FunctionSet | None = None) -> MultiGeneModel:
    genes = tuple(parse_infix(g["expr"], fnset) for g in d["genes"])
    weights = tuple(float(g["weight"]) for g in d["genes"])
    return MultiGeneModel(genes, float(d["bias"]), weights, d.get("fitted_on", ""))


def export_models_json(models: Sequence[MultiGeneModel], ids=None, names=None,
                       extra: Sequence[dict] | None = None) -> str:
    ids = list(range(1, len(models) + 1)) if ids is None else list(ids)
    recs = []
    for k, (m, i) in enumerate(zip(models, ids)):
        rec = model_to_dict(m, i, names)
        if extra is not None:
            rec.update(extra[k])
        recs.append(rec)
    return json.dumps({"models": recs}, indent=2) + "\n"
