"""A small closed language of imputation pipelines, its interpreter, proxy holdouts and scoring.

Programs are JSON arrays of stage objects, for example::

    [{"op": "locf", "limit": null}, {"op": "ewma", "alpha": 0.3}, {"op": "column_mean"}]

Stages run in order on a working copy of the covariates and may only write cells that are
still empty. Whatever is left after the last stage gets the column's observed mean.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import EmptyHoldout, NonFiniteFill, ObservedCellMutation, StaticCheckFailure
from .metrics import _pearson
from .synthgen import PanelDataset, rng_stream

MAX_DEPTH = 2
MAX_STAGES = 12
MAX_K = 25
KNN_MAX_DONORS = 4096
KNN_CHUNK = 512

OPS = ("locf", "nocb", "linear_interp", "patient_mean", "column_mean", "ewma", "knn_rows", "ridge", "blend")
TEST_OPS = ("_test_sleep", "_test_nan", "_test_mutate", "_test_oracle")

# test-only stages are rejected by the static check unless this is switched on
TEST_HOOKS = False
_ORACLES: dict[str, np.ndarray] = {}


def register_oracle(key: str, values: np.ndarray) -> None:
    """Make complete covariate values available to the ``_test_oracle`` stage."""
    _ORACLES[key] = np.asarray(values, dtype=float)


@dataclass(frozen=True)
class ImputerProgram:
    stages: tuple

    @classmethod
    def from_stages(cls, stages: Sequence[dict]) -> "ImputerProgram":
        return cls(tuple(json.loads(json.dumps(list(stages)))))

    @classmethod
    def from_json(cls, text: str) -> "ImputerProgram":
        data = json.loads(text)
        if not isinstance(data, list) or not all(isinstance(s, dict) for s in data):
            raise ValueError("program must be a JSON array of stage objects")
        return cls.from_stages(data)

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps(list(self.stages), indent=indent, sort_keys=True)

    def as_list(self) -> list[dict]:
        return json.loads(self.to_json())

    def __len__(self) -> int:
        return count_stages(self.stages)


def count_stages(stages) -> int:
    total = 0
    for st in stages:
        total += 1
        if st.get("op") == "blend":
            total += count_stages(st.get("a", [])) + count_stages(st.get("b", []))
    return total


def program_depth(stages) -> int:
    depth = 1 if stages else 0
    for st in stages:
        if st.get("op") == "blend":
            depth = max(depth, 1 + max(program_depth(st.get("a", [])), program_depth(st.get("b", [])), 1))
    return depth


def seed_imputer() -> ImputerProgram:
    return ImputerProgram.from_stages(
        [{"op": "locf", "limit": None}, {"op": "nocb", "limit": None}, {"op": "patient_mean"}, {"op": "column_mean"}]
    )


def locf_baseline() -> ImputerProgram:
    return ImputerProgram.from_stages([{"op": "locf", "limit": None}])


# -- static check ----------------------------------------------------------------------


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and np.isfinite(x)


def _check_limit(st) -> str | None:
    limit = st.get("limit")
    if limit is None:
        return None
    if not isinstance(limit, int) or isinstance(limit, bool) or limit < 1:
        return "limit out of range"
    return None


def _check_stage(st, columns: Sequence[str] | None) -> str | None:
    op = st.get("op")
    allowed = OPS + (TEST_OPS if TEST_HOOKS else ())
    if op not in allowed:
        return f"unknown op {op!r}"
    keys = set(st) - {"op"}
    expected = {
        "locf": {"limit"},
        "nocb": {"limit"},
        "linear_interp": set(),
        "patient_mean": set(),
        "column_mean": set(),
        "ewma": {"alpha"},
        "knn_rows": {"k", "columns"},
        "ridge": {"target", "predictors", "lambda"},
        "blend": {"weight", "a", "b"},
        "_test_sleep": {"seconds"},
        "_test_nan": set(),
        "_test_mutate": set(),
        "_test_oracle": {"key"},
    }[op]
    if not keys <= expected:
        return f"unexpected parameter(s) {sorted(keys - expected)} for {op}"

    def known(col) -> bool:
        return columns is None or col in columns

    if op in ("locf", "nocb"):
        return _check_limit(st)
    if op == "ewma":
        a = st.get("alpha")
        if not _is_number(a) or not 0.0 < a <= 1.0:
            return "alpha out of range"
    if op == "knn_rows":
        k = st.get("k")
        if not isinstance(k, int) or isinstance(k, bool) or not 1 <= k <= MAX_K:
            return "k out of range"
        cols = st.get("columns")
        if cols is not None:
            if not isinstance(cols, list) or not cols:
                return "columns must be a non-empty list"
            for c in cols:
                if not known(c):
                    return f"unknown column {c!r}"
    if op == "ridge":
        lam = st.get("lambda")
        if not _is_number(lam) or lam <= 0:
            return "lambda out of range"
        target = st.get("target")
        preds = st.get("predictors")
        if not isinstance(target, str) or not known(target):
            return f"unknown column {target!r}"
        if not isinstance(preds, list) or not preds:
            return "predictors must be a non-empty list"
        for c in preds:
            if not isinstance(c, str) or not known(c):
                return f"unknown column {c!r}"
        if target in preds:
            return "target listed among predictors"
    if op == "blend":
        w = st.get("weight")
        if not _is_number(w) or not 0.0 <= w <= 1.0:
            return "weight out of range"
        for side in ("a", "b"):
            sub = st.get(side)
            if not isinstance(sub, list) or not all(isinstance(s, dict) for s in sub):
                return f"blend branch {side} must be a list of stages"
            for s in sub:
                reason = _check_stage(s, columns)
                if reason:
                    return reason
    if op == "_test_sleep" and not _is_number(st.get("seconds")):
        return "seconds out of range"
    return None


def static_check(program: ImputerProgram | Sequence[dict], columns: Sequence[str] | None = None) -> str | None:
    """``None`` when the program is admissible, otherwise a short failure reason."""
    stages = program.stages if isinstance(program, ImputerProgram) else program
    if not isinstance(stages, (list, tuple)) or not all(isinstance(s, dict) for s in stages):
        return "program must be a list of stage objects"
    if count_stages(stages) > MAX_STAGES:
        return "length cap"
    if program_depth(stages) > MAX_DEPTH:
        return "depth cap"
    for st in stages:
        reason = _check_stage(st, columns)
        if reason:
            return reason
    return None


# -- stage implementations ---------------------------------------------------------------
# every stage maps (values, available) -> (values, available); values is [N, T, d]


def _fill_forward(x, avail, limit):
    n, t, d = x.shape
    out = x.copy()
    got = avail.copy()
    last = np.full((n, d), np.nan)
    age = np.full((n, d), np.inf)
    for s in range(t):
        here = avail[:, s]
        last = np.where(here, x[:, s], last)
        age = np.where(here, 0.0, age + 1.0)
        ok = ~here & np.isfinite(last) & (age <= (np.inf if limit is None else limit))
        out[:, s] = np.where(ok, last, out[:, s])
        got[:, s] |= ok
    return out, got


def _locf(x, avail, st, ctx):
    return _fill_forward(x, avail, st.get("limit"))


def _nocb(x, avail, st, ctx):
    out, got = _fill_forward(x[:, ::-1], avail[:, ::-1], st.get("limit"))
    return out[:, ::-1].copy(), got[:, ::-1].copy()


def _linear_interp(x, avail, st, ctx):
    n, t, d = x.shape
    steps = np.arange(t, dtype=float)
    prev_val, prev_t = _carry(x, avail, steps)
    next_val, next_t = _carry(x[:, ::-1], avail[:, ::-1], steps[::-1])
    next_val, next_t = next_val[:, ::-1], next_t[:, ::-1]
    ok = ~avail & np.isfinite(prev_t) & np.isfinite(next_t)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = (steps[None, :, None] - prev_t) / (next_t - prev_t)
        interp = prev_val + frac * (next_val - prev_val)
    return np.where(ok, interp, x), avail | ok


def _carry(x, avail, steps):
    n, t, d = x.shape
    val = np.full((n, t, d), np.nan)
    when = np.full((n, t, d), np.nan)
    cur_v = np.full((n, d), np.nan)
    cur_t = np.full((n, d), np.nan)
    for s in range(t):
        cur_v = np.where(avail[:, s], x[:, s], cur_v)
        cur_t = np.where(avail[:, s], steps[s], cur_t)
        val[:, s] = cur_v
        when[:, s] = cur_t
    return val, when


def _patient_mean(x, avail, st, ctx):
    count = avail.sum(axis=1, keepdims=True)
    total = np.where(avail, x, 0.0).sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.broadcast_to(total / count, x.shape)
    ok = ~avail & (count > 0)
    return np.where(ok, mean, x), avail | ok


def _column_mean(x, avail, st, ctx):
    count = avail.sum(axis=(0, 1))
    total = np.where(avail, x, 0.0).sum(axis=(0, 1))
    ok = ~avail & (count > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = total / count
    return np.where(ok, mean, x), avail | ok


def _ewma(x, avail, st, ctx):
    alpha = float(st["alpha"])
    n, t, d = x.shape
    out = x.copy()
    got = avail.copy()
    state = np.full((n, d), np.nan)
    for s in range(t):
        here = avail[:, s]
        fill = ~here & np.isfinite(state)
        out[:, s] = np.where(fill, state, out[:, s])
        got[:, s] |= fill
        upd = np.where(np.isfinite(state), alpha * x[:, s] + (1.0 - alpha) * state, x[:, s])
        state = np.where(here, upd, state)
    return out, got


def _knn_rows(x, avail, st, ctx):
    """Fill incomplete (patient, time) rows from the mean of the k nearest complete rows."""
    names = ctx["columns"]
    n, t, d = x.shape
    k = int(st["k"])
    cols = st.get("columns")
    dist_cols = np.arange(d) if cols is None else np.array([names.index(c) for c in cols])
    rows = x.reshape(-1, d)
    ok = avail.reshape(-1, d)
    complete = np.flatnonzero(ok.all(axis=1))
    needy = np.flatnonzero(~ok.all(axis=1) & ok[:, dist_cols].any(axis=1))
    if complete.size == 0 or needy.size == 0:
        return x, avail
    if complete.size > KNN_MAX_DONORS:
        complete = complete[:: int(np.ceil(complete.size / KNN_MAX_DONORS))]
    kk = min(k, complete.size)
    mu = np.array([rows[ok[:, j], j].mean() for j in range(d)])
    sd = np.array([max(rows[ok[:, j], j].std(), 1e-12) for j in range(d)])
    z = (np.where(ok, rows, 0.0) - mu) / sd
    donors = z[complete][:, dist_cols]
    out = rows.copy()
    got = ok.copy()
    for start in range(0, needy.size, KNN_CHUNK):
        idx = needy[start : start + KNN_CHUNK]
        recv = z[idx][:, dist_cols]
        w = ok[idx][:, dist_cols].astype(float)
        diff2 = (recv[:, None, :] - donors[None, :, :]) ** 2
        dist = (diff2 * w[:, None, :]).sum(axis=2) / w.sum(axis=1, keepdims=True)
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :kk]
        fill = rows[complete][nearest].mean(axis=1)
        miss = ~ok[idx]
        out[idx] = np.where(miss, fill, out[idx])
        got[idx] |= miss
    return out.reshape(n, t, d), got.reshape(n, t, d)


def _ridge(x, avail, st, ctx):
    names = ctx["columns"]
    n, t, d = x.shape
    j = names.index(st["target"])
    preds = [names.index(c) for c in st["predictors"]]
    lam = float(st["lambda"])
    rows = x.reshape(-1, d)
    ok = avail.reshape(-1, d)
    have_pred = ok[:, preds].all(axis=1)
    train = have_pred & ok[:, j]
    todo = have_pred & ~ok[:, j]
    if train.sum() < 2 or not todo.any():
        return x, avail
    xp = rows[train][:, preds]
    y = rows[train, j]
    xm, ym = xp.mean(axis=0), y.mean()
    xc = xp - xm
    beta = np.linalg.solve(xc.T @ xc + lam * np.eye(len(preds)), xc.T @ (y - ym))
    out = rows.copy()
    got = ok.copy()
    out[todo, j] = ym + (rows[todo][:, preds] - xm) @ beta
    got[todo, j] = True
    return out.reshape(n, t, d), got.reshape(n, t, d)


def _blend(x, avail, st, ctx):
    xa, ga = _run_stages(st["a"], x, avail, ctx)
    xb, gb = _run_stages(st["b"], x, avail, ctx)
    w = float(st["weight"])
    both = ga & gb & ~avail
    out = np.where(both, w * xa + (1.0 - w) * xb, x)
    out = np.where(ga & ~gb & ~avail, xa, out)
    out = np.where(gb & ~ga & ~avail, xb, out)
    return out, avail | ga | gb


def _test_sleep(x, avail, st, ctx):
    time.sleep(float(st["seconds"]))
    return x, avail


def _test_nan(x, avail, st, ctx):
    return np.where(avail, x, np.nan), np.ones_like(avail)


def _test_mutate(x, avail, st, ctx):
    out = x.copy()
    out[avail] += 1.0
    return out, avail


def _test_oracle(x, avail, st, ctx):
    values = _ORACLES[st["key"]]
    return np.where(avail, x, values), np.ones_like(avail)


_STAGES = {
    "locf": _locf,
    "nocb": _nocb,
    "linear_interp": _linear_interp,
    "patient_mean": _patient_mean,
    "column_mean": _column_mean,
    "ewma": _ewma,
    "knn_rows": _knn_rows,
    "ridge": _ridge,
    "blend": _blend,
    "_test_sleep": _test_sleep,
    "_test_nan": _test_nan,
    "_test_mutate": _test_mutate,
    "_test_oracle": _test_oracle,
}


def _run_stages(stages, x, avail, ctx):
    for st in stages:
        x, avail = _STAGES[st["op"]](x, avail, st, ctx)
    return x, avail


def impute_array(program: ImputerProgram, covariates: np.ndarray, columns: Sequence[str]) -> np.ndarray:
    """Fill every NaN cell of ``covariates``; observed cells come back bit-identical."""
    reason = static_check(program, columns)
    if reason:
        raise StaticCheckFailure(reason)
    original = np.asarray(covariates, dtype=float)
    observed = ~np.isnan(original)
    ctx = {"columns": list(columns)}
    x, avail = original.copy(), observed.copy()
    for st in program.stages:
        x, avail = _STAGES[st["op"]](x, avail, st, ctx)
        if not np.array_equal(x[observed], original[observed]):
            raise ObservedCellMutation(f"stage {st['op']!r} modified observed cells")
    # terminal backstop: observed column mean, zero for columns with nothing observed
    count = observed.sum(axis=(0, 1))
    col_mean = np.where(count > 0, np.where(observed, original, 0.0).sum(axis=(0, 1)) / np.maximum(count, 1), 0.0)
    x = np.where(avail, x, col_mean)
    if not np.all(np.isfinite(x)):
        raise NonFiniteFill("imputed values contain NaN or Inf")
    x[observed] = original[observed]
    return x


def interpret(program: ImputerProgram, dataset: PanelDataset) -> PanelDataset:
    filled = impute_array(program, dataset.covariates, dataset.covariate_names)
    return replace(dataset, covariates=filled, mask=np.zeros_like(dataset.mask), extra={**dataset.extra, "imputed_mask": dataset.mask})


# -- proxy holdouts ---------------------------------------------------------------------


@dataclass
class ProxyHoldout:
    cells: np.ndarray  # bool [N, T, d], held-out observed cells
    original: np.ndarray  # covariates before blanking (NaN where truly missing)
    mode: str
    rho: float
    seed: int

    @property
    def size(self) -> int:
        return int(self.cells.sum())


def sample_holdout_cellwise(dataset: PanelDataset, rho: float, seed: int) -> ProxyHoldout:
    x = dataset.covariates
    observed = ~np.isnan(x)
    u = rng_stream(seed, "holdout/cellwise").random(x.shape)
    return ProxyHoldout(observed & (u < rho), x.copy(), "cellwise", rho, seed)


def value_runs(x: np.ndarray) -> np.ndarray:
    """Run id per cell for maximal stretches of equal consecutive observed values (-1 if missing)."""
    n, t, d = x.shape
    observed = ~np.isnan(x)
    ids = np.full(x.shape, -1, dtype=np.int64)
    counter = np.zeros((n, d), dtype=np.int64)
    for s in range(t):
        cont = observed[:, s] & (observed[:, s - 1] & (x[:, s] == x[:, s - 1]) if s else False)
        start = observed[:, s] & ~cont
        counter = counter + start
        ids[:, s] = np.where(observed[:, s], counter, -1)
    return ids


def sample_holdout_runs(dataset: PanelDataset, rho: float, seed: int) -> ProxyHoldout:
    x = dataset.covariates
    ids = value_runs(x)
    u = rng_stream(seed, "holdout/runs").random(x.shape)
    n, t, d = x.shape
    picked = np.zeros(x.shape, dtype=bool)
    for s in range(t):
        start = (ids[:, s] >= 0) & ((ids[:, s] != ids[:, s - 1]) if s else True)
        prev = picked[:, s - 1] if s else np.zeros((n, d), dtype=bool)
        picked[:, s] = np.where(start, u[:, s] < rho, (ids[:, s] >= 0) & prev)
    return ProxyHoldout(picked, x.copy(), "runs", rho, seed)


def sample_holdout(dataset: PanelDataset, rho: float, seed: int, mode: str = "cellwise") -> ProxyHoldout:
    if mode == "cellwise":
        return sample_holdout_cellwise(dataset, rho, seed)
    if mode == "runs":
        return sample_holdout_runs(dataset, rho, seed)
    raise ValueError(f"unknown holdout mode {mode!r}")


def blank(dataset: PanelDataset, holdout: ProxyHoldout) -> PanelDataset:
    cov = np.where(holdout.cells, np.nan, dataset.covariates)
    mask = (dataset.mask.astype(bool) | holdout.cells).astype(np.uint8)
    return replace(dataset, covariates=cov, mask=mask)


# -- composite score ---------------------------------------------------------------------


@dataclass
class ScoreBundle:
    s: float
    rmse: float
    mae: float
    delta_y: float
    delta_t: float

    def to_dict(self) -> dict:
        return {"s": self.s, "rmse": self.rmse, "mae": self.mae, "delta_y": self.delta_y, "delta_t": self.delta_t}


def _column_correlations(x: np.ndarray, cells: np.ndarray, target: np.ndarray) -> np.ndarray:
    out = np.zeros(x.shape[2])
    for j in range(x.shape[2]):
        sel = cells[:, :, j]
        if sel.sum() >= 3:
            out[j] = _pearson(x[:, :, j][sel], target[sel])
    return out


def score_completion(completed: np.ndarray, dataset: PanelDataset, holdout: ProxyHoldout, lambda_y: float = 2.0, lambda_t: float = 0.5, standardized: bool = False) -> ScoreBundle:
    """Composite score of an already completed covariate array against a proxy holdout."""
    if holdout.size == 0:
        raise EmptyHoldout("proxy holdout contains no cells")
    cells = holdout.cells
    orig = holdout.original
    err = completed[cells] - orig[cells]
    if standardized:
        sd = np.nanstd(orig, axis=(0, 1))
        err = err / np.broadcast_to(np.maximum(sd, 1e-12), orig.shape)[cells]
    rmse = float(np.sqrt(np.mean(err**2)))
    mae = float(np.mean(np.abs(err)))
    observed = ~np.isnan(orig)
    dy = np.abs(_column_correlations(completed, observed, dataset.outcome) - _column_correlations(orig, observed, dataset.outcome))
    dt = np.abs(_column_correlations(completed, observed, dataset.treatment) - _column_correlations(orig, observed, dataset.treatment))
    delta_y, delta_t = float(dy.mean()), float(dt.mean())
    return ScoreBundle(rmse + lambda_y * delta_y + lambda_t * delta_t, rmse, mae, delta_y, delta_t)


def proxy_score(program: ImputerProgram, dataset_minus: PanelDataset, holdout: ProxyHoldout, lambda_y: float = 2.0, lambda_t: float = 0.5, standardized: bool = False) -> ScoreBundle:
    completed = impute_array(program, dataset_minus.covariates, dataset_minus.covariate_names)
    return score_completion(completed, dataset_minus, holdout, lambda_y, lambda_t, standardized)
