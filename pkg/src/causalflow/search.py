"""Single-parent evolutionary search over imputer programs with strict-improvement acceptance.

Candidates come from a pluggable proposer (a seeded mutation operator or a chat-completion
endpoint) and are scored in a forked worker under a wall-clock budget.
"""

from __future__ import annotations

import json
import multiprocessing as mp
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import NonFiniteFill, ObservedCellMutation, ProposerUnavailable, StaticCheckFailure
from .imputers import (
    MAX_DEPTH,
    MAX_K,
    MAX_STAGES,
    ImputerProgram,
    ProxyHoldout,
    ScoreBundle,
    blank,
    count_stages,
    impute_array,
    sample_holdout,
    score_completion,
    seed_imputer,
    static_check,
)
from .synthgen import PanelDataset

FENCED_JSON = re.compile(r"```json\s*\n(.*?)```", re.DOTALL)


@dataclass(frozen=True)
class SearchConfig:
    budget: int = 20
    window: int = 3
    rho: float = 0.10
    lambda_y: float = 2.0
    lambda_t: float = 0.5
    time_budget: float = 180.0
    memory_mb: int = 6144
    holdout_seed: int = 0
    holdout_mode: str = "cellwise"
    standardized_rmse: bool = False


@dataclass
class HistoryEntry:
    k: int
    program: str
    outcome: str  # accepted, rejected or failed
    reason: str | None = None
    score: ScoreBundle | None = None

    def record(self) -> dict:
        out = {"k": self.k, "outcome": self.outcome, "reason": self.reason, "program": json.loads(self.program) if self.program else None}
        out.update(self.score.to_dict() if self.score else {"s": None, "rmse": None, "mae": None, "delta_y": None, "delta_t": None})
        return out


@dataclass
class SearchState:
    best: ImputerProgram
    best_score: ScoreBundle
    k: int = 0
    history: list[HistoryEntry] = field(default_factory=list)
    trajectory: list[float] = field(default_factory=list)  # best score after each iteration


class Proposer(Protocol):
    def propose(self, prompt: str, state: SearchState) -> str: ...


# -- prompt ---------------------------------------------------------------------------

DSL_SUMMARY = (
    "Stages: locf(limit), nocb(limit), linear_interp, patient_mean, column_mean, ewma(alpha in (0,1]), "
    f"knn_rows(k <= {MAX_K}, columns), ridge(target, predictors, lambda > 0), blend(weight in [0,1], a, b). "
    f"At most {MAX_STAGES} stages in total and nesting depth {MAX_DEPTH}. "
    "Stages only fill empty cells; observed cells are never changed."
)


def build_prompt(state: SearchState, config: SearchConfig, columns=None) -> str:
    sc = state.best_score
    lines = ["## Current best program", "```json", state.best.to_json(indent=2), "```", ""]
    lines += [
        "## Objective",
        f"Lower is better: s = RMSE + {config.lambda_y:g} * dY + {config.lambda_t:g} * dT, where RMSE is measured on "
        "held-out observed cells and dY, dT are mean absolute shifts in per-column correlation with outcome and treatment.",
        f"Current best: s={sc.s:.6g} RMSE={sc.rmse:.6g} MAE={sc.mae:.6g} dY={sc.delta_y:.6g} dT={sc.delta_t:.6g}",
        DSL_SUMMARY,
    ]
    if columns:
        lines.append("Columns: " + ", ".join(columns))
    lines += ["Reply with one complete program as a JSON array inside a ```json fenced block.", "", "## Recent attempts"]
    recent = state.history[-config.window :] if config.window > 0 else []
    for e in recent:
        if e.outcome == "failed":
            lines.append(f"- k={e.k}: failed ({e.reason}) {e.program}")
        else:
            lines.append(f"- k={e.k}: {e.outcome} s={e.score.s:.6g} {e.program}")
    return "\n".join(lines) + "\n"


def parse_candidate(reply: str) -> ImputerProgram | None:
    match = FENCED_JSON.search(reply or "")
    if not match:
        return None
    try:
        return ImputerProgram.from_json(match.group(1))
    except (ValueError, TypeError):
        return None


def fence(program: ImputerProgram) -> str:
    return "```json\n" + program.to_json() + "\n```\n"


# -- proposers ------------------------------------------------------------------------

_NUMERIC = {"limit": (1, 10, int), "alpha": (0.01, 1.0, float), "k": (1, MAX_K, int), "lambda": (1e-4, 1e4, float), "weight": (0.0, 1.0, float)}


class MutationProposer:
    """Seeded random edits of the current best program that always pass the static check."""

    def __init__(self, seed: int = 0, columns=None):
        self.rng = np.random.default_rng([seed, 7])
        self.columns = list(columns) if columns else []

    def _random_stage(self) -> dict:
        ops = ["locf", "nocb", "linear_interp", "patient_mean", "column_mean", "ewma", "knn_rows"]
        if len(self.columns) >= 2:
            ops.append("ridge")
        op = ops[self.rng.integers(len(ops))]
        if op in ("locf", "nocb"):
            return {"op": op, "limit": None if self.rng.random() < 0.5 else int(self.rng.integers(1, 4))}
        if op == "ewma":
            return {"op": op, "alpha": float(np.round(self.rng.uniform(0.1, 1.0), 3))}
        if op == "knn_rows":
            return {"op": op, "k": int(self.rng.integers(1, 11)), "columns": None}
        if op == "ridge":
            j = int(self.rng.integers(len(self.columns)))
            preds = [c for i, c in enumerate(self.columns) if i != j]
            return {"op": op, "target": self.columns[j], "predictors": preds, "lambda": 1.0}
        return {"op": op}

    def _perturb(self, stages: list[dict]) -> bool:
        slots = [(i, key) for i, st in enumerate(stages) for key in _NUMERIC if st.get(key) is not None]
        if not slots:
            return False
        i, key = slots[self.rng.integers(len(slots))]
        lo, hi, kind = _NUMERIC[key]
        value = stages[i][key] * self.rng.uniform(0.5, 2.0)
        value = min(max(value, lo), hi)
        stages[i][key] = int(round(value)) if kind is int else float(np.round(value, 6))
        return True

    def mutate(self, program: ImputerProgram) -> ImputerProgram:
        for _ in range(50):
            stages = program.as_list()
            edit = ("perturb", "insert", "delete", "swap")[self.rng.integers(4)]
            if edit == "perturb":
                changed = self._perturb(stages)
            elif edit == "insert":
                changed = count_stages(stages) < MAX_STAGES
                if changed:
                    stages.insert(int(self.rng.integers(len(stages) + 1)), self._random_stage())
            elif edit == "delete":
                changed = len(stages) > 1
                if changed:
                    del stages[int(self.rng.integers(len(stages)))]
            else:
                changed = len(stages) > 1
                if changed:
                    i, j = self.rng.choice(len(stages), size=2, replace=False)
                    stages[i], stages[j] = stages[j], stages[i]
            candidate = ImputerProgram.from_stages(stages)
            if changed and static_check(candidate, self.columns or None) is None:
                return candidate
        return program

    def propose(self, prompt: str, state: SearchState) -> str:
        return fence(self.mutate(state.best))


class FixedProposer:
    """Replays a list of replies in order, then repeats the last one."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = 0

    def propose(self, prompt: str, state: SearchState) -> str:
        reply = self.replies[min(self.calls, len(self.replies) - 1)]
        self.calls += 1
        return reply(state) if callable(reply) else reply


SYSTEM_PROMPT = (
    "You improve data imputation programs written in a small JSON pipeline language. "
    "Answer with exactly one program in a ```json fenced block."
)


class LlmProposer:
    """Chat-completion client for any OpenAI-compatible endpoint."""

    def __init__(self, endpoint: str, model_name: str, api_key: str | None = None, retries: int = 3, backoff: float = 1.0, timeout: float = 120.0, client=None):
        self.endpoint = endpoint.rstrip("/")
        self.model_name = model_name
        self.api_key = api_key if api_key is not None else os.environ.get("CAUSALFLOW_LLM_KEY", "")
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self._client = client

    def _post(self, body: dict):
        import httpx

        client = self._client or httpx.Client(timeout=self.timeout)
        try:
            return client.post(f"{self.endpoint}/v1/chat/completions", json=body, headers={"Authorization": f"Bearer {self.api_key}"})
        finally:
            if self._client is None:
                client.close()

    def propose(self, prompt: str, state: SearchState) -> str:
        import httpx

        body = {"model": self.model_name, "messages": [{"role": "system", "content": SYSTEM_PROMPT}, {"role": "user", "content": prompt}]}
        last_error = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._post(body)
            except httpx.HTTPError as exc:
                last_error = str(exc)
                continue
            if resp.status_code in (401, 403):
                raise ProposerUnavailable(f"endpoint rejected credentials (HTTP {resp.status_code})")
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise ProposerUnavailable(f"endpoint returned HTTP {resp.status_code}")
            try:
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError):
                return ""
        raise ProposerUnavailable(f"endpoint unreachable after {self.retries} retries: {last_error}")


# -- guarded evaluation -------------------------------------------------------------------


@dataclass
class Evaluation:
    score: ScoreBundle | None
    reason: str | None = None
    peak_rss_kb: int | None = None

    @property
    def ok(self) -> bool:
        return self.score is not None


def _vm_size_bytes() -> int | None:
    try:
        for line in Path("/proc/self/status").read_text().splitlines():
            if line.startswith("VmSize:"):
                return int(line.split()[1]) * 1024
    except OSError:
        return None
    return None


def _worker(conn, program_json, covariates, columns, memory_mb):
    try:
        import resource

        current = _vm_size_bytes()
        if current is not None and memory_mb:
            limit = current + int(memory_mb) * 1024 * 1024
            resource.setrlimit(resource.RLIMIT_AS, (limit, limit))
    except (ImportError, ValueError, OSError):
        pass
    try:
        program = ImputerProgram.from_json(program_json)
        filled = impute_array(program, covariates, columns)
        peak = None
        try:
            import resource

            peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
        except ImportError:
            pass
        conn.send(("ok", filled, peak))
    except ObservedCellMutation:
        conn.send(("error", "observed-cell mutation", None))
    except NonFiniteFill:
        conn.send(("error", "non-finite", None))
    except StaticCheckFailure as exc:
        conn.send(("error", str(exc), None))
    except MemoryError:
        conn.send(("error", "memory", None))
    except Exception as exc:  # any crash inside a candidate is a logged failure
        conn.send(("error", f"crash: {type(exc).__name__}: {exc}", None))
    finally:
        conn.close()


def guarded_evaluate(program: ImputerProgram, dataset_minus: PanelDataset, holdout: ProxyHoldout, config: SearchConfig) -> Evaluation:
    """Impute in a forked worker under the time budget, then verify and score in this process."""
    ctx = mp.get_context("fork")
    recv, send = ctx.Pipe(duplex=False)
    proc = ctx.Process(
        target=_worker,
        args=(send, program.to_json(), dataset_minus.covariates, list(dataset_minus.covariate_names), config.memory_mb),
        daemon=True,
    )
    proc.start()
    send.close()
    try:
        if not recv.poll(config.time_budget):
            proc.kill()
            proc.join()
            return Evaluation(None, "timeout")
        try:
            status, payload, peak = recv.recv()
        except EOFError:
            proc.join()
            return Evaluation(None, f"crash: worker exited with code {proc.exitcode}")
    finally:
        recv.close()
    proc.join(timeout=5)
    if proc.is_alive():
        proc.kill()
        proc.join()
    if status != "ok":
        return Evaluation(None, payload)
    filled = payload
    original = dataset_minus.covariates
    observed = ~np.isnan(original)
    if filled.shape != original.shape or not np.array_equal(filled[observed], original[observed]):
        return Evaluation(None, "observed-cell mutation")
    if not np.all(np.isfinite(filled)):
        return Evaluation(None, "non-finite")
    score = score_completion(filled, dataset_minus, holdout, config.lambda_y, config.lambda_t, config.standardized_rmse)
    if not np.isfinite(score.s):
        return Evaluation(None, "non-finite")
    return Evaluation(score, None, peak)


# -- search loop --------------------------------------------------------------------------


@dataclass
class SearchResult:
    best: ImputerProgram
    state: SearchState
    log: list[dict]
    holdout: ProxyHoldout
    aborted: str | None = None


def run_search(dataset: PanelDataset, config: SearchConfig, proposer: Proposer, log_path: str | Path | None = None, initial: ImputerProgram | None = None) -> SearchResult:
    """Run exactly ``config.budget`` proposal rounds unless the proposer becomes unavailable."""
    holdout = sample_holdout(dataset, config.rho, config.holdout_seed, config.holdout_mode)
    minus = blank(dataset, holdout)
    columns = list(dataset.covariate_names)
    start = initial or seed_imputer()
    first = guarded_evaluate(start, minus, holdout, config)
    if not first.ok:
        raise StaticCheckFailure(f"initial program failed: {first.reason}")
    state = SearchState(best=start, best_score=first.score)
    log: list[dict] = []
    sink = open(log_path, "w") if log_path else None
    aborted = None
    try:
        for k in range(1, config.budget + 1):
            t0 = time.perf_counter()
            prompt = build_prompt(state, config, columns)
            try:
                reply = proposer.propose(prompt, state)
            except ProposerUnavailable as exc:
                aborted = str(exc)
                break
            candidate = parse_candidate(reply)
            if candidate is None:
                entry = HistoryEntry(k, "", "failed", "malformed output")
            else:
                reason = static_check(candidate, columns)
                if reason:
                    entry = HistoryEntry(k, candidate.to_json(), "failed", reason)
                else:
                    ev = guarded_evaluate(candidate, minus, holdout, config)
                    if not ev.ok:
                        entry = HistoryEntry(k, candidate.to_json(), "failed", ev.reason)
                    elif ev.score.s < state.best_score.s:
                        entry = HistoryEntry(k, candidate.to_json(), "accepted", None, ev.score)
                        state.best, state.best_score = candidate, ev.score
                    else:
                        entry = HistoryEntry(k, candidate.to_json(), "rejected", None, ev.score)
            state.k = k
            state.history.append(entry)
            state.trajectory.append(state.best_score.s)
            rec = entry.record()
            rec["best_s"] = state.best_score.s
            rec["wall_time"] = time.perf_counter() - t0
            log.append(rec)
            if sink:
                sink.write(json.dumps(rec, sort_keys=True) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    return SearchResult(state.best, state, log, holdout, aborted)
