"""Command-line driver: generate, mask, train, evaluate, impute-search, pipeline and report."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config, write_provenance
from .counterfactual import ate_from_result, counterfactuals, write_results_csv, write_summary_json
from .errors import CausalFlowError, DivergedLoss, InvalidConfig, NoMaskedCells
from .imputers import ImputerProgram, interpret, locf_baseline, seed_imputer
from .io import content_hash, load_dataset, save_dataset
from .metrics import (
    EstimatorRun,
    ImputationReport,
    ReliabilityReport,
    downstream_causal_metrics,
    hazard_ratio,
    imputation_biomarker_metrics,
    rank_table,
    reliability_criteria,
    reliability_report,
)
from .mnar import apply_mnar
from .search import LlmProposer, MutationProposer, run_search
from .synthgen import GeneratorConfig, generate
from .training import load_checkpoint, save_checkpoint, split_indices, train


def _dump(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _write_rows(path: Path, rows: list[dict]) -> None:
    keys = sorted({k for r in rows for k in r})
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(r.get(k)) for k in keys})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, dict)):
        return json.dumps(v, sort_keys=True)
    return "" if v is None else v


# -- commands -------------------------------------------------------------------------


def cmd_generate(benchmark: str, seed: int, out: str | Path, n_patients=None, n_steps=None, with_csv: bool = False) -> Path:
    cfg = GeneratorConfig(seed=seed, n_patients=n_patients, n_steps=n_steps)
    ds, graph = generate(benchmark, cfg)
    out = save_dataset(ds, graph, out, with_csv=with_csv)
    write_provenance(out, "generate", {"benchmark": benchmark, **asdict(cfg)}, {})
    return out


def cmd_mask(data: str | Path, rate: float, seed: int, out: str | Path, config: ExperimentConfig | None = None) -> Path:
    ds, graph = load_dataset(data)
    mcfg = replace((config or ExperimentConfig()).mnar, target_rate=rate, seed=seed)
    masked = apply_mnar(ds, mcfg)
    out = save_dataset(masked, graph, out)
    write_provenance(out, "mask", asdict(mcfg), {str(data): content_hash(data)})
    return out


def cmd_train(data: str | Path, out: str | Path, config: ExperimentConfig, seed: int) -> Path:
    ds, graph = load_dataset(data)
    if ds.is_masked:
        raise InvalidConfig("dataset has missing covariates; impute it (impute-search or pipeline) before training")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = config.train_config(seed)
    try:
        result = train(ds, graph, tcfg)
    except DivergedLoss as exc:
        if exc.model is not None:
            save_checkpoint(exc.model, out / "model.ckpt")
        raise
    save_checkpoint(result.model, out / "model.ckpt")
    _dump(out / "history.json", result.history)
    write_provenance(out, "train", tcfg.to_dict(), {str(data): content_hash(data)})
    return out / "model.ckpt"


def _model_label(variant: str) -> str:
    return "causalflow" if variant == "dag" else "causalflow-nodag"


def cmd_evaluate(checkpoint: str | Path, data: str | Path, out: str | Path, replicates: int = 500) -> Path:
    ds, graph = load_dataset(data)
    model = load_checkpoint(checkpoint, expected_graph=graph)
    parts = split_indices(ds.n_patients, model.config)
    test = ds.subset(parts.test)
    res = counterfactuals(model, test, seed=model.config.seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    hr_kind = test.outcome_kind if test.binary_outcome else None
    rep = reliability_report(
        _model_label(model.config.variant), ds.benchmark, model.config.seed,
        res.y0_hat, res.y1_hat, test.po_control, test.po_treated, res.valid, hr_kind=hr_kind,
    )
    ate = ate_from_result(res, replicates=replicates, seed=model.config.seed)
    hr = None if hr_kind is None else hazard_ratio(res.y1_hat, res.y0_hat, res.valid)
    _dump(out / "reliability.json", rep.to_dict())
    _write_rows(out / "reliability.csv", [rep.to_dict()])
    write_results_csv(res, out / "counterfactuals.csv")
    write_summary_json(out / "summary.json", ate, hr)
    _dump(out / "trajectories.json", {_model_label(model.config.variant): _trajectories(res, test)})
    write_provenance(out, "evaluate", model.config.to_dict(), {str(checkpoint): content_hash(checkpoint), str(data): content_hash(data)})
    return out


def _trajectories(res, test) -> dict:
    p0, p1 = res.arm_trajectories()
    w = res.valid
    count = np.maximum(w.sum(axis=0), 1)
    t0 = np.where(w, test.po_control, 0).sum(axis=0) / count
    t1 = np.where(w, test.po_treated, 0).sum(axis=0) / count
    return {"pred_y0": p0.tolist(), "pred_y1": p1.tolist(), "true_y0": t0.tolist(), "true_y1": t1.tolist()}


def _proposer(config: ExperimentConfig, seed: int, columns):
    if config.proposer == "llm":
        if not config.endpoint or not config.model_name:
            raise InvalidConfig("the llm proposer needs endpoint and model_name")
        return LlmProposer(config.endpoint, config.model_name)
    return MutationProposer(seed, columns)


def cmd_impute_search(data: str | Path, out: str | Path, config: ExperimentConfig, seed: int) -> Path:
    ds, graph = load_dataset(data)
    if not ds.is_masked:
        raise NoMaskedCells("dataset has no missing covariates to impute")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    scfg = replace(config.search, holdout_seed=seed)
    visible = replace(ds, truth=None, po_control=None, po_treated=None)
    result = run_search(visible, scfg, _proposer(config, seed, ds.covariate_names), log_path=out / "search_log.jsonl")
    (out / "best_program.json").write_text(result.best.to_json(indent=2) + "\n")
    imputed = interpret(result.best, ds)
    save_dataset(imputed, graph, out / "imputed")
    _dump(out / "search_summary.json", {"best_score": result.state.best_score.to_dict(), "trajectory": result.state.trajectory, "aborted": result.aborted})
    write_provenance(out, "impute-search", asdict(scfg), {str(data): content_hash(data)})
    return out


def run_pipeline(data: str | Path, out: str | Path, config: ExperimentConfig, seed: int) -> Path:
    """Impute with every roster entry, train the same estimator on each result and score both layers."""
    ds, graph = load_dataset(data)
    if not ds.is_masked or ds.truth is None:
        raise NoMaskedCells("pipeline needs a masked dataset with its eval-only truth")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rate = float(ds.extra.get("mnar", {}).get("target_rate", config.rate))
    visible = replace(ds, truth=None, po_control=None, po_treated=None)
    tcfg = config.train_config(seed)
    programs: dict[str, ImputerProgram | None] = {}
    for name in config.imputers:
        if name == "locf":
            programs[name] = locf_baseline()
        elif name == "seed":
            programs[name] = seed_imputer()
        elif name == "evolved":
            scfg = replace(config.search, holdout_seed=seed)
            search = run_search(visible, scfg, _proposer(config, seed, ds.covariate_names), log_path=out / "search_log.jsonl")
            programs[name] = search.best
            (out / "best_program.json").write_text(search.best.to_json(indent=2) + "\n")
        else:
            programs[name] = None  # perfect imputation from the eval-only truth

    runs, bio, histories, trajectories = {}, {}, {}, {}
    for name, program in programs.items():
        if program is None:
            imputed = replace(ds, covariates=ds.truth.copy(), mask=np.zeros_like(ds.mask))
        else:
            imputed = interpret(program, visible)
            imputed = replace(imputed, po_control=ds.po_control, po_treated=ds.po_treated, truth=ds.truth)
        bio[name] = imputation_biomarker_metrics(imputed.covariates, ds.truth, ds.mask, ds.outcome, ds.alive > 0)
        result = train(imputed, graph, tcfg)
        test = imputed.subset(result.split.test)
        res = counterfactuals(result.model, test, seed=seed)
        runs[name] = EstimatorRun(tcfg.hash(), res.y0_hat, res.y1_hat, test.po_control, test.po_treated, res.valid)
        histories[name] = result.history
        trajectories[name] = _trajectories(res, test)
    causal = downstream_causal_metrics(runs)
    rows = []
    for name in programs:
        row = ImputationReport(name, rate, bio[name], causal[name], {"seed": seed, "benchmark": ds.benchmark}).flat()
        rows.append(row)
    _dump(out / "report.json", {"rows": rows, "config_hash": config.hash(), "train_config_hash": tcfg.hash()})
    _write_rows(out / "report.csv", rows)
    _dump(out / "histories.json", histories)
    _dump(out / "trajectories.json", trajectories)
    write_provenance(out, "pipeline", config.to_dict(), {str(data): content_hash(data)})
    return out / "report.json"


def _pipeline_job(args):
    data, out, config, seed = args
    return str(run_pipeline(data, out, config, seed))


def cmd_pipeline(data: str | Path, out: str | Path, config: ExperimentConfig, seeds=None, jobs: int = 1) -> list[Path]:
    seeds = list(config.seeds if seeds is None else seeds)
    out = Path(out)
    tasks = [(str(data), str(out / f"seed_{s}"), config, int(s)) for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        import multiprocessing as mp

        with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("fork")) as pool:
            paths = list(pool.map(_pipeline_job, tasks))
    else:
        paths = [_pipeline_job(t) for t in tasks]
    return [Path(p) for p in paths]


RANKED = {"mae": "min", "rmse": "min", "delta_ac": "min", "cse": "min", "inf_y": "abs", "q1_mae": "min", "q4_mae": "min", "mean_err_a": "min", "vr_q4": "dev1", "abs_delta_ate": "min"}


def cmd_report(results: list[str | Path], out: str | Path) -> Path:
    """Rank table, reliability criteria and SVG figures from result directories."""
    from .plotting import plot_arm_trajectories, plot_loss_curves, plot_search_progress

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    found = sorted({p for r in results for p in Path(r).rglob("*.json")})
    rows, reliab, histories, trajectories, logs = [], [], {}, {}, {}
    for path in found:
        if path.is_relative_to(out):
            continue
        tag = path.parent.as_posix()
        if path.name == "report.json":
            rows.extend(json.loads(path.read_text())["rows"])
        elif path.name == "reliability.json":
            d = json.loads(path.read_text())
            reliab.append(ReliabilityReport(**{k: d[k] for k in ReliabilityReport.__dataclass_fields__}))
        elif path.name == "histories.json":
            for name, hist in json.loads(path.read_text()).items():
                histories[f"{tag}:{name}"] = hist
        elif path.name == "history.json":
            histories[tag] = json.loads(path.read_text())
        elif path.name == "trajectories.json":
            for name, tr in json.loads(path.read_text()).items():
                trajectories[f"{tag}:{name}"] = tr
    for path in sorted({p for r in results for p in Path(r).rglob("search_log.jsonl")}):
        logs[path.parent.as_posix()] = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]

    lines = [f"causalflow {__version__} report", ""]
    if rows:
        grouped: dict = {}
        for r in rows:
            grouped.setdefault((r["imputer"], r["rate"]), []).append(r)
        averaged = []
        for (imp, rate), members in sorted(grouped.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            avg = {"imputer": imp, "rate": rate, "n_seeds": len(members)}
            for key in RANKED:
                vals = [m[key] for m in members if m.get(key) is not None]
                if vals:
                    avg[key] = float(np.mean(vals))
            averaged.append(avg)
        ranked = rank_table(averaged, RANKED)
        merged = []
        for rr in ranked:
            base = next(a for a in averaged if a["imputer"] == rr["imputer"] and a["rate"] == rr["rate"])
            merged.append({**base, **rr})
        _write_rows(out / "rank_table.csv", merged)
        lines.append("rate,imputer,mean_rank")
        lines += [f"{m['rate']},{m['imputer']},{m['mean_rank']:.3f}" for m in merged]
        lines.append("")
    if reliab:
        crit = reliability_criteria(reliab)
        _dump(out / "criteria.json", crit)
        _write_rows(out / "reliability.csv", [r.to_dict() for r in reliab])
        lines.append("model,Bias,Tail,HR,Arm,Stable")
        for model in sorted(crit):
            c = crit[model]
            lines.append(",".join([model] + ["n/a" if c[k] is None else str(c[k]) for k in ("Bias", "Tail", "HR", "Arm", "Stable")]))
        lines.append("")
    if histories:
        plot_loss_curves(histories, out / "loss_curves.svg")
    if logs:
        plot_search_progress(logs, out / "search_progress.svg")
    if trajectories:
        plot_arm_trajectories(trajectories, out / "arm_trajectories.svg")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return out


# -- argument parsing -------------------------------------------------------------------


def _seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="causalflow", description=__doc__)
    p.add_argument("--version", action="version", version=f"causalflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a benchmark dataset")
    g.add_argument("--benchmark", required=True, choices=["simple3", "ldl", "cox", "cvd"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-patients", type=int)
    g.add_argument("--n-steps", type=int)
    g.add_argument("--csv", action="store_true", help="also write a long-format panel.csv")
    g.add_argument("--out", required=True)

    m = sub.add_parser("mask", help="inject value-dependent missingness")
    m.add_argument("--data", required=True)
    m.add_argument("--rate", type=float, required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--config")
    m.add_argument("--out", required=True)

    t = sub.add_parser("train", help="fit the estimator on a complete dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--model", choices=["dag", "no-dag"])
    t.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="counterfactual predictions and reliability metrics on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--replicates", type=int, default=500)
    e.add_argument("--out", required=True)

    s = sub.add_parser("impute-search", help="evolve an imputation program on a masked dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--proposer", choices=["mutation", "llm"])
    s.add_argument("--endpoint")
    s.add_argument("--model-name")
    s.add_argument("--budget", type=int)
    s.add_argument("--out", required=True)

    pl = sub.add_parser("pipeline", help="search, impute, train and evaluate for every imputer in the roster")
    pl.add_argument("--data", required=True)
    pl.add_argument("--config")
    pl.add_argument("--seeds", type=_seeds)
    pl.add_argument("--model", choices=["dag", "no-dag"])
    pl.add_argument("--proposer", choices=["mutation", "llm"])
    pl.add_argument("--endpoint")
    pl.add_argument("--model-name")
    pl.add_argument("--oracle", action="store_true", help="add the perfect-imputation reference to the roster")
    pl.add_argument("--jobs", type=int, default=1)
    pl.add_argument("--out", required=True)

    r = sub.add_parser("report", help="rank tables, criteria and figures from result directories")
    r.add_argument("results", nargs="+")
    r.add_argument("--out", required=True)
    return p


def _apply_flags(config: ExperimentConfig, args) -> ExperimentConfig:
    changes = {}
    for flag, key in (("model", "model"), ("proposer", "proposer"), ("endpoint", "endpoint"), ("model_name", "model_name")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[key] = value
    if getattr(args, "oracle", False) and "oracle" not in config.imputers:
        changes["imputers"] = tuple(config.imputers) + ("oracle",)
    if getattr(args, "budget", None) is not None:
        changes["search"] = replace(config.search, budget=args.budget)
    return replace(config, **changes) if changes else config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _apply_flags(load_config(getattr(args, "config", None)), args)
        if args.command == "generate":
            path = cmd_generate(args.benchmark, args.seed, args.out, args.n_patients, args.n_steps, args.csv)
        elif args.command == "mask":
            path = cmd_mask(args.data, args.rate, args.seed, args.out, config)
        elif args.command == "train":
            path = cmd_train(args.data, args.out, config, args.seed)
        elif args.command == "evaluate":
            path = cmd_evaluate(args.checkpoint, args.data, args.out, args.replicates)
        elif args.command == "impute-search":
            path = cmd_impute_search(args.data, args.out, config, args.seed)
        elif args.command == "pipeline":
            paths = cmd_pipeline(args.data, args.out, config, args.seeds, args.jobs)
            path = Path(args.out)
            for p in paths:
                print(p)
        else:
            path = cmd_report(args.results, args.out)
            print((Path(path) / "summary.txt").read_text(), end="")
    except (CausalFlowError, FileNotFoundError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
