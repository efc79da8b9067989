"""On-disk dataset directories and content hashing."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .dag import CausalGraph
from .errors import InvalidConfig
from .synthgen import PanelDataset

FORMAT = "causalflow-dataset"
ARRAYS = {
    "covariates": "<f8",
    "treatment": "<f8",
    "outcome": "<f8",
    "mask": "u1",
    "alive": "<f8",
    "patient_ids": "<i8",
    "po_control": "<f8",
    "po_treated": "<f8",
    "truth": "<f8",
}
# arrays only metrics may read; imputers and the estimator never see them
EVAL_ONLY = ("truth", "po_control", "po_treated")


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return None
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items() if not isinstance(v, np.ndarray)}
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def save_dataset(dataset: PanelDataset, graph: CausalGraph, path: str | Path, with_csv: bool = False) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, dtype in ARRAYS.items():
        arr = getattr(dataset, name)
        if arr is None:
            continue
        arr = np.ascontiguousarray(arr, dtype=dtype)
        (out / f"{name}.bin").write_bytes(arr.tobytes())
        arrays[name] = {"file": f"{name}.bin", "dtype": dtype, "shape": list(arr.shape)}
    extra_arrays = {}
    for key, value in sorted(dataset.extra.items()):
        if isinstance(value, np.ndarray):
            arr = np.ascontiguousarray(value, dtype="<f8")
            (out / f"extra_{key}.bin").write_bytes(arr.tobytes())
            extra_arrays[key] = {"file": f"extra_{key}.bin", "dtype": "<f8", "shape": list(arr.shape)}
    meta = {
        "format": FORMAT,
        "version": 1,
        "benchmark": dataset.benchmark,
        "seed": dataset.seed,
        "covariate_names": list(dataset.covariate_names),
        "outcome_kind": dataset.outcome_kind,
        "arrays": arrays,
        "extra_arrays": extra_arrays,
        "eval_only": [f"{n}.bin" for n in EVAL_ONLY if n in arrays],
        "extra": _jsonable({k: v for k, v in dataset.extra.items() if not isinstance(v, np.ndarray)}),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    graph.save(out / "graph.json")
    if with_csv:
        write_csv(dataset, out / "panel.csv")
    return out


def load_dataset(path: str | Path, include_eval: bool = True) -> tuple[PanelDataset, CausalGraph]:
    src = Path(path)
    meta_path = src / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{src} is not a dataset directory (no meta.json)")
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != FORMAT:
        raise InvalidConfig(f"{meta_path}: unknown format {meta.get('format')!r}")

    def read(spec):
        raw = (src / spec["file"]).read_bytes()
        return np.frombuffer(raw, dtype=spec["dtype"]).reshape(spec["shape"]).copy()

    arrays = {}
    for name, spec in meta["arrays"].items():
        if not include_eval and name in EVAL_ONLY:
            continue
        arrays[name] = read(spec)
    extra = dict(meta.get("extra") or {})
    for key, spec in (meta.get("extra_arrays") or {}).items():
        extra[key] = read(spec)
    ds = PanelDataset(
        benchmark=meta["benchmark"],
        seed=meta["seed"],
        covariate_names=list(meta["covariate_names"]),
        covariates=arrays["covariates"].astype(np.float64),
        treatment=arrays["treatment"].astype(np.float64),
        outcome=arrays["outcome"].astype(np.float64),
        mask=arrays["mask"].astype(np.uint8),
        po_control=arrays.get("po_control"),
        po_treated=arrays.get("po_treated"),
        alive=arrays["alive"].astype(np.float64),
        outcome_kind=meta["outcome_kind"],
        truth=arrays.get("truth"),
        patient_ids=arrays.get("patient_ids"),
        extra=extra,
    )
    return ds, CausalGraph.load(src / "graph.json")


def write_csv(dataset: PanelDataset, path: str | Path) -> None:
    """Long format, one row per patient and time step; missing covariates are empty fields."""
    n, t, d = dataset.covariates.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "t", *dataset.covariate_names, "treatment", "outcome"])
        for i in range(n):
            for s in range(t):
                covs = ["" if np.isnan(v) else repr(float(v)) for v in dataset.covariates[i, s]]
                writer.writerow([int(dataset.patient_ids[i]), s, *covs, repr(float(dataset.treatment[i, s])), repr(float(dataset.outcome[i, s]))])


def content_hash(path: str | Path, exclude: tuple[str, ...] = ("provenance.json",)) -> str:
    """SHA-256 over relative paths and bytes of every file below ``path`` (or of one file)."""
    root = Path(path)
    h = hashlib.sha256()
    files = [root] if root.is_file() else sorted(p for p in root.rglob("*") if p.is_file() and p.name not in exclude)
    for f in files:
        rel = f.name if root.is_file() else f.relative_to(root).as_posix()
        h.update(rel.encode() + b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()
