"""Maximum-likelihood training of the LSTM encoder and the graph-masked flow, plus checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dag import CausalGraph, no_dag_order
from .encoder import LstmEncoder, LstmParams
from .errors import (
    ConfigMismatch,
    CorruptCheckpoint,
    DivergedLoss,
    InvalidConfig,
    NonFiniteInput,
    TooFewPatients,
)
from .flow import CausalFlow, Dequantizer
from .synthgen import PanelDataset

SD_FLOOR = 1e-8
MAGIC = b"CFLOWCKP"
VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 512  # patients per step
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    hidden_dim: int = 128
    flow_hidden: int = 128
    clamp: float = 5.0
    test_fraction: float = 0.2
    val_fraction: float = 0.2  # share of the non-test patients
    variant: str = "dag"  # or "no-dag"
    dequant_alpha: float = 0.5
    normalization: str = "joint"

    def __post_init__(self):
        if self.variant not in ("dag", "no-dag"):
            raise InvalidConfig(f"variant must be 'dag' or 'no-dag', got {self.variant!r}")
        for name in ("test_fraction", "val_fraction"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise InvalidConfig(f"{name} must lie in (0, 1)")
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_epochs < 0 or self.patience <= 0:
            raise InvalidConfig("learning_rate, batch_size and patience must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# -- splitting ------------------------------------------------------------------


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def split_indices(n_patients: int, config: TrainConfig) -> Split:
    """Seeded patient-level train/validation/test partition (default 64/16/20)."""
    if n_patients < 10:
        raise TooFewPatients(f"need at least 10 patients to split, got {n_patients}")
    perm = np.random.default_rng(config.seed).permutation(n_patients)
    n_test = int(round(config.test_fraction * n_patients))
    n_val = int(round(config.val_fraction * (n_patients - n_test)))
    test = np.sort(perm[:n_test])
    val = np.sort(perm[n_test : n_test + n_val])
    train = np.sort(perm[n_test + n_val :])
    return Split(train, val, test)


def split(dataset: PanelDataset, config: TrainConfig) -> tuple[PanelDataset, PanelDataset, PanelDataset]:
    s = split_indices(dataset.n_patients, config)
    return dataset.subset(s.train), dataset.subset(s.val), dataset.subset(s.test)


# -- normalization ----------------------------------------------------------------


@dataclass
class Normalizer:
    """Pooled standardization for covariates and treatment, per-step standardization for outcomes."""

    cov_mean: np.ndarray
    cov_sd: np.ndarray
    a_mean: float
    a_sd: float
    y_mean: np.ndarray
    y_sd: np.ndarray

    @classmethod
    def fit(cls, dataset: PanelDataset, binary_covariates=(), dequant_alpha: float = 0.0) -> "Normalizer":
        """Fit on raw training values; binary columns get the added variance of their dequantization noise."""
        x = dataset.covariates
        if np.isnan(x).any():
            raise NonFiniteInput("normalizer needs complete covariates; impute first")
        noise_var = dequant_alpha**2 / 12.0
        cov_var = x.var(axis=(0, 1))
        cov_var[list(binary_covariates)] += noise_var
        y_var = dataset.outcome.var(axis=0) + (noise_var if dataset.binary_outcome else 0.0)
        return cls(
            cov_mean=x.mean(axis=(0, 1)),
            cov_sd=np.maximum(np.sqrt(cov_var), SD_FLOOR),
            a_mean=float(dataset.treatment.mean()),
            a_sd=float(max(np.sqrt(dataset.treatment.var() + noise_var), SD_FLOOR)),
            y_mean=dataset.outcome.mean(axis=0),
            y_sd=np.maximum(np.sqrt(y_var), SD_FLOOR),
        )

    def x(self, x):
        return (x - self.cov_mean) / self.cov_sd

    def x_inv(self, x):
        return x * self.cov_sd + self.cov_mean

    def a(self, a):
        return (a - self.a_mean) / self.a_sd

    def a_inv(self, a):
        return a * self.a_sd + self.a_mean

    def y(self, y):
        return (y - self.y_mean) / self.y_sd

    def y_inv(self, y):
        return y * self.y_sd + self.y_mean

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(
            cov_mean=np.asarray(d["cov_mean"], dtype=float),
            cov_sd=np.asarray(d["cov_sd"], dtype=float),
            a_mean=float(d["a_mean"]),
            a_sd=float(d["a_sd"]),
            y_mean=np.asarray(d["y_mean"], dtype=float),
            y_sd=np.asarray(d["y_sd"], dtype=float),
        )


# -- model ------------------------------------------------------------------------


def _binary_columns(x: np.ndarray) -> list[int]:
    flat = x.reshape(-1, x.shape[-1])
    return [j for j in range(flat.shape[1]) if np.isin(flat[:, j], (0.0, 1.0)).all()]


class CausalFlowModel:
    """LSTM history encoder feeding a graph-masked flow over ``[covariates, treatment, outcome]``.

    The flow at step t is conditioned on the encoder state after covariates ``0..t-1``
    (a zero vector at t = 0), so the current covariates are modeled by the flow itself.
    """

    def __init__(self, graph: CausalGraph, covariate_names, config: TrainConfig, normalizer: Normalizer | None = None, binary_covariates=(), binary_outcome: bool = False):
        self.graph = graph
        self.config = config
        self.covariate_names = list(covariate_names)
        names = graph.names
        missing = [c for c in self.covariate_names if c not in names]
        if missing or len(self.covariate_names) != len(graph.covariate_indices):
            raise ConfigMismatch(f"dataset covariates {self.covariate_names} do not match graph covariates")
        self.cov_nodes = np.array([graph.index(c) for c in self.covariate_names])
        self.t_node = graph.treatment_index
        self.y_node = graph.outcome_index
        self.flow_graph = graph if config.variant == "dag" else graph.autoregressive(no_dag_order(graph))
        rng = np.random.default_rng(config.seed)
        d = len(self.covariate_names)
        self.encoder = LstmEncoder(LstmParams.init(d, config.hidden_dim, rng))
        self.flow = CausalFlow(self.flow_graph, config.hidden_dim, hidden=config.flow_hidden, clamp=config.clamp, rng=rng)
        self.normalizer = normalizer
        self.binary_covariates = [int(j) for j in binary_covariates]
        self.binary_outcome = bool(binary_outcome)
        self.trained = False

    @classmethod
    def for_dataset(cls, dataset: PanelDataset, graph: CausalGraph, config: TrainConfig) -> "CausalFlowModel":
        return cls(
            graph,
            dataset.covariate_names,
            config,
            binary_covariates=_binary_columns(dataset.covariates),
            binary_outcome=dataset.binary_outcome,
        )

    # parameters are exposed as one flat name -> array mapping shared by Adam and checkpoints
    def named_params(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.as_dict().items()}
        out.update({f"flow.{k}": v for k, v in self.flow.named_params().items()})
        return out

    def dequantizer(self, training: bool) -> Dequantizer:
        cols = [int(self.cov_nodes[j]) for j in self.binary_covariates] if training else []
        if training:
            cols.append(self.t_node)
        if self.binary_outcome:
            cols.append(self.y_node)
        return Dequantizer(tuple(sorted(cols)), self.config.dequant_alpha)

    def assemble(self, dataset: PanelDataset, rng: np.random.Generator | None = None, training: bool = False):
        """Normalized rows ``[N, T, D]`` and normalized covariates ``[N, T, d]``."""
        n, t, d = dataset.covariates.shape
        v = np.empty((n, t, len(self.graph)))
        v[:, :, self.cov_nodes] = dataset.covariates
        v[:, :, self.t_node] = dataset.treatment
        v[:, :, self.y_node] = dataset.outcome
        if rng is not None:
            v = self.dequantizer(training).apply(v, rng)
        norm = self.normalizer
        v[:, :, self.cov_nodes] = norm.x(v[:, :, self.cov_nodes])
        v[:, :, self.t_node] = norm.a(v[:, :, self.t_node])
        v[:, :, self.y_node] = norm.y(v[:, :, self.y_node])
        return v, v[:, :, self.cov_nodes]

    def context(self, x_norm: np.ndarray) -> np.ndarray:
        hs = self.encoder.forward(x_norm)
        ctx = np.zeros_like(hs)
        ctx[:, 1:] = hs[:, :-1]
        return ctx

    def nll_and_grads(self, v: np.ndarray, x_norm: np.ndarray, weights: np.ndarray):
        """Weighted mean per-row NLL and its gradients for a batch of patients."""
        n, t, dim = v.shape
        ctx = self.context(x_norm)
        flat_v = v.reshape(-1, dim)
        flat_h = ctx.reshape(n * t, -1)
        w = weights.reshape(-1).astype(float)
        total = w.sum()
        z, logdet = self.flow.forward(flat_v, flat_h, cache=True)
        nll_rows = 0.5 * np.sum(z**2, axis=1) + 0.5 * dim * np.log(2 * np.pi) - logdet
        loss = float((w * nll_rows).sum() / total)
        fgrads, dctx = self.flow.backward_nll(w / total)
        dctx = dctx.reshape(n, t, -1)
        upstream = np.zeros_like(dctx)
        upstream[:, :-1] = dctx[:, 1:]
        egrads, _ = self.encoder.backward(upstream)
        grads = {f"encoder.{k}": g for k, g in egrads.as_dict().items()}
        grads.update({f"flow.{k}": g for k, g in fgrads.items()})
        return loss, grads

    def nll(self, v: np.ndarray, x_norm: np.ndarray, weights: np.ndarray) -> float:
        n, t, dim = v.shape
        ctx = self.context(x_norm)
        lp = self.flow.log_prob(v.reshape(-1, dim), ctx.reshape(n * t, -1))
        w = weights.reshape(-1).astype(float)
        return float(-(w * lp).sum() / w.sum())


# -- optimizer --------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for k in sorted(self.params):
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            self.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    model: CausalFlowModel
    history: list[dict] = field(default_factory=list)
    split: Split | None = None
    best_epoch: int = 0


def _snapshot(model: CausalFlowModel) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.named_params().items()}


def _restore(model: CausalFlowModel, snap: dict[str, np.ndarray]) -> None:
    for k, v in model.named_params().items():
        v[...] = snap[k]


def train(dataset: PanelDataset, graph: CausalGraph, config: TrainConfig | None = None, split_override: Split | None = None) -> TrainResult:
    """Adam on the mean per-row NLL with early stopping on validation NLL.

    Rows where ``dataset.alive`` is zero carry no weight. The returned model holds the
    parameters of the best validation epoch.
    """
    config = config or TrainConfig()
    if dataset.is_masked or np.isnan(dataset.covariates).any():
        raise NonFiniteInput("training needs a complete dataset; impute missing covariates first")
    parts = split_override or split_indices(dataset.n_patients, config)
    train_ds, val_ds = dataset.subset(parts.train), dataset.subset(parts.val)
    model = CausalFlowModel.for_dataset(dataset, graph, config)
    model.normalizer = Normalizer.fit(train_ds, model.binary_covariates, config.dequant_alpha)

    rng = np.random.default_rng([config.seed, 1])
    val_v, val_x = model.assemble(val_ds, np.random.default_rng([config.seed, 2]), training=True)
    val_w = val_ds.alive
    params = model.named_params()
    opt = Adam(params, lr=config.learning_rate)
    best = model.nll(val_v, val_x, val_w)
    history = [{"epoch": 0, "train_nll": None, "val_nll": best}]
    snap = _snapshot(model)
    best_epoch = 0
    stale = 0
    n_train = train_ds.n_patients
    for epoch in range(1, config.max_epochs + 1):
        tr_v, tr_x = model.assemble(train_ds, rng, training=True)
        order = rng.permutation(n_train)
        losses, sizes = [], []
        for start in range(0, n_train, config.batch_size):
            idx = order[start : start + config.batch_size]
            w = train_ds.alive[idx]
            if w.sum() == 0:
                continue
            loss, grads = model.nll_and_grads(tr_v[idx], tr_x[idx], w)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                _restore(model, snap)
                model.trained = True
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}", model=model)
            opt.step(grads)
            losses.append(loss)
            sizes.append(w.sum())
        train_nll = float(np.average(losses, weights=sizes))
        val_nll = model.nll(val_v, val_x, val_w)
        if not np.isfinite(val_nll):
            _restore(model, snap)
            model.trained = True
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}", model=model)
        history.append({"epoch": epoch, "train_nll": train_nll, "val_nll": val_nll})
        if val_nll < best:
            best, best_epoch, stale = val_nll, epoch, 0
            snap = _snapshot(model)
        else:
            stale += 1
            if stale >= config.patience:
                break
    _restore(model, snap)
    model.trained = True
    return TrainResult(model=model, history=history, split=parts, best_epoch=best_epoch)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(model: CausalFlowModel, path: str | Path) -> None:
    """Header, metadata JSON, named float64 tensors, then a SHA-256 of everything before it."""
    meta = {
        "config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "graph": model.graph.to_dict(),
        "covariate_names": model.covariate_names,
        "binary_covariates": model.binary_covariates,
        "binary_outcome": model.binary_outcome,
        "normalizer": None if model.normalizer is None else model.normalizer.to_dict(),
        "trained": model.trained,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<IQ", VERSION, len(meta_bytes)), meta_bytes]
    params = model.named_params()
    chunks.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        encoded = name.encode()
        chunks.append(struct.pack("<HB", len(encoded), arr.ndim))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path: str | Path, expected_graph: CausalGraph | None = None) -> CausalFlowModel:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint(f"{path}: checksum mismatch (truncated or modified)")
    try:
        pos = len(MAGIC)
        version, meta_len = struct.unpack_from("<IQ", body, pos)
        pos += 12
        if version != VERSION:
            raise CorruptCheckpoint(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(body[pos : pos + meta_len])
        pos += meta_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<HB", body, pos)
            pos += 3
            name = body[pos : pos + name_len].decode()
            pos += name_len
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, ValueError, KeyError) as exc:
        raise CorruptCheckpoint(f"{path}: malformed payload ({exc})") from exc

    graph = CausalGraph.from_dict(meta["graph"])
    if expected_graph is not None and graph.to_dict() != expected_graph.to_dict():
        raise ConfigMismatch("checkpoint was trained on a different graph")
    config = TrainConfig(**meta["config"])
    if config.hash() != meta["config_hash"]:
        raise CorruptCheckpoint(f"{path}: config hash does not match stored config")
    model = CausalFlowModel(
        graph,
        meta["covariate_names"],
        config,
        normalizer=None if meta["normalizer"] is None else Normalizer.from_dict(meta["normalizer"]),
        binary_covariates=meta["binary_covariates"],
        binary_outcome=meta["binary_outcome"],
    )
    params = model.named_params()
    if set(params) != set(tensors):
        raise CorruptCheckpoint(f"{path}: parameter names do not match the model layout")
    for name, arr in params.items():
        if arr.shape != tensors[name].shape:
            raise CorruptCheckpoint(f"{path}: shape mismatch for {name}")
        arr[...] = tensors[name]
    model.trained = bool(meta["trained"])
    return model
