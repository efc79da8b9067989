"""Affine autoregressive flow whose per-node conditioners only see the node's graph parents.

Each node j has a two-layer tanh perceptron reading ``[v_parents, h]`` and emitting a shift
``mu_j`` and a raw log-scale ``r_j``. The log-scale is soft-clamped to ``s = c * tanh(r / c)``
and ``z_j = (v_j - mu_j) * exp(-s_j)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dag import CausalGraph
from .errors import DimensionMismatch, NonFiniteInput

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class NodeConditioner:
    parents: list[int]
    W1: np.ndarray  # [M, n_parents + H]
    b1: np.ndarray  # [M]
    W2: np.ndarray  # [2, M]
    b2: np.ndarray  # [2]

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


class CausalFlow:
    """One autoregressive block over ``v = [nodes of graph]`` conditioned on a context vector."""

    def __init__(self, graph: CausalGraph, context_dim: int, hidden: int = 128, clamp: float = 5.0, rng=None, identity: bool = True):
        self.graph = graph
        self.dim = len(graph)
        self.context_dim = int(context_dim)
        self.hidden = int(hidden)
        self.clamp = float(clamp)
        self.order = graph.topological_sort()
        rng = np.random.default_rng(0) if rng is None else rng
        self.nodes: list[NodeConditioner] = []
        for j in range(self.dim):
            pa = graph.parents(j)
            fan_in = len(pa) + self.context_dim
            bound = np.sqrt(6.0 / (fan_in + self.hidden))
            w2 = np.zeros((2, self.hidden)) if identity else rng.normal(0.0, 0.3, size=(2, self.hidden))
            b2 = np.zeros(2) if identity else rng.normal(0.0, 0.3, size=2)
            self.nodes.append(
                NodeConditioner(pa, rng.uniform(-bound, bound, size=(self.hidden, fan_in)), np.zeros(self.hidden), w2, b2)
            )
        self._cache = None

    # -- parameters ------------------------------------------------------------

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for j, node in enumerate(self.nodes):
            for k, v in node.params().items():
                out[f"node{j}.{k}"] = v
        return out

    def set_identity(self) -> None:
        for node in self.nodes:
            node.W2[...] = 0.0
            node.b2[...] = 0.0

    # -- conditioner --------------------------------------------------------------

    def _check(self, arr, h):
        if arr.ndim != 2 or arr.shape[1] != self.dim:
            raise DimensionMismatch(f"expected [B, {self.dim}] rows, got {arr.shape}")
        if h.shape != (arr.shape[0], self.context_dim):
            raise DimensionMismatch(f"expected context [B, {self.context_dim}], got {h.shape}")
        if not (np.all(np.isfinite(arr)) and np.all(np.isfinite(h))):
            raise NonFiniteInput("flow input contains NaN or Inf")

    def _condition(self, j: int, v: np.ndarray, h: np.ndarray):
        node = self.nodes[j]
        inp = np.concatenate([v[:, node.parents], h], axis=1)
        act = np.tanh(inp @ node.W1.T + node.b1)
        out = act @ node.W2.T + node.b2
        raw = out[:, 1]
        s = self.clamp * np.tanh(raw / self.clamp)
        return out[:, 0], s, raw, inp, act

    def shift_scale(self, v, h) -> tuple[np.ndarray, np.ndarray]:
        """Shift and clamped log-scale for every node, each ``[B, D]``."""
        v, h = _as_batch(v, h)
        mu = np.empty_like(v)
        s = np.empty_like(v)
        for j in range(self.dim):
            mu[:, j], s[:, j], *_ = self._condition(j, v, h)
        return mu, s

    # -- transforms --------------------------------------------------------------

    def forward(self, v, h, cache: bool = False):
        """Map data rows to noise. Returns ``(z, logdet)`` with ``logdet = -sum_j s_j``."""
        v, h, single = _as_batch(v, h, with_flag=True)
        self._check(v, h)
        z = np.empty_like(v)
        logdet = np.zeros(v.shape[0])
        saved = []
        for j in range(self.dim):
            mu, s, raw, inp, act = self._condition(j, v, h)
            z[:, j] = (v[:, j] - mu) * np.exp(-s)
            logdet -= s
            if cache:
                saved.append((s, raw, inp, act))
        if cache:
            self._cache = (v, h, z, saved)
        if single:
            return z[0], float(logdet[0])
        return z, logdet

    def decode(self, z, h, v_init, nodes) -> np.ndarray:
        """Overwrite ``nodes`` of ``v_init`` by inverting them in the given order."""
        v = np.array(v_init, dtype=float, copy=True)
        for j in nodes:
            mu, s, *_ = self._condition(j, v, h)
            v[:, j] = z[:, j] * np.exp(s) + mu
        return v

    def inverse(self, z, h, order=None) -> np.ndarray:
        """Map noise back to data, decoding nodes in topological order."""
        z, h, single = _as_batch(z, h, with_flag=True)
        self._check(z, h)
        v = self.decode(z, h, np.zeros_like(z), self.order if order is None else order)
        return v[0] if single else v

    def log_prob(self, v, h) -> np.ndarray | float:
        z, logdet = self.forward(v, h)
        return np.sum(-0.5 * z**2 - 0.5 * LOG_2PI, axis=-1) + logdet

    def sample(self, h, rng: np.random.Generator) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        single = h.ndim == 1
        hb = h[None] if single else h
        z = rng.standard_normal((hb.shape[0], self.dim))
        v = self.inverse(z, hb)
        return v[0] if single else v

    # -- gradients ---------------------------------------------------------------

    def backward_nll(self, weights: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Gradients of ``sum_b weights[b] * NLL_b`` for the cached forward pass.

        Returns parameter gradients keyed like ``named_params`` and the gradient with respect
        to the context rows.
        """
        if self._cache is None:
            raise RuntimeError("backward_nll needs a forward pass with cache=True")
        v, h, z, saved = self._cache
        n_pa_offset = [len(node.parents) for node in self.nodes]
        dh = np.zeros_like(h)
        grads = {}
        wcol = weights[:, None]
        for j, node in enumerate(self.nodes):
            s, raw, inp, act = saved[j]
            zj = z[:, j]
            dmu = -zj * np.exp(-s)
            ds = 1.0 - zj**2
            dr = ds * (1.0 - np.tanh(raw / self.clamp) ** 2)
            dout = np.stack([dmu, dr], axis=1) * wcol
            grads[f"node{j}.W2"] = dout.T @ act
            grads[f"node{j}.b2"] = dout.sum(axis=0)
            dpre = (dout @ node.W2) * (1.0 - act**2)
            grads[f"node{j}.W1"] = dpre.T @ inp
            grads[f"node{j}.b1"] = dpre.sum(axis=0)
            dh += (dpre @ node.W1)[:, n_pa_offset[j] :]
        return grads, dh


def _as_batch(a, h, with_flag: bool = False):
    a = np.asarray(a, dtype=float)
    h = np.asarray(h, dtype=float)
    single = a.ndim == 1
    if single:
        a = a[None]
        h = h[None]
    return (a, h, single) if with_flag else (a, h)


@dataclass
class Dequantizer:
    """Uniform dequantization of binary columns, ``b + alpha * (u - 0.5)``."""

    columns: tuple[int, ...]
    alpha: float = 0.5

    def apply(self, v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = np.array(v, dtype=float, copy=True)
        if self.columns:
            cols = list(self.columns)
            out[..., cols] += self.alpha * (rng.random(out[..., cols].shape) - 0.5)
        return out

    def binarize(self, v: np.ndarray) -> np.ndarray:
        out = np.array(v, dtype=float, copy=True)
        cols = list(self.columns)
        out[..., cols] = (out[..., cols] >= 0.5).astype(float)
        return out
