"""Single-layer LSTM over covariate histories, with hand-written backpropagation through time."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, MissingForwardCache, NonFiniteInput

GATES = ("i", "f", "o", "g")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class LstmParams:
    W_i: np.ndarray
    W_f: np.ndarray
    W_o: np.ndarray
    W_g: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_g: np.ndarray

    @property
    def hidden_dim(self) -> int:
        return self.W_i.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_i.shape[1] - self.W_i.shape[0]

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> "LstmParams":
        """Xavier-uniform weights, zero biases except a forget bias of one."""
        fan = input_dim + hidden_dim
        bound = np.sqrt(6.0 / (fan + hidden_dim))
        ws = {f"W_{g}": rng.uniform(-bound, bound, size=(hidden_dim, fan)) for g in GATES}
        bs = {f"b_{g}": np.zeros(hidden_dim) for g in GATES}
        bs["b_f"] = np.ones(hidden_dim)
        return cls(**ws, **bs)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "LstmParams":
        fan = input_dim + hidden_dim
        return cls(
            **{f"W_{g}": np.zeros((hidden_dim, fan)) for g in GATES},
            **{f"b_{g}": np.zeros(hidden_dim) for g in GATES},
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.names()}

    @staticmethod
    def names() -> list[str]:
        return [f"W_{g}" for g in GATES] + [f"b_{g}" for g in GATES]


class LstmEncoder:
    """Batched LSTM. ``forward`` caches activations for the matching ``backward`` call."""

    def __init__(self, params: LstmParams):
        self.params = params
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Hidden states ``[B, T, H]`` for covariates ``[B, T, d]``; h_0 = c_0 = 0."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 3 or x.shape[2] != self.params.input_dim:
            raise DimensionMismatch(f"expected [B, T, {self.params.input_dim}] covariates, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise NonFiniteInput("encoder input contains NaN or Inf")
        p = self.params
        b, t, d = x.shape
        hd = p.hidden_dim
        w = np.concatenate([p.W_i, p.W_f, p.W_o, p.W_g], axis=0)
        bias = np.concatenate([p.b_i, p.b_f, p.b_o, p.b_g])
        # the input part of every gate pre-activation can be computed for all steps at once
        pre_x = x @ w[:, :d].T + bias
        w_h = w[:, d:]
        hs = np.zeros((b, t + 1, hd))
        cs = np.zeros((b, t + 1, hd))
        gates = np.empty((b, t, 4 * hd))
        for s in range(t):
            pre = pre_x[:, s] + hs[:, s] @ w_h.T
            act = np.empty_like(pre)
            act[:, : 3 * hd] = _sigmoid(pre[:, : 3 * hd])
            act[:, 3 * hd :] = np.tanh(pre[:, 3 * hd :])
            i, f, o, g = np.split(act, 4, axis=1)
            cs[:, s + 1] = f * cs[:, s] + i * g
            hs[:, s + 1] = o * np.tanh(cs[:, s + 1])
            gates[:, s] = act
        self._cache = (x, hs, cs, gates, w)
        return hs[:, 1:]

    def backward(self, upstream: np.ndarray) -> tuple[LstmParams, np.ndarray]:
        """Gradients of ``sum(upstream * h)`` with respect to parameters and inputs."""
        if self._cache is None:
            raise MissingForwardCache("backward called before forward")
        x, hs, cs, gates, w = self._cache
        b, t, d = x.shape
        hd = self.params.hidden_dim
        if upstream.shape != (b, t, hd):
            raise DimensionMismatch(f"upstream shape {upstream.shape} does not match {(b, t, hd)}")
        dw = np.zeros_like(w)
        dbias = np.zeros(4 * hd)
        dx = np.zeros_like(x)
        dh_next = np.zeros((b, hd))
        dc_next = np.zeros((b, hd))
        for s in reversed(range(t)):
            i, f, o, g = np.split(gates[:, s], 4, axis=1)
            tc = np.tanh(cs[:, s + 1])
            dh = upstream[:, s] + dh_next
            dc = dh * o * (1.0 - tc**2) + dc_next
            dpre = np.concatenate(
                [
                    dc * g * i * (1.0 - i),
                    dc * cs[:, s] * f * (1.0 - f),
                    dh * tc * o * (1.0 - o),
                    dc * i * (1.0 - g**2),
                ],
                axis=1,
            )
            xh = np.concatenate([x[:, s], hs[:, s]], axis=1)
            dw += dpre.T @ xh
            dbias += dpre.sum(axis=0)
            dxh = dpre @ w
            dx[:, s] = dxh[:, :d]
            dh_next = dxh[:, d:]
            dc_next = dc * f
        dws = np.split(dw, 4, axis=0)
        dbs = np.split(dbias, 4)
        grads = LstmParams(*dws, *dbs)
        return grads, dx


def encode_history(params: LstmParams, covariates: np.ndarray) -> np.ndarray:
    """Hidden states ``[T, H]`` for a single ``[T, d]`` covariate sequence."""
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim != 2:
        raise DimensionMismatch(f"expected a [T, d] sequence, got shape {covariates.shape}")
    return LstmEncoder(params).forward(covariates[None])[0]


def encode_gradients(encoder: LstmEncoder, upstream: np.ndarray) -> LstmParams:
    """Parameter gradients for a single sequence whose forward pass ``encoder`` has cached."""
    grads, _ = encoder.backward(np.asarray(upstream, dtype=float)[None])
    return grads
