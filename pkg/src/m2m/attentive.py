"""Sparse attentive multi-output regressor built from sequential sparsemax feature masks.

Each decision step builds a feature mask with an attentive transformer
(linear map, batch standardization, prior scaling, sparsemax), feeds the
masked input through a shared two-layer gated feature transformer, and adds
the rectified output to a running decision vector. A linear head maps the
decision vector to the targets.

Gradients are derived by hand; :func:`loss_and_grad` is the single entry
point used by training and by the finite-difference check.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .errors import (
    ContractError,
    DivergenceDetected,
    InvalidConfig,
    NonFiniteInput,
    ShapeMismatch,
    ZeroDenominator,
)

FORMAT = "m2m.attentive"
VERSION = 1
BN_EPS = 1e-5


# ---------------------------------------------------------------------------
# sparsemax


def _sparsemax_rows(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z_sorted = -np.sort(-Z, axis=1)
    cssv = np.cumsum(z_sorted, axis=1) - 1.0
    ks = np.arange(1, Z.shape[1] + 1)
    support = z_sorted - cssv / ks > 0
    k = support.sum(axis=1)
    tau = cssv[np.arange(Z.shape[0]), k - 1] / k
    return np.maximum(Z - tau[:, None], 0.0), tau


def sparsemax(z) -> np.ndarray:
    """Euclidean projection onto the probability simplex.

    Works on a vector or row-wise on a matrix.
    """
    z = np.asarray(z, dtype=float)
    if z.size == 0 or not np.all(np.isfinite(z)):
        raise NonFiniteInput("sparsemax needs a non-empty finite input")
    if z.ndim == 1:
        return _sparsemax_rows(z[None, :])[0][0]
    return _sparsemax_rows(z)[0]


def sparsemax_backward(Z: np.ndarray, tau: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of row-wise sparsemax.

    On the support S the Jacobian is ``I - 1 1^T / |S|``; coordinates with
    ``z == tau`` count as in-support.
    """
    S = (Z >= tau[:, None]).astype(float)
    mean = (grad_out * S).sum(axis=1, keepdims=True) / S.sum(axis=1, keepdims=True)
    return S * (grad_out - mean)


# ---------------------------------------------------------------------------
# building blocks


def _bn_forward(z, stats=None):
    if stats is None:
        mu = z.mean(axis=0)
        s = np.sqrt(z.var(axis=0) + BN_EPS)
        batch = True
    else:
        mu, s = stats
        batch = False
    xhat = (z - mu) / s
    return xhat, (xhat, s, batch, mu)


def _bn_backward(dxhat, cache):
    xhat, s, batch, _ = cache
    if not batch:
        return dxhat / s
    return (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)) / s


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _glu_forward(x, W, stats=None):
    z = x @ W
    n, bn = _bn_forward(z, stats)
    h = W.shape[1] // 2
    gate = _sigmoid(n[:, h:])
    return n[:, :h] * gate, (x, n, gate, bn)


def _glu_backward(dout, W, cache):
    x, n, gate, bn = cache
    h = W.shape[1] // 2
    dn = np.empty_like(n)
    dn[:, :h] = dout * gate
    dn[:, h:] = dout * n[:, :h] * gate * (1.0 - gate)
    dz = _bn_backward(dn, bn)
    return dz @ W.T, x.T @ dz


def update_prior(prior: np.ndarray, mask: np.ndarray, gamma: float) -> np.ndarray:
    """``P[i] = P[i-1] * (gamma - M[i])`` elementwise."""
    prior = np.asarray(prior, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if prior.shape != mask.shape:
        raise ShapeMismatch("prior and mask must share a shape")
    if gamma < 1:
        raise ContractError("gamma must be >= 1")
    return prior * (gamma - mask)


def attentive_step(a_prev, prior, weights, stats=None) -> np.ndarray:
    """Mask ``sparsemax(prior * BN(a_prev @ weights))`` for one decision step.

    ``stats=None`` standardizes with the batch's own statistics.
    """
    a_prev = np.asarray(a_prev, dtype=float)
    prior = np.asarray(prior, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if a_prev.ndim != 2 or weights.shape[0] != a_prev.shape[1] or prior.shape != (
        a_prev.shape[0], weights.shape[1]
    ):
        raise ShapeMismatch("attentive_step: shapes do not conform")
    hn, _ = _bn_forward(a_prev @ weights, stats)
    return _sparsemax_rows(prior * hn)[0]


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class AttentiveConfig:
    n_steps: int = 3
    gamma: float = 1.3
    hidden_dim: int = 8
    learning_rate: float = 0.02
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1 or self.hidden_dim < 1 or self.batch_size < 2 or self.epochs < 0:
            raise InvalidConfig("n_steps, hidden_dim >= 1; batch_size >= 2; epochs >= 0")
        if self.gamma < 1:
            raise InvalidConfig("gamma must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate must be positive")


def init_params(cfg: AttentiveConfig, n_features: int, n_targets: int, rng=None) -> dict:
    """Glorot-uniform weights; the output head starts at zero."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    D, H, T = n_features, cfg.hidden_dim, n_targets

    def glorot(a, b):
        lim = math.sqrt(6.0 / (a + b))
        return rng.uniform(-lim, lim, (a, b))

    params = {f"att{i}": glorot(D if i == 0 else H, D) for i in range(cfg.n_steps)}
    params["W1"] = glorot(D, 2 * H)
    params["W2"] = glorot(H, 2 * H)
    params["W_out"] = np.zeros((H, T))
    params["b_out"] = np.zeros(T)
    return params


def _forward(params, X, cfg, bn_stats=None, keep=False):
    """Core pass on standardized inputs.

    Returns ``(Yhat, masks, etas, caches, recorded_bn_stats)``.
    """
    B, D = X.shape
    prior = np.ones((B, D))
    a_prev = X
    decision = np.zeros((B, cfg.hidden_dim))
    masks, etas, caches = [], [], []
    recorded = {}

    def st(key):
        return None if bn_stats is None else bn_stats[key]

    for i in range(cfg.n_steps):
        W_att = params[f"att{i}"]
        hn, bn_a = _bn_forward(a_prev @ W_att, st(f"att.{i}"))
        logits = prior * hn
        M, tau = _sparsemax_rows(logits)
        xm = M * X
        g1, c1 = _glu_forward(xm, params["W1"], st(f"glu1.{i}"))
        h2, c2 = _glu_forward(g1, params["W2"], st(f"glu2.{i}"))
        d = np.maximum(h2, 0.0)
        decision += d
        masks.append(M)
        etas.append(d.sum(axis=1))
        recorded[f"att.{i}"] = (bn_a[3], bn_a[1])
        recorded[f"glu1.{i}"] = (c1[3][3], c1[3][1])
        recorded[f"glu2.{i}"] = (c2[3][3], c2[3][1])
        if keep:
            caches.append(dict(a_prev=a_prev, bn_a=bn_a, hn=hn, prior=prior, logits=logits,
                               tau=tau, M=M, c1=c1, c2=c2, h2=h2))
        prior = update_prior(prior, M, cfg.gamma)
        a_prev = h2
    Yhat = decision @ params["W_out"] + params["b_out"]
    if keep:
        caches.append(dict(decision=decision))
    return Yhat, np.stack(masks), np.stack(etas), caches, recorded


def loss_and_grad(params, X, Y, cfg, bn_stats=None):
    """Mean squared error over all targets and its gradient for every parameter."""
    Yhat, _, _, caches, _ = _forward(params, X, cfg, bn_stats, keep=True)
    B, T = Y.shape
    diff = Yhat - Y
    loss = float(np.mean(diff * diff))
    dY = 2.0 * diff / (B * T)
    g = {k: np.zeros_like(v) for k, v in params.items()}
    decision = caches[-1]["decision"]
    g["W_out"] = decision.T @ dY
    g["b_out"] = dY.sum(axis=0)
    d_dec = dY @ params["W_out"].T
    dh2_next = np.zeros_like(d_dec)
    dprior = np.zeros_like(X)
    for i in reversed(range(cfg.n_steps)):
        c = caches[i]
        dh2 = d_dec * (c["h2"] > 0) + dh2_next
        dg1, gW2 = _glu_backward(dh2, params["W2"], c["c2"])
        g["W2"] += gW2
        dxm, gW1 = _glu_backward(dg1, params["W1"], c["c1"])
        g["W1"] += gW1
        dM = dxm * X - dprior * c["prior"]
        dprior_prev = dprior * (cfg.gamma - c["M"])
        dlogits = sparsemax_backward(c["logits"], c["tau"], dM)
        dprior_prev += dlogits * c["hn"]
        dza = _bn_backward(dlogits * c["prior"], c["bn_a"])
        W_att = params[f"att{i}"]
        g[f"att{i}"] = c["a_prev"].T @ dza
        dh2_next = dza @ W_att.T
        dprior = dprior_prev
    return loss, g


@dataclass(eq=False)
class AttentiveModel:
    config: AttentiveConfig
    params: dict
    x_mean: np.ndarray
    x_sd: np.ndarray
    y_mean: np.ndarray
    y_sd: np.ndarray
    bn_stats: dict | None = None
    loss_history: list = field(default_factory=list, repr=False)
    kind = "attentive"

    def _std(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.x_mean.size:
            raise ShapeMismatch(f"expected {self.x_mean.size} columns, got {X.shape}")
        return (X - self.x_mean) / self.x_sd

    def forward(self, X):
        """``(Yhat, masks[step, row, feature], etas[step, row])`` in inference mode."""
        Yh, masks, etas, _, _ = _forward(self.params, self._std(X), self.config, self.bn_stats)
        return Yh * self.y_sd + self.y_mean, masks, etas

    def predict(self, X):
        return self.forward(X)[0]

    def mask_importance(self, X, variant: str = "normalized") -> "MaskImportance":
        _, masks, etas = self.forward(X)
        return aggregate_masks(masks, etas, variant)

    def to_json(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "config": asdict(self.config),
            "params": {k: v.tolist() for k, v in self.params.items()},
            "x_mean": self.x_mean.tolist(),
            "x_sd": self.x_sd.tolist(),
            "y_mean": self.y_mean.tolist(),
            "y_sd": self.y_sd.tolist(),
            "bn_stats": {k: [m.tolist(), s.tolist()] for k, (m, s) in (self.bn_stats or {}).items()},
            "loss_history": list(self.loss_history),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "AttentiveModel":
        if doc.get("format") != FORMAT or doc.get("version") != VERSION:
            raise ContractError("not a version-1 attentive model document")
        return cls(
            AttentiveConfig(**doc["config"]),
            {k: np.asarray(v, dtype=float) for k, v in doc["params"].items()},
            np.asarray(doc["x_mean"]),
            np.asarray(doc["x_sd"]),
            np.asarray(doc["y_mean"]),
            np.asarray(doc["y_sd"]),
            {k: (np.asarray(m), np.asarray(s)) for k, (m, s) in doc["bn_stats"].items()},
            list(doc.get("loss_history", [])),
        )


def forward(model: AttentiveModel, X):
    return model.forward(X)


def _batches(rng, n, size):
    order = rng.permutation(n)
    count = max(1, n // size)
    return np.array_split(order, count)


def train(cfg: AttentiveConfig, X, Y) -> AttentiveModel:
    """Minibatch gradient descent on mean squared error (standardized targets).

    Batch statistics are used during training; inference statistics are
    frozen afterwards from one full pass over the training rows.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeMismatch("X and Y must have matching rows")
    if X.shape[0] < cfg.batch_size:
        raise ContractError(f"need at least batch_size={cfg.batch_size} rows, got {X.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise NonFiniteInput("training data must be finite")
    rng = np.random.default_rng(cfg.seed)
    x_mean, x_sd = X.mean(axis=0), X.std(axis=0)
    x_sd[x_sd == 0] = 1.0
    y_mean, y_sd = Y.mean(axis=0), Y.std(axis=0)
    y_sd[y_sd == 0] = 1.0
    Xs = (X - x_mean) / x_sd
    Ys = (Y - y_mean) / y_sd
    params = init_params(cfg, X.shape[1], Y.shape[1], rng)
    history = []
    for _ in range(cfg.epochs):
        for idx in _batches(rng, X.shape[0], cfg.batch_size):
            loss, g = loss_and_grad(params, Xs[idx], Ys[idx], cfg)
            if not math.isfinite(loss):
                raise DivergenceDetected("training loss became non-finite")
            for k in params:
                params[k] -= cfg.learning_rate * g[k]
        Yh = _forward(params, Xs, cfg)[0]
        epoch_loss = float(np.mean((Yh - Ys) ** 2))
        if not math.isfinite(epoch_loss):
            raise DivergenceDetected("training loss became non-finite")
        history.append(epoch_loss)
    stats = _forward(params, Xs, cfg)[4]
    return AttentiveModel(cfg, params, x_mean, x_sd, y_mean, y_sd, stats, history)


# ---------------------------------------------------------------------------
# mask aggregation


@dataclass(frozen=True, eq=False)
class MaskImportance:
    values: np.ndarray
    variant: str

    @property
    def global_importance(self) -> np.ndarray:
        return self.values.mean(axis=0)


def aggregate_masks(masks, etas, variant: str = "normalized") -> MaskImportance:
    """Per-row feature importance pooled over steps, weighted by step scales.

    ``"normalized"`` divides by the row total so rows sum to one;
    ``"literal"`` divides by ``sum_j sum_i eta * M**2`` taken at face value,
    which does not normalize.
    """
    masks = np.asarray(masks, dtype=float)
    etas = np.asarray(etas, dtype=float)
    if masks.ndim == 2:
        masks = masks[None]
    if etas.ndim == 1:
        etas = etas[None]
    if etas.shape != masks.shape[:2]:
        raise ShapeMismatch("etas must be (steps, rows) matching masks")
    if np.any(etas < 0):
        raise ContractError("step scales must be non-negative")
    num = np.einsum("ib,ibj->bj", etas, masks)
    if variant == "normalized":
        den = num.sum(axis=1)
    elif variant == "literal":
        den = np.einsum("ib,ibj->b", etas, masks ** 2)
    else:
        raise InvalidConfig(f"unknown variant {variant!r}")
    if np.any(den == 0):
        raise ZeroDenominator("a row has zero total mask weight")
    return MaskImportance(num / den[:, None], variant)
