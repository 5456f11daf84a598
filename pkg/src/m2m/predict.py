"""Multi-output linear predictors behind one fit/predict contract.

All fits standardize X with training statistics and center Y; coefficients
are stored on the original scale, so ``predict`` is ``X @ coef + intercept``.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ContractError, InvalidConfig, RankDeficient, ShapeMismatch, ZeroVarianceDeflation

FORMAT = "m2m.predictor"
VERSION = 1
RIDGE_FALLBACK = 1e-8


class ConvergenceWarning(UserWarning):
    pass


@dataclass(eq=False)
class PredictorModel:
    kind: str
    params: dict
    coef: np.ndarray
    intercept: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    extras: dict = field(default_factory=dict, repr=False)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.coef.shape[0]:
            raise ShapeMismatch(f"expected {self.coef.shape[0]} columns, got {X.shape}")
        return X @ self.coef + self.intercept

    def to_json(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "kind": self.kind,
            "params": self.params,
            "coef": self.coef.tolist(),
            "intercept": self.intercept.tolist(),
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_mean": self.y_mean.tolist(),
            "extras": {k: np.asarray(v).tolist() for k, v in self.extras.items()},
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "PredictorModel":
        if doc.get("format") != FORMAT or doc.get("version") != VERSION:
            raise ContractError("not a version-1 predictor document")
        return cls(
            doc["kind"],
            dict(doc["params"]),
            np.asarray(doc["coef"], dtype=float),
            np.asarray(doc["intercept"], dtype=float),
            np.asarray(doc["x_mean"], dtype=float),
            np.asarray(doc["x_scale"], dtype=float),
            np.asarray(doc["y_mean"], dtype=float),
            {k: np.asarray(v) for k, v in doc.get("extras", {}).items()},
        )


def predict(model, X: np.ndarray) -> np.ndarray:
    """Predict with any fitted model exposing ``predict``."""
    return model.predict(X)


def _prepare(X, Y):
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeMismatch("X and Y must be 2-D with matching rows")
    xm = X.mean(axis=0)
    xs = X.std(axis=0)
    xs[xs == 0] = 1.0
    ym = Y.mean(axis=0)
    return (X - xm) / xs, Y - ym, xm, xs, ym


def _finish(kind, params, coef_std, xm, xs, ym, extras=None):
    coef = coef_std / xs[:, None]
    intercept = ym - xm @ coef
    return PredictorModel(kind, params, coef, intercept, xm, xs, ym, extras or {})


def fit_mean(X, Y) -> PredictorModel:
    """Baseline that predicts the training target means."""
    Xs, Yc, xm, xs, ym = _prepare(X, Y)
    return _finish("mean", {}, np.zeros((Xs.shape[1], Yc.shape[1])), xm, xs, ym)


def fit_linear(X, Y, ridge_fallback: bool = True) -> PredictorModel:
    """Per-target OLS.

    When the Gram matrix is numerically singular a ridge of 1e-8 is added,
    unless ``ridge_fallback`` is False, in which case RankDeficient is raised.
    """
    Xs, Yc, xm, xs, ym = _prepare(X, Y)
    G = Xs.T @ Xs
    ev = np.linalg.eigvalsh(G)
    singular = Xs.shape[0] <= Xs.shape[1] or ev[0] <= 1e-12 * max(ev[-1], 1e-300)
    if singular:
        if not ridge_fallback:
            raise RankDeficient("X^T X is singular")
        B = np.linalg.solve(G + RIDGE_FALLBACK * np.eye(G.shape[0]), Xs.T @ Yc)
    else:
        B = np.linalg.lstsq(Xs, Yc, rcond=None)[0]
    return _finish("linear", {"ridge_fallback": bool(singular)}, B, xm, xs, ym)


def _row_grad(xj: np.ndarray, R: np.ndarray, n: int) -> np.ndarray:
    return (xj @ R) / n


def critical_alpha(X, Y, l1_ratio: float = 0.5) -> float:
    """Smallest alpha at which every coefficient row is zero.

    From the stationarity condition at B = 0: alpha * l1_ratio must reach
    ``max_j ||X_j^T Y|| / N`` on standardized X and centered Y. The value is
    nudged up to the next float where rounding would otherwise fall short.
    """
    if not 0 < l1_ratio <= 1:
        raise ContractError("critical alpha needs l1_ratio in (0, 1]")
    Xs, Yc, *_ = _prepare(X, Y)
    n = Xs.shape[0]
    top = max(float(np.linalg.norm(_row_grad(Xs[:, j], Yc, n))) for j in range(Xs.shape[1]))
    a = top / l1_ratio
    while a * l1_ratio < top:
        a = np.nextafter(a, np.inf)
    return float(a)


def en_objective(Xs, Yc, B, alpha, l1_ratio):
    n = Xs.shape[0]
    R = Yc - Xs @ B
    return (
        0.5 / n * float(np.sum(R * R))
        + alpha * l1_ratio * float(np.sum(np.linalg.norm(B, axis=1)))
        + 0.5 * alpha * (1 - l1_ratio) * float(np.sum(B * B))
    )


def fit_multitask_en(
    X,
    Y,
    alpha: float = 1.0,
    l1_ratio: float = 0.5,
    max_iter: int = 1000,
    tol: float = 1e-6,
) -> PredictorModel:
    """Multi-task elastic net by block coordinate descent over coefficient rows.

    Minimizes ``(1/2N)||Y - XB||_F^2 + alpha*l1_ratio*sum_j ||B_j||_2
    + (alpha*(1-l1_ratio)/2)||B||_F^2``; ``l1_ratio=1`` is the multi-task
    lasso. Rows are swept in column order. Non-convergence is reported via
    ``ConvergenceWarning`` and ``params["converged"]``.
    """
    if alpha < 0 or not 0 <= l1_ratio <= 1:
        raise InvalidConfig("alpha must be >= 0 and l1_ratio in [0, 1]")
    Xs, Yc, xm, xs, ym = _prepare(X, Y)
    n, p = Xs.shape
    B = np.zeros((p, Yc.shape[1]))
    R = Yc.copy()
    col_sq = np.einsum("ij,ij->j", Xs, Xs) / n
    l1 = alpha * l1_ratio
    l2 = alpha * (1 - l1_ratio)
    history = [en_objective(Xs, Yc, B, alpha, l1_ratio)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        biggest = 0.0
        for j in range(p):
            if col_sq[j] == 0:
                continue
            old = B[j].copy()
            if old.any():
                R += np.outer(Xs[:, j], old)
            z = _row_grad(Xs[:, j], R, n)
            nz = float(np.linalg.norm(z))
            if nz <= l1:
                new = np.zeros_like(old)
            else:
                new = (1.0 - l1 / nz) * z / (col_sq[j] + l2)
            if new.any():
                R -= np.outer(Xs[:, j], new)
            B[j] = new
            biggest = max(biggest, float(np.max(np.abs(new - old))))
        history.append(en_objective(Xs, Yc, B, alpha, l1_ratio))
        if biggest < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"multi-task elastic net did not converge in {max_iter} sweeps", ConvergenceWarning)
    params = {
        "alpha": alpha, "l1_ratio": l1_ratio, "max_iter": max_iter, "tol": tol,
        "converged": converged, "n_iter": it,
    }
    model = _finish("multitask_en", params, B, xm, xs, ym, {"coef_std": B})
    model.extras["objective"] = np.asarray(history)
    return model


def fit_pls(X, Y, n_components: int = 2, max_inner: int = 500, inner_tol: float = 1e-12) -> PredictorModel:
    """PLS2 by NIPALS with X and Y deflation.

    Stores weights W, X loadings P, Y loadings C and scores T; the regression
    matrix is ``W (P^T W)^-1 C^T`` on the standardized scale.
    """
    Xs, Yc, xm, xs, ym = _prepare(X, Y)
    n, p = Xs.shape
    if not 1 <= n_components <= min(n - 1, p):
        raise InvalidConfig(f"n_components must lie in [1, {min(n - 1, p)}]")
    E, F = Xs.copy(), Yc.copy()
    x_scale = float(np.linalg.norm(Xs)) or 1.0
    W, P, C, T = [], [], [], []
    for a in range(n_components):
        u = F[:, int(np.argmax(np.sum(F * F, axis=0)))].copy()
        if np.linalg.norm(u) == 0:
            raise ZeroVarianceDeflation(f"component {a + 1}: Y residual is zero")
        t_old = None
        for _ in range(max_inner):
            w = E.T @ u
            nw = np.linalg.norm(w)
            if nw <= 1e-12 * x_scale:
                raise ZeroVarianceDeflation(f"component {a + 1}: X weights vanished")
            w /= nw
            t = E @ w
            tt = float(t @ t)
            c = F.T @ t / tt
            u = F @ c / float(c @ c)
            if t_old is not None and np.linalg.norm(t - t_old) <= inner_tol * np.linalg.norm(t):
                break
            t_old = t
        tt = float(t @ t)
        if tt <= (1e-12 * x_scale) ** 2:
            raise ZeroVarianceDeflation(f"component {a + 1}: X scores collapsed")
        pl = E.T @ t / tt
        c = F.T @ t / tt
        E = E - np.outer(t, pl)
        F = F - np.outer(t, c)
        W.append(w)
        P.append(pl)
        C.append(c)
        T.append(t)
    W, P, C, T = (np.column_stack(v) for v in (W, P, C, T))
    B = W @ np.linalg.solve(P.T @ W, C.T)
    return _finish(
        "pls", {"n_components": n_components}, B, xm, xs, ym,
        {"weights": W, "x_loadings": P, "y_loadings": C, "x_scores": T},
    )


class NoiseModel:
    """Reference "predictor" returning seeded Gaussian noise; a ranking floor.

    Each output row is drawn from a generator keyed on the seed and the
    row's bytes, so single-row folds do not all receive the same draw.
    """

    kind = "noise"

    def __init__(self, n_targets: int, seed: int = 0, loc=0.0, scale=1.0):
        self.n_targets = n_targets
        self.seed = seed
        self.loc = np.broadcast_to(np.asarray(loc, dtype=float), (n_targets,))
        self.scale = np.broadcast_to(np.asarray(scale, dtype=float), (n_targets,))

    def predict(self, X):
        X = np.ascontiguousarray(X, dtype=float)
        out = np.empty((X.shape[0], self.n_targets))
        for i, row in enumerate(X):
            key = int.from_bytes(hashlib.sha256(row.tobytes()).digest()[:8], "little")
            out[i] = np.random.default_rng([self.seed, key]).normal(size=self.n_targets)
        return self.loc + self.scale * out


def fit_predictor(spec: Mapping[str, Any], X, Y, seed: int = 0):
    """Dispatch on ``spec["kind"]``: linear, multitask_en, multitask_lasso, pls,
    attentive, mean or noise."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == "linear":
        return fit_linear(X, Y, **spec)
    if kind == "multitask_en":
        return fit_multitask_en(X, Y, **spec)
    if kind == "multitask_lasso":
        spec["l1_ratio"] = 1.0
        m = fit_multitask_en(X, Y, **spec)
        m.kind = "multitask_en"
        return m
    if kind == "pls":
        return fit_pls(X, Y, **spec)
    if kind == "mean":
        return fit_mean(X, Y)
    if kind == "noise":
        Y = np.asarray(Y, dtype=float)
        Y = Y[:, None] if Y.ndim == 1 else Y
        return NoiseModel(Y.shape[1], spec.get("seed", seed), Y.mean(axis=0), Y.std(axis=0))
    if kind == "attentive":
        from .attentive import AttentiveConfig, train

        cfg = AttentiveConfig(**{"seed": seed, **spec})
        return train(cfg, X, Y)
    raise InvalidConfig(f"unknown predictor kind {kind!r}")


def predictor_label(spec: Mapping[str, Any]) -> str:
    spec = dict(spec)
    kind = spec.pop("kind", "?")
    if not spec:
        return kind
    args = ",".join(f"{k}={spec[k]}" for k in sorted(spec))
    return f"{kind}({args})"


def save_model(model, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_json(), fh, indent=1)
        fh.write("\n")


def load_model(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") == FORMAT:
        return PredictorModel.from_json(doc)
    from .attentive import AttentiveModel

    return AttentiveModel.from_json(doc)
