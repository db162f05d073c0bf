"""Multinomial logistic regression over sparse tf-idf vectors.

Objective (bias unregularized, matching the usual l2-penalized multinomial
formulation with inverse regularization strength C):

    L(W, b) = sum_i -ln softmax(W x_i + b)_{y_i} + (1 / 2C) * ||W||_F^2

Training is deterministic: zero initialization and a full-batch L-BFGS
minimizer driven by the analytic gradient below, stopping when the gradient
infinity-norm falls below ``tol`` or after ``max_iter`` iterations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from .corpus import LabelSpace
from .errors import DataError
from .vectorize import SparseVector, stack

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    C: float = 1.0
    tol: float = 1e-4
    max_iter: int = 1000

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError(f"C must be positive, got {self.C}")
        if self.tol <= 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass
class LogisticModel:
    """Trained weights; immutable after training, safe for concurrent predict."""

    W: np.ndarray
    b: np.ndarray
    label_space: LabelSpace
    converged: bool = True

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]


def _as_csr(X) -> sp.csr_matrix:
    if sp.issparse(X):
        return X.tocsr()
    return stack(list(X))


def _softmax_rows(Z: np.ndarray) -> np.ndarray:
    # max subtraction keeps exp() finite for any logit magnitude
    Zs = Z - Z.max(axis=1, keepdims=True)
    P = np.exp(Zs)
    P /= P.sum(axis=1, keepdims=True)
    return P


def nll_and_grad(W: np.ndarray, b: np.ndarray, X: sp.csr_matrix, y: np.ndarray,
                 C: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Penalized negative log-likelihood and its analytic gradient.

    Returns (loss, dW, db). Kept public so the gradient can be checked
    against finite differences of the loss alone.
    """
    n = X.shape[0]
    Z = X @ W.T + b
    Zmax = Z.max(axis=1, keepdims=True)
    lse = Zmax[:, 0] + np.log(np.exp(Z - Zmax).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.sum(lse - Z[rows, y]) + 0.5 / C * np.sum(W * W))
    P = np.exp(Z - lse[:, None])
    P[rows, y] -= 1.0
    dW = (X.T @ P).T + W / C
    db = P.sum(axis=0)
    return loss, np.asarray(dW), db


def train(X, y, label_space: LabelSpace, config: TrainConfig | None = None) -> LogisticModel:
    """Fit the model on sparse vectors X and class indices y.

    X may be a list of SparseVector or a prebuilt CSR matrix. Training data
    must contain at least two distinct classes. A model that fails to reach
    the gradient tolerance within max_iter is still returned, flagged with
    ``converged=False`` and a logged warning.
    """
    config = config or TrainConfig()
    X = _as_csr(X)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] != len(y) or len(y) == 0:
        raise ValueError(f"X has {X.shape[0]} rows but y has {len(y)} entries")
    K = len(label_space)
    if y.min() < 0 or y.max() >= K:
        raise ValueError("y contains class indices outside the label space")
    if len(np.unique(y)) < 2:
        raise ValueError("training data contains a single class; need at least two")
    V = X.shape[1]

    def objective(params: np.ndarray) -> tuple[float, np.ndarray]:
        W = params[: K * V].reshape(K, V)
        b = params[K * V:]
        loss, dW, db = nll_and_grad(W, b, X, y, config.C)
        return loss, np.concatenate([dW.ravel(), db])

    result = minimize(
        objective,
        np.zeros(K * V + K),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": config.max_iter, "gtol": config.tol, "ftol": 1e-12},
    )
    W = result.x[: K * V].reshape(K, V).copy()
    b = result.x[K * V:].copy()
    _, dW, db = nll_and_grad(W, b, X, y, config.C)
    grad_norm = max(np.abs(dW).max(), np.abs(db).max())
    converged = bool(grad_norm <= config.tol)
    if not converged:
        log.warning("training did not converge: gradient inf-norm %.3e > tol %.3e after %d iterations",
                    grad_norm, config.tol, result.nit)
    return LogisticModel(W=W, b=b, label_space=label_space, converged=converged)


def predict_proba(model: LogisticModel, x: SparseVector) -> np.ndarray:
    """Softmax class probabilities for one vector."""
    if x.dim != model.dim:
        raise ValueError(f"dimension mismatch: vector has {x.dim}, model expects {model.dim}")
    if x.nnz:
        z = model.W[:, x.indices] @ x.values + model.b
    else:
        z = model.b.copy()
    z -= z.max()
    p = np.exp(z)
    return p / p.sum()


def predict_proba_many(model: LogisticModel, X) -> np.ndarray:
    """Row-wise probabilities for a CSR matrix or list of SparseVector."""
    X = _as_csr(X)
    if X.shape[1] != model.dim:
        raise ValueError(f"dimension mismatch: matrix has {X.shape[1]}, model expects {model.dim}")
    return _softmax_rows(np.asarray(X @ model.W.T) + model.b)


def predict(model: LogisticModel, x: SparseVector) -> int:
    """Argmax class index; ties go to the lowest index."""
    return int(np.argmax(predict_proba(model, x)))


MODEL_FORMAT_VERSION = 1


def save_model(model: LogisticModel, path, vocab_hash: str) -> None:
    """Serialize weights, labels and the tf-idf vocabulary hash to a .npz file."""
    np.savez(
        path,
        version=np.int64(MODEL_FORMAT_VERSION),
        W=model.W,
        b=model.b,
        labels=np.array(model.label_space.labels, dtype=object),
        vocab_hash=np.str_(vocab_hash),
        converged=np.bool_(model.converged),
    )


def load_model(path, expected_vocab_hash: str | None = None) -> LogisticModel:
    """Load a saved model; refuses to load against a mismatched vocabulary hash."""
    with np.load(path, allow_pickle=True) as data:
        version = int(data["version"])
        if version != MODEL_FORMAT_VERSION:
            raise DataError(f"unsupported model format version {version}")
        stored_hash = str(data["vocab_hash"])
        if expected_vocab_hash is not None and stored_hash != expected_vocab_hash:
            raise DataError(
                "vocabulary hash mismatch: model was trained against a different tf-idf model "
                f"({stored_hash[:12]}… != {expected_vocab_hash[:12]}…)")
        labels = LabelSpace.from_labels(str(l) for l in data["labels"])
        return LogisticModel(W=data["W"], b=data["b"], label_space=labels,
                             converged=bool(data["converged"]))
