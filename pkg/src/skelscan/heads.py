"""Recognition heads and training losses.

The covariance head replaces global average pooling by a second-order
descriptor: channel covariance, matrix square root by the coupled
Newton-Schulz iteration, then the upper triangle fed to a linear classifier.
Because that classifier is C(C+1)/2 wide, a GAP student is distilled from a
covariance teacher with a decoupled logit loss (target-vs-rest binary term
plus a renormalised non-target term).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError
from .nn import Linear, Module
from .tensor import Tensor, concat, elementwise, log_softmax, matmul, softmax


# -- heads -----------------------------------------------------------------------


def gap_head(M: Tensor, classifier: Linear) -> Tensor:
    """Mean over time and joints of (B, C, T, N), then the linear classifier."""
    return classifier(M.mean(axis=(2, 3)))


def centering_matrix(d: int, dtype=np.float64) -> np.ndarray:
    """(1/d) (I - (1/d) 1) of size d x d."""
    return ((np.eye(d) - np.full((d, d), 1.0 / d)) / d).astype(dtype)


def cov_pool(O: Tensor) -> Tensor:
    """Sigma = O I~ O^T for O of shape (B, C, d)."""
    if O.ndim != 3:
        raise ShapeError(f"cov_pool expects (B, C, d), got {O.shape}")
    d = O.shape[2]
    if d < 2:
        raise DataError(f"covariance pooling needs d >= 2 samples per channel, got {d}")
    Ibar = Tensor(centering_matrix(d, O.dtype), dtype=O.dtype)
    return matmul(matmul(O, Ibar), O.transpose(-1, -2))


def _trace(S: Tensor) -> Tensor:
    C = S.shape[-1]
    eye = np.eye(C, dtype=S.dtype)
    return (S * eye).sum(axis=(-2, -1), keepdims=True)


def newton_schulz_sqrt(Sigma: Tensor, iterations: int = 5, return_history: bool = False):
    """Approximate Sigma^(1/2) for symmetric PSD (..., C, C) by coupled Newton-Schulz.

    Y_0 = Sigma / tr(Sigma), Z_0 = I, then ``Y <- Y T``, ``Z <- T Z`` with
    ``T = (3I - Z Y) / 2``; the result is rescaled by sqrt(tr(Sigma)).
    A non-positive trace gets ``1e-6 * C`` added on the diagonal once.

    ``return_history`` also returns the rescaled iterate after every step.
    """
    C = Sigma.shape[-1]
    eye = np.eye(C, dtype=Sigma.dtype)
    tr = _trace(Sigma)
    if np.any(tr.data <= 0):
        Sigma = Sigma + (1e-6 * C) * eye
        tr = _trace(Sigma)
        if np.any(tr.data <= 0):
            raise NumericError("Newton-Schulz square root needs a positive trace")
    Y = Sigma * elementwise("reciprocal", tr)
    Z = Tensor(np.broadcast_to(eye, Sigma.shape).copy(), dtype=Sigma.dtype)
    three = 3.0 * eye
    root_tr = tr.sqrt()
    history = []
    for _ in range(iterations):
        Tm = (three - matmul(Z, Y)) * 0.5
        Y, Z = matmul(Y, Tm), matmul(Tm, Z)
        if return_history:
            history.append(Y * root_tr)
    out = Y * root_tr
    return (out, history) if return_history else out


def upper_tri_vec(Y: Tensor, tol: float | None = None) -> Tensor:
    """Row-major upper triangle (diagonal included) of (B, C, C) -> (B, C(C+1)/2)."""
    C = Y.shape[-1]
    if Y.shape[-2] != C:
        raise ShapeError(f"upper_tri_vec expects square matrices, got {Y.shape}")
    if tol is None:
        tol = 1e-6 if Y.dtype == np.float64 else 1e-4
    scale = max(1.0, float(np.abs(Y.data).max(initial=0.0)))
    asym = float(np.abs(Y.data - np.swapaxes(Y.data, -1, -2)).max(initial=0.0))
    if asym > tol * scale:
        raise ContractError(f"upper_tri_vec: input asymmetric by {asym:.3g}")
    rows, cols = np.triu_indices(C)
    return Y[..., rows, cols]


class GapHead(Module):
    def __init__(self, channels: int, n_classes: int, rng: np.random.Generator):
        super().__init__()
        self.fc = Linear(channels, n_classes, rng)

    def features(self, M: Tensor) -> Tensor:
        return M.mean(axis=(2, 3))

    def forward(self, M: Tensor) -> Tensor:
        return gap_head(M, self.fc)


class CovPoolHead(Module):
    def __init__(self, channels: int, n_classes: int, rng: np.random.Generator, iterations: int = 5):
        super().__init__()
        self.iterations = iterations
        self.fc = Linear(channels * (channels + 1) // 2, n_classes, rng)

    def features(self, M: Tensor) -> Tensor:
        B, C, T, N = M.shape
        Sigma = cov_pool(M.reshape(B, C, T * N))
        return upper_tri_vec(newton_schulz_sqrt(Sigma, self.iterations))

    def forward(self, M: Tensor) -> Tensor:
        return self.fc(self.features(M))


# -- losses ------------------------------------------------------------------------


def _check_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    B, K = logits.shape
    labels = _check_labels(labels, K)
    onehot = np.zeros((B, K), dtype=logits.dtype)
    onehot[np.arange(B), labels] = 1.0
    return -(log_softmax(logits, axis=-1) * onehot).sum() * (1.0 / B)


def _logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    return ((x - m).exp().sum(axis=axis, keepdims=True)).log() + m


@dataclass
class DkdLoss:
    """Decoupled logit distillation weights.

    ``orientation="student_first"`` computes KL(P_student || P_teacher);
    ``"teacher_first"`` swaps the arguments.  ``tau_squared`` applies the
    usual tau^2 rescale of temperature-softened losses.
    """

    alpha: float = 1.0
    beta: float = 8.0
    temperature: float = 4.0
    orientation: str = "student_first"
    tau_squared: bool = True

    def __post_init__(self):
        if self.orientation not in ("student_first", "teacher_first"):
            raise ConfigError(f"unknown KL orientation {self.orientation!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    def __call__(self, student_logits, teacher_logits, labels) -> Tensor:
        return dkd_loss(student_logits, teacher_logits, labels, self)


def _decoupled_logs(logits: Tensor, labels: np.ndarray, tau: float):
    """log P_b (B, 2) and log P_m (B, K-1) at temperature tau."""
    B, K = logits.shape
    z = logits * (1.0 / tau)
    rows = np.arange(B)
    others = np.array([[c for c in range(K) if c != y] for y in labels], dtype=np.int64).reshape(B, K - 1)
    target = z[rows, labels].reshape(B, 1)
    non_target = z[rows[:, None], others]
    binary = concat([target, _logsumexp(non_target, axis=-1)], axis=-1)
    return log_softmax(binary, axis=-1), log_softmax(non_target, axis=-1)


def _kl(log_p: Tensor, log_q: Tensor) -> Tensor:
    p = log_p.exp()
    return (p * (log_p - log_q)).sum(axis=-1)


def dkd_loss(student_logits: Tensor, teacher_logits, labels, params: DkdLoss | None = None) -> Tensor:
    """alpha * KL(P_b^S || P_b^T) + beta * KL(P_m^S || P_m^T), batch-averaged."""
    params = params or DkdLoss()
    B, K = student_logits.shape
    if K < 2:
        raise ConfigError("decoupled distillation needs at least two classes")
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if teacher.shape != (B, K):
        raise ShapeError(f"teacher logits {teacher.shape} do not match student {(B, K)}")
    labels = _check_labels(labels, K)
    teacher = Tensor(teacher, dtype=student_logits.dtype)
    sb, sm = _decoupled_logs(student_logits, labels, params.temperature)
    tb, tm = _decoupled_logs(teacher, labels, params.temperature)
    if params.orientation == "student_first":
        kl_b, kl_m = _kl(sb, tb), _kl(sm, tm)
    else:
        kl_b, kl_m = _kl(tb, sb), _kl(tm, sm)
    loss = (kl_b * params.alpha + kl_m * params.beta).mean()
    if params.tau_squared:
        loss = loss * params.temperature ** 2
    return loss


def probabilities(logits: Tensor, tau: float = 1.0) -> np.ndarray:
    return softmax(logits * (1.0 / tau), axis=-1).data
