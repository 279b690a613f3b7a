"""Loss-function tuning on long-tail imbalanced data, desk scale.

The outer variable collects the knobs of the training loss for a linear
softmax classifier: per-class log-weights, per-class logit offsets, and a
log-regularization strength,

    x = [w_raw (C), offsets (C), reg_raw (1)],  d1 = 2C + 1.

The inner variable is the flattened classifier weight matrix W (C x p),
d2 = C * p. Per client the objectives are

    g_i(x, y) = mean_train exp(w_raw[c_j]) * CE(W phi_j + offsets, c_j)
                + (exp(reg_raw) / 2) * ||y||^2
    f_i(x, y) = mean_val CE(W phi_j, c_j)

so the lower level is the weighted, offset, regularized training loss and
the upper level is the plain validation loss. The explicit l2 term with
coefficient exp(reg_raw) > 0 keeps g strongly convex in y for every fixed
x, and exponential weight parameterization keeps all sample weights
positive. At x = 0 the training loss reduces to plain l2-regularized
logistic regression with unit coefficient.

Class imbalance follows an exponential long-tail decay: class c keeps
floor(base_count * mu^c) samples. Each client splits its data 80/20 into
train/validation once at construction; the split is fixed for the run.
Stochastic evaluations subsample the train split without replacement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidSpec
from ..rng import RngStream
from .base import BilevelProblem, SampleBatch


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(z))


@dataclass(frozen=True)
class _ClientData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray


@dataclass(frozen=True)
class LogisticTuneSpec:
    """Per-client datasets plus generation parameters."""

    clients: list
    classes: int
    features: int
    params: dict = field(default_factory=dict)


class LogisticTuneProblem(BilevelProblem):
    def __init__(self, spec: LogisticTuneSpec):
        for data in spec.clients:
            if not (np.all(np.isfinite(data.x_train))
                    and np.all(np.isfinite(data.x_val))):
                raise InvalidSpec("feature matrices must be finite")
        self.spec = spec
        self.n = len(spec.clients)
        self.classes = spec.classes
        self.features = spec.features
        self.d1 = 2 * spec.classes + 1
        self.d2 = spec.classes * spec.features

    # -- parameter unpacking -------------------------------------------------
    def _unpack_x(self, x: np.ndarray):
        c = self.classes
        return np.exp(x[:c]), x[c:2 * c], np.exp(x[2 * c])

    def _weight_matrix(self, y: np.ndarray) -> np.ndarray:
        return y.reshape(self.classes, self.features)

    def _train_slice(self, i: int, batch: SampleBatch | None):
        data = self.spec.clients[i]
        n_tr = data.x_train.shape[0]
        if batch is None or batch.size >= n_tr:
            return data.x_train, data.y_train
        gen = batch.stream().generator()
        idx = gen.choice(n_tr, size=batch.size, replace=False)
        idx.sort()
        return data.x_train[idx], data.y_train[idx]

    # -- lower level ------------------------------------------------------------
    def value_g(self, i, x, y, batch=None):
        self.check_dims(x, y)
        weights, offsets, reg = self._unpack_x(x)
        feats, labels = self._train_slice(i, batch)
        logits = feats @ self._weight_matrix(y).T + offsets
        ce = -_log_softmax(logits)[np.arange(len(labels)), labels]
        return float(np.mean(weights[labels] * ce)) + 0.5 * reg * float(y @ y)

    def grad_g_y(self, i, x, y, batch=None):
        self.check_dims(x, y)
        weights, offsets, reg = self._unpack_x(x)
        feats, labels = self._train_slice(i, batch)
        probs = _softmax(feats @ self._weight_matrix(y).T + offsets)
        resid = probs.copy()
        resid[np.arange(len(labels)), labels] -= 1.0
        wr = weights[labels][:, None] * resid
        grad_w = wr.T @ feats / len(labels)
        return grad_w.ravel() + reg * y

    def grad_g_x(self, i, x, y, batch=None):
        self.check_dims(x, y)
        weights, offsets, reg = self._unpack_x(x)
        feats, labels = self._train_slice(i, batch)
        m = len(labels)
        logits = feats @ self._weight_matrix(y).T + offsets
        logp = _log_softmax(logits)
        ce = -logp[np.arange(m), labels]
        probs = np.exp(logp)
        resid = probs.copy()
        resid[np.arange(m), labels] -= 1.0

        grad = np.zeros(self.d1)
        np.add.at(grad[: self.classes], labels, weights[labels] * ce)
        grad[: self.classes] /= m
        grad[self.classes:2 * self.classes] = \
            (weights[labels][:, None] * resid).sum(axis=0) / m
        grad[-1] = 0.5 * reg * float(y @ y)
        return grad

    def hess_yy_g(self, i, x, y, batch=None):
        self.check_dims(x, y)
        weights, offsets, reg = self._unpack_x(x)
        feats, labels = self._train_slice(i, batch)
        m = len(labels)
        probs = _softmax(feats @ self._weight_matrix(y).T + offsets)
        # S_j = diag(p_j) - p_j p_j^T, kron'd with phi_j phi_j^T per sample
        s_all = np.einsum("ja,ab->jab", probs, np.eye(self.classes)) \
            - np.einsum("ja,jb->jab", probs, probs)
        hess = np.einsum("j,jab,jk,jl->akbl", weights[labels], s_all,
                         feats, feats) / m
        hess = hess.reshape(self.d2, self.d2)
        hess = (hess + hess.T) / 2.0
        return hess + reg * np.eye(self.d2)

    def cross_xy_g_apply(self, i, x, y, v, batch=None):
        self.check_dims(x, y)
        weights, offsets, reg = self._unpack_x(x)
        feats, labels = self._train_slice(i, batch)
        m = len(labels)
        vmat = self._weight_matrix(np.asarray(v))
        probs = _softmax(feats @ self._weight_matrix(y).T + offsets)
        resid = probs.copy()
        resid[np.arange(m), labels] -= 1.0
        vphi = feats @ vmat.T                       # m x C, row j is V phi_j

        out = np.zeros(self.d1)
        per_sample = np.einsum("jc,jc->j", resid, vphi)
        np.add.at(out[: self.classes], labels, weights[labels] * per_sample)
        out[: self.classes] /= m
        # d(resid_j)/d offset_c' = S_j[:, c']; contract with V phi_j
        s_vphi = probs * (vphi - np.einsum("jc,jc->j", probs, vphi)[:, None])
        out[self.classes:2 * self.classes] = \
            (weights[labels][:, None] * s_vphi).sum(axis=0) / m
        out[-1] = reg * float(y @ np.asarray(v))
        return out

    # -- upper level ---------------------------------------------------------------
    def value_f(self, i, x, y, batch=None):
        self.check_dims(x, y)
        data = self.spec.clients[i]
        logits = data.x_val @ self._weight_matrix(y).T
        ce = -_log_softmax(logits)[np.arange(len(data.y_val)), data.y_val]
        return float(np.mean(ce))

    def grad_f_x(self, i, x, y, batch=None):
        self.check_dims(x, y)
        return np.zeros(self.d1)

    def grad_f_y(self, i, x, y, batch=None):
        self.check_dims(x, y)
        data = self.spec.clients[i]
        probs = _softmax(data.x_val @ self._weight_matrix(y).T)
        resid = probs.copy()
        resid[np.arange(len(data.y_val)), data.y_val] -= 1.0
        return (resid.T @ data.x_val / len(data.y_val)).ravel()


def _longtail_counts(base_count: int, mu: float, classes: int) -> list[int]:
    counts = [int(np.floor(base_count * mu ** c)) for c in range(classes)]
    for c, cnt in enumerate(counts):
        if cnt < 1:
            raise InvalidSpec(
                f"class {c} is empty after decay (mu={mu}, base={base_count})")
    return counts


def _split_by_class(feats: np.ndarray, labels: np.ndarray,
                    classes: int) -> _ClientData:
    tr_x, tr_y, va_x, va_y = [], [], [], []
    for c in range(classes):
        idx = np.flatnonzero(labels == c)
        n_val = len(idx) // 5
        cut = len(idx) - n_val
        tr_x.append(feats[idx[:cut]])
        tr_y.append(labels[idx[:cut]])
        va_x.append(feats[idx[cut:]])
        va_y.append(labels[idx[cut:]])
    return _ClientData(np.concatenate(tr_x), np.concatenate(tr_y),
                       np.concatenate(va_x), np.concatenate(va_y))


def make_logistic_tune(seed: int, n: int, clients_data=None,
                       imbalance_mu: float = 1.0, *, classes: int = 4,
                       features: int = 5, base_count: int = 100,
                       class_sep: float = 2.0) -> LogisticTuneProblem:
    """Build the loss-tuning problem on synthetic or supplied data.

    Without ``clients_data``, each client draws Gaussian blobs around
    shared class means with long-tail counts floor(base_count * mu^c),
    then splits 80/20 into train/validation per class. ``clients_data``
    may supply explicit per-client ``(features, labels)`` pairs instead;
    the same decay-free 80/20 split is applied.
    """
    if not (0.0 < imbalance_mu <= 1.0):
        raise InvalidSpec(f"imbalance_mu must be in (0, 1], got {imbalance_mu}")
    if classes < 2:
        raise InvalidSpec("need at least 2 classes")
    if n < 1:
        raise InvalidSpec("need at least 1 client")

    clients: list[_ClientData] = []
    if clients_data is not None:
        for feats, labels in clients_data:
            feats = np.asarray(feats, dtype=np.float64)
            labels = np.asarray(labels, dtype=np.int64)
            clients.append(_split_by_class(feats, labels, classes))
        params = {}
    else:
        gen = RngStream(seed, purpose="make-logistic").generator()
        means = class_sep * gen.standard_normal((classes, features))
        counts = _longtail_counts(base_count, imbalance_mu, classes)
        for _ in range(n):
            feats_parts, label_parts = [], []
            for c, cnt in enumerate(counts):
                feats_parts.append(means[c] + gen.standard_normal((cnt, features)))
                label_parts.append(np.full(cnt, c, dtype=np.int64))
            clients.append(_split_by_class(np.concatenate(feats_parts),
                                           np.concatenate(label_parts), classes))
        params = {"family": "logistic", "seed": seed, "n": n,
                  "imbalance_mu": imbalance_mu, "classes": classes,
                  "features": features, "base_count": base_count,
                  "class_sep": class_sep}

    return LogisticTuneProblem(
        LogisticTuneSpec(clients=clients, classes=classes, features=features,
                         params=params))
