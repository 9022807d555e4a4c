"""Loss functions returning ``(value, gradient)`` pairs."""
import numpy as np

from ..errors import ShapeError

N_CLASSES = 3


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _shifted_lse(logits):
    """Max-shifted logits ``z`` and ``log(sum(exp(z)))``.

    The max entry contributes exactly 1 to the sum, so the log is taken as
    ``log1p`` of the remaining terms; this keeps full relative precision when
    one class dominates.
    """
    k = np.argmax(logits, axis=-1)[..., None]
    z = logits - np.take_along_axis(logits, k, axis=-1)
    e = np.exp(z)
    np.put_along_axis(e, k, 0.0, axis=-1)
    return z, np.log1p(e.sum(axis=-1))


def log_softmax(logits):
    z, lse = _shifted_lse(logits)
    return z - lse[..., None]


def softmax_xent(logits, labels, class_weights=None):
    """Class-weighted cross-entropy averaged over the batch.

    ``L = (1/B) * sum_b w[y_b] * -log softmax(logits_b)[y_b]``. Returns the
    loss and its gradient with respect to ``logits``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in 0..{k - 1}")
    w = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    B = logits.shape[0]
    if B == 0:
        return 0.0, np.zeros_like(logits)
    labels = labels.astype(np.int64)
    logp = log_softmax(logits)
    rows = np.arange(B)
    wy = w[labels]
    loss = float(np.sum(wy * -logp[rows, labels]) / B)
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad *= (wy / B)[:, None]
    return loss, grad


def softmax_xent_terms(logits, labels, class_weights=None):
    """Additive pieces of ``softmax_xent``: their sum is the loss.

    Each row contributes ``w[y] * logsumexp(z) / B`` and ``-w[y] * z[y] / B``
    with ``z`` the max-shifted logits. Differencing these pieces one by one
    avoids cancelling two nearly equal totals.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    k = logits.shape[1]
    w = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    B = logits.shape[0]
    if B == 0:
        return np.zeros(0)
    z, lse = _shifted_lse(logits)
    wy = w[labels] / B
    return np.concatenate([wy * lse, -wy * z[np.arange(B), labels]])


def mse_terms(x, xhat):
    """Per-element pieces of ``mse``: their sum is the loss."""
    d = (np.asarray(xhat, dtype=np.float64) - np.asarray(x, dtype=np.float64)).ravel()
    return d * d / d.size


def mse(x, xhat):
    """Mean squared error over every element; gradient is w.r.t. ``xhat``."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ShapeError(f"mse shapes differ: {x.shape} vs {xhat.shape}")
    d = xhat - x
    n = d.size
    return float(np.sum(d * d) / n), d * (2.0 / n)
