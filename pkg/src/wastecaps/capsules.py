"""Capsule layers: squash nonlinearity, primary capsules, agreement routing,
and the margin loss used to train class capsules.

A capsule is a vector-valued activation; its norm plays the role of a class
probability and its direction carries pose. Primary capsules are formed by
convolving a feature map and regrouping the output channels into vectors.
Class capsules combine per-capsule predictions with coupling coefficients
refined by routing-by-agreement; the routing loop is unrolled, so gradients
flow through every iteration.
"""

from __future__ import annotations

import numpy as np

from .layers import Conv2d, Module, he_uniform
from .tensor import ShapeError, Tensor, power, relu, softmax, sqrt as tsqrt

EPS = 1e-12


def squash(v: Tensor, axis: int = -1) -> Tensor:
    """Shrink vectors to norm ||v||^2 / (1 + ||v||^2), preserving direction.

    The norm in the denominator is epsilon-guarded so the zero vector maps
    to the zero vector with zero gradient instead of NaN.
    """
    norm_sq = (v * v).sum(axis=axis, keepdims=True)
    scale = norm_sq * power(norm_sq + 1.0, -1.0) * power(norm_sq + EPS, -0.5)
    return v * scale


def vector_norms(v: Tensor, axis: int = -1) -> Tensor:
    """Epsilon-guarded Euclidean norms along ``axis`` (differentiable at 0)."""
    return tsqrt((v * v).sum(axis=axis) + EPS)


class PrimaryCapsules(Module):
    """Convolution whose output channels are regrouped into capsule vectors.

    The conv produces num_channels * dim feature maps; each group of ``dim``
    consecutive channels at each spatial position becomes one capsule, so the
    layer emits num_channels * H' * W' capsules of length ``dim``, squashed.
    """

    def __init__(self, in_channels: int, num_channels: int, dim: int,
                 kernel_size: int, stride: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.num_channels = num_channels
        self.dim = dim
        self.conv = Conv2d(in_channels, num_channels * dim, kernel_size,
                           stride=stride, rng=rng)

    def forward(self, x):
        y = self.conv(x)
        n, _, h, w = y.shape
        y = y.reshape(n, self.num_channels, self.dim, h * w)
        y = y.transpose(0, 1, 3, 2).reshape(n, self.num_channels * h * w, self.dim)
        return squash(y)


def route(primary: Tensor, weights: Tensor, routing_iters: int,
          return_state: bool = False):
    """Routing-by-agreement from input capsules to class capsules.

    ``primary`` is (N, I, d_in); ``weights`` is (I, J, d_out, d_in). Each
    input capsule predicts every class capsule via its transform matrix;
    coupling coefficients start uniform (zero logits) and are sharpened by
    the agreement between predictions and the emerging output:

        c = softmax_j(b);  s_j = sum_i c_ij * u_hat_ij;  v_j = squash(s_j)
        b_ij += u_hat_ij . v_j   (skipped on the final iteration)

    Returns v of shape (N, J, d_out); with ``return_state`` also returns a
    dict with the per-iteration coupling arrays and final logits.
    """
    if routing_iters < 1:
        raise ValueError(f"routing_iters must be >= 1, got {routing_iters}")
    if primary.ndim != 3 or weights.ndim != 4 or \
            primary.shape[1] != weights.shape[0] or primary.shape[2] != weights.shape[3]:
        raise ShapeError("route", primary.shape, weights.shape)
    n, num_in, _ = primary.shape
    num_out = weights.shape[1]

    from .tensor import einsum  # local alias keeps the hot loop tidy

    u_hat = einsum("ijdk,nik->nijd", weights, primary)
    b = Tensor(np.zeros((n, num_in, num_out), dtype=u_hat.dtype))
    couplings = []
    v = None
    for it in range(routing_iters):
        c = softmax(b, axis=2)
        if return_state:
            couplings.append(c.data.copy())
        s = einsum("nij,nijd->njd", c, u_hat)
        v = squash(s)
        if it < routing_iters - 1:
            b = b + einsum("nijd,njd->nij", u_hat, v)
    if return_state:
        return v, {"couplings": couplings, "logits": b.data.copy()}
    return v


class ClassCapsules(Module):
    """Routing layer with a learned transform matrix per (input, class) pair."""

    def __init__(self, num_in: int, in_dim: int, num_classes: int, out_dim: int,
                 routing_iters: int = 3, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_in = num_in
        self.num_classes = num_classes
        self.routing_iters = routing_iters
        self.weights = Tensor(
            he_uniform(rng, (num_in, num_classes, out_dim, in_dim), in_dim),
            requires_grad=True,
        )

    def forward(self, primary, return_state: bool = False):
        return route(primary, self.weights, self.routing_iters, return_state)


def _check_one_hot(targets: np.ndarray):
    if targets.ndim != 2 or not np.all((targets == 0) | (targets == 1)) or \
            not np.all(targets.sum(axis=1) == 1):
        raise ValueError("targets must be one-hot rows")


def margin_loss(v: Tensor, targets, m_plus: float = 0.9, m_minus: float = 0.1,
                lam: float = 0.5) -> Tensor:
    """Hinge-squared loss on capsule norms, averaged over the batch.

    The target class is pushed above ``m_plus`` and every other class below
    ``m_minus``; violations on absent classes are down-weighted by ``lam``.
    """
    t = targets if isinstance(targets, Tensor) else Tensor(np.asarray(targets))
    _check_one_hot(t.data)
    if v.ndim != 3 or v.shape[:2] != t.shape:
        raise ShapeError("margin_loss", v.shape, t.shape)
    norms = vector_norms(v)
    present = relu(m_plus - norms) ** 2
    absent = relu(norms - m_minus) ** 2
    per_sample = (t * present + (1.0 - t) * absent * lam).sum(axis=1)
    return per_sample.mean()


def capsule_predict(v: Tensor) -> np.ndarray:
    """Predicted class per sample: the capsule with the largest norm.

    Ties resolve to the lowest class index (argmax convention).
    """
    data = v.data if isinstance(v, Tensor) else np.asarray(v)
    norms = np.sqrt((data * data).sum(axis=-1))
    return norms.argmax(axis=1)
