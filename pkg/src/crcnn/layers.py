"""Parameterized layers, loss primitives and the SGD optimizer."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOG_EPS = 1e-7


class Parameter(Tensor):
    """A leaf tensor that always requires a gradient."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Container that enumerates parameters in attribute-definition order.

    The enumeration order is canonical: checkpoints are written and read in
    it, so renaming or reordering attributes changes the file layout.
    """

    training = True

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad: int | None = None, bias: bool = True):
        self.weight = Parameter(he_uniform(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Parameter(np.zeros(cout, np.float32)) if bias else None
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Deconv2d(Module):
    """Transposed convolution with kernel equal to stride (exact upsampling)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, k: int = 2, stride: int = 2):
        self.weight = Parameter(he_uniform(rng, (cin, cout, k, k), cin))
        self.bias = Parameter(np.zeros(cout, np.float32))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return T.deconv2d(x, self.weight, self.bias, self.stride)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator, scale: float | None = None):
        if scale is None:
            w = he_uniform(rng, (fin, fout), fin)
        else:
            w = (rng.standard_normal((fin, fout)) * scale).astype(np.float32)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(fout, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class ChannelAffine(Module):
    """Per-channel scale and shift of an NCHW map."""

    def __init__(self, channels: int, scale: float = 1.0):
        self.scale = Parameter(np.full((1, channels, 1, 1), scale, np.float32))
        self.shift = Parameter(np.zeros((1, channels, 1, 1), np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.scale + self.shift


class ConstraintViolation(AssertionError):
    """The constrained kernels are off the projection manifold."""


class ConstrainedConv2d(Module):
    """Convolution whose kernels predict each pixel from its neighbours.

    Every kernel slice has its centre fixed at -1 and its remaining taps
    summing to 1, so constant regions produce zero response and the output is
    a prediction residual. :meth:`project` must run after each weight update.

    Parameters
    ----------
    cin, cout : int
        Input and output channel counts.
    k : int
        Odd kernel size (5 by default).
    joint : bool
        Normalise the non-centre taps over all input channels of a kernel
        together instead of per kernel-channel slice.
    """

    NORM_TOL = 2e-6

    def __init__(self, cin: int = 3, cout: int = 3, rng: np.random.Generator | None = None,
                 k: int = 5, joint: bool = False):
        if k % 2 == 0:
            raise ValueError("constrained kernel size must be odd")
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.k = k
        self.joint = joint
        self.weight = Parameter(self._init((cout, cin, k, k)))
        self.project()

    def _init(self, shape) -> np.ndarray:
        return self.rng.uniform(0.0, 1.0, size=shape).astype(np.float32)

    def _center_mask(self) -> np.ndarray:
        m = np.zeros((self.k, self.k), bool)
        m[self.k // 2, self.k // 2] = True
        return m

    def project(self) -> None:
        """Map the kernels back onto the constraint set in place."""
        w = self.weight.data
        c = self.k // 2
        center = self._center_mask()
        slices = [w[i] for i in range(w.shape[0])] if self.joint else [
            w[i, j] for i in range(w.shape[0]) for j in range(w.shape[1])]
        for idx, s in enumerate(slices):
            for _attempt in range(10):
                s[..., c, c] = 0
                total = float(s.astype(np.float64).sum())
                if abs(total) >= 1e-8:
                    break
                logger.warning("degenerate constrained slice %d re-initialised", idx)
                s[...] = self._init(s.shape)
            if abs(total - 1.0) > self.NORM_TOL:
                s[...] = (s.astype(np.float64) / total).astype(s.dtype)
                self._absorb_rounding(s, center)
            s[..., center] = -1

    def _absorb_rounding(self, s: np.ndarray, center: np.ndarray) -> None:
        # low-precision storage leaves a residual proportional to tap magnitude;
        # the smallest tap has the finest resolution to absorb it
        flat = s.reshape(-1)
        off = np.nonzero(~np.broadcast_to(center, s.shape).reshape(-1))[0]
        for _ in range(4):
            resid = 1.0 - float(flat.astype(np.float64).sum())
            if abs(resid) <= self.NORM_TOL / 4:
                return
            j = off[np.argmin(np.abs(flat[off].astype(np.float64) + resid))]
            flat[j] = flat[j] + resid

    def check(self, tol: float = 1e-5) -> None:
        """Raise :class:`ConstraintViolation` when a slice is off the manifold."""
        w = self.weight.data.astype(np.float64)
        c = self.k // 2
        if not np.all(w[:, :, c, c] == -1):
            raise ConstraintViolation("constrained kernel centre differs from -1")
        axes = (1, 2, 3) if self.joint else (2, 3)
        sums = w.sum(axis=axes) - (w[:, :, c, c].sum(axis=1) if self.joint else w[:, :, c, c])
        if np.max(np.abs(sums - 1.0)) > tol:
            raise ConstraintViolation(
                f"constrained non-centre sum off by {np.max(np.abs(sums - 1.0)):.3g}")

    def forward(self, image: Tensor) -> Tensor:
        if T._DEBUG:
            self.check()
        return T.conv2d(image, self.weight, None, stride=1, pad=self.k // 2)


class CBAM(Module):
    """Channel then spatial attention, each a sigmoid map multiplied in."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 8, spatial_k: int = 7):
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)
        self.spatial = Conv2d(2, 1, spatial_k, rng)

    def _mlp(self, v: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(v)))

    def attention_maps(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        n, c = x.shape[:2]
        avg = T.reshape(T.global_avg_pool(x), (n, c))
        mx = T.reshape(T.global_max_pool(x), (n, c))
        ch = T.sigmoid(self._mlp(avg) + self._mlp(mx))
        y = x * T.reshape(ch, (n, c, 1, 1))
        pooled = T.concat([T.mean(y, axis=1, keepdims=True), T.max(y, axis=1, keepdims=True)], axis=1)
        sp = T.sigmoid(self.spatial(pooled))
        return ch, sp, y * sp

    def forward(self, x: Tensor) -> Tensor:
        return self.attention_maps(x)[2]


# -- losses --------------------------------------------------------------------
class LossError(ValueError):
    pass


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise LossError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if n == 0:
        raise LossError("softmax_cross_entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise LossError(f"label out of range [0, {c})")
    x = logits.data
    z = x - x.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1
        return (d * (g / n),)

    return T._make(np.asarray(loss, dtype=x.dtype), (logits,), bw)


def smooth_l1(pred: Tensor, target, inside_weights=None) -> Tensor:
    """Sum of Huber(beta=1) terms; the caller normalises by its own count."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise LossError(f"smooth_l1 shape mismatch: {pred.shape} vs {target.shape}")
    w = np.ones_like(target) if inside_weights is None else np.asarray(inside_weights, pred.dtype)
    d = (pred.data - target) * w
    a = np.abs(d)
    small = a < 1
    loss = np.where(small, 0.5 * d * d, a - 0.5).sum()
    grad = np.where(small, d, np.sign(d)) * w
    return T._make(np.asarray(loss, dtype=pred.dtype), (pred,), lambda g: (g * grad,))


def mask_bce(pred_mask: Tensor, gt_mask) -> Tensor:
    """Mean binary cross-entropy of softmaxed [N,2,h,w] maps against {0,1} targets."""
    y = np.asarray(gt_mask.data if isinstance(gt_mask, Tensor) else gt_mask)
    if not np.all((y == 0) | (y == 1)):
        raise LossError("mask ground truth must be binary")
    if pred_mask.shape[0] != y.shape[0] or pred_mask.shape[2:] != y.shape[1:]:
        raise LossError(f"mask shapes differ: {pred_mask.shape} vs {y.shape}")
    p = pred_mask.data
    y = y.astype(p.dtype)
    count = y.size
    p0 = np.clip(p[:, 0], LOG_EPS, 1 - LOG_EPS)
    p1 = np.clip(p[:, 1], LOG_EPS, 1 - LOG_EPS)
    loss = -(y * np.log(p1) + (1 - y) * np.log(p0)).sum() / count

    def bw(g):
        d = np.zeros_like(p)
        inside0 = (p[:, 0] > LOG_EPS) & (p[:, 0] < 1 - LOG_EPS)
        inside1 = (p[:, 1] > LOG_EPS) & (p[:, 1] < 1 - LOG_EPS)
        d[:, 1] = -y / p1 * inside1
        d[:, 0] = -(1 - y) / p0 * inside0
        return (d * (g / count),)

    return T._make(np.asarray(loss, dtype=p.dtype), (pred_mask,), bw)


@dataclass
class LossBundle:
    """Named loss components of one step.

    ``total`` recomputes stage-1 and overall sums from the four parts.
    """

    rpn_cls: Tensor
    rpn_reg: Tensor
    cls_pred: Tensor
    bbox_pred: Tensor
    mask: Tensor
    extras: dict = field(default_factory=dict)

    @property
    def rpn(self) -> Tensor:
        return self.rpn_cls + self.rpn_reg

    @property
    def stage1(self) -> Tensor:
        return self.rpn + self.cls_pred + self.bbox_pred

    def components(self) -> dict[str, float]:
        rpn = float(self.rpn_cls.data) + float(self.rpn_reg.data)
        return {
            "L_RPN-A": rpn,
            "L_cls_pred": float(self.cls_pred.data),
            "L_bbox_pred": float(self.bbox_pred.data),
            "L_Stage-2": float(self.mask.data),
        }


class SGD:
    """Momentum SGD with global gradient-norm clipping.

    ``post_step`` hooks run after every update; the constrained layer's
    projection is registered there so it is part of each step.
    """

    def __init__(self, params, lr: float = 1e-3, momentum: float = 0.9,
                 weight_decay: float = 0.0, clip_norm: float | None = 10.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.post_step = []

    def grad_norm(self) -> float:
        sq = 0.0
        for p in self.params:
            if p.grad is not None:
                sq += float(np.sum(p.grad.astype(np.float64) ** 2))
        return float(np.sqrt(sq))

    def step(self) -> float:
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                g = self.weight_decay * p.data
            else:
                g = p.grad * scale + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= (self.lr * v).astype(p.dtype)
        for hook in self.post_step:
            hook()
        return norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
