"""
Primitive ops. Each op is a pair of dtype-agnostic numpy kernels
(`forward(ctx, *arrays, **attrs)` / `backward(ctx, grad)`); `forward_op`
wraps them for Tensors and records them on the active tape, if any.
"""
from typing import Dict, Optional, Sequence, Tuple, Type

import numpy as np

from app.engine.tensor import Context, Tensor, active_tape
from app.errors import NonFiniteError, ShapeMismatchError, UnknownOpError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

OPS: Dict[str, Type["Op"]] = {}


def register(name: str):
    def wrap(cls):
        cls.name = name
        OPS[name] = cls
        return cls

    return wrap


class Op:
    name = "op"

    @staticmethod
    def forward(ctx: Context, *arrays: np.ndarray, **attrs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


def _expect(cond: bool, msg: str):
    if not cond:
        raise ShapeMismatchError(msg)


# --- convolution -----------------------------------------------------------

def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def _col2im(dcols: np.ndarray, x_shape, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x_shape
    _, _, kh, kw, ho, wo = dcols.shape
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + w]
    return dxp


@register("conv2d")
class Conv2d(Op):
    @staticmethod
    def forward(ctx, x, w, b, stride: int = 1, padding: int = 0):
        _expect(x.ndim == 4 and w.ndim == 4, f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
        _expect(x.shape[1] == w.shape[1], f"conv2d input channels {x.shape[1]} != weight channels {w.shape[1]}")
        _expect(b.shape == (w.shape[0],), f"conv2d bias shape {b.shape} != ({w.shape[0]},)")
        _expect(stride >= 1 and padding >= 0, "conv2d needs stride >= 1 and padding >= 0")
        kh, kw = w.shape[2], w.shape[3]
        ho = _conv_out(x.shape[2], kh, stride, padding)
        wo = _conv_out(x.shape[3], kw, stride, padding)
        _expect(ho >= 1 and wo >= 1, f"conv2d kernel {kh}x{kw} does not fit input {x.shape[2:]}")
        cols = _im2col(x, kh, kw, stride, padding)
        out = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3]))
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None]
        ctx.save(cols=cols, w=w, x_shape=x.shape, stride=stride, padding=padding)
        return out

    @staticmethod
    def backward(ctx, grad):
        cols, w = ctx["cols"], ctx["w"]
        db = grad.sum(axis=(0, 2, 3))
        dw = np.tensordot(grad, cols, axes=([0, 2, 3], [0, 4, 5]))
        dcols = np.tensordot(grad, w, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        dx = _col2im(np.ascontiguousarray(dcols), ctx["x_shape"], ctx["stride"], ctx["padding"])
        return dx, dw, db


@register("dense")
class Dense(Op):
    @staticmethod
    def forward(ctx, x, w, b):
        _expect(x.ndim == 2 and w.ndim == 2, f"dense expects 2-D input and weight, got {x.shape} and {w.shape}")
        _expect(x.shape[1] == w.shape[1], f"dense input width {x.shape[1]} != weight width {w.shape[1]}")
        _expect(b.shape == (w.shape[0],), f"dense bias shape {b.shape} != ({w.shape[0]},)")
        ctx.save(x=x, w=w)
        return x @ w.T + b

    @staticmethod
    def backward(ctx, grad):
        x, w = ctx["x"], ctx["w"]
        return grad @ w, grad.T @ x, grad.sum(axis=0)


@register("batchnorm")
class BatchNorm(Op):
    @staticmethod
    def forward(
        ctx,
        x,
        gamma,
        beta,
        running_mean: Optional[np.ndarray] = None,
        running_var: Optional[np.ndarray] = None,
        training: bool = False,
        update_stats: bool = True,
        momentum: float = BN_MOMENTUM,
        eps: float = BN_EPS,
    ):
        _expect(x.ndim in (2, 4), f"batchnorm expects 2-D or 4-D input, got {x.shape}")
        c = x.shape[1]
        _expect(gamma.shape == (c,) and beta.shape == (c,), f"batchnorm affine params must have shape ({c},)")
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)

        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if update_stats:
                _expect(running_mean is not None and running_var is not None, "batchnorm needs running buffers")
                running_mean[...] = (1.0 - momentum) * running_mean + momentum * mean
                running_var[...] = (1.0 - momentum) * running_var + momentum * var
        else:
            _expect(running_mean is not None and running_var is not None, "batchnorm eval needs running buffers")
            _expect(running_mean.shape == (c,) and running_var.shape == (c,), "running buffers must match channels")
            mean, var = running_mean, running_var

        inv_std = 1.0 / np.sqrt(var.astype(x.dtype) + eps)
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        ctx.save(xhat=xhat, inv_std=inv_std, gamma=gamma, axes=axes, bshape=bshape, training=training)
        return gamma.reshape(bshape) * xhat + beta.reshape(bshape)

    @staticmethod
    def backward(ctx, grad):
        xhat, inv_std, gamma = ctx["xhat"], ctx["inv_std"], ctx["gamma"]
        axes, bshape = ctx["axes"], ctx["bshape"]
        dgamma = (grad * xhat).sum(axis=axes)
        dbeta = grad.sum(axis=axes)
        dxhat = grad * gamma.reshape(bshape)
        if ctx["training"]:
            n = xhat.size // xhat.shape[1]
            dx = (inv_std.reshape(bshape) / n) * (
                n * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta


@register("relu")
class Relu(Op):
    @staticmethod
    def forward(ctx, x):
        positive = x > 0
        ctx.save(positive=positive)
        return np.where(positive, x, np.zeros_like(x))

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx["positive"],)


@register("maxpool2x2")
class MaxPool2x2(Op):
    @staticmethod
    def forward(ctx, x):
        _expect(x.ndim == 4, f"maxpool2x2 expects 4-D input, got {x.shape}")
        n, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        _expect(ho >= 1 and wo >= 1, f"maxpool2x2 needs spatial size >= 2, got {h}x{w}")
        patches = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
        patches = patches.reshape(n, c, ho, wo, 4)
        idx = patches.argmax(axis=-1)
        ctx.save(idx=idx, x_shape=x.shape)
        return np.take_along_axis(patches, idx[..., None], axis=-1)[..., 0]

    @staticmethod
    def backward(ctx, grad):
        idx = ctx["idx"]
        n, c, h, w = ctx["x_shape"]
        ho, wo = idx.shape[2], idx.shape[3]
        dpatch = np.zeros((n, c, ho, wo, 4), dtype=grad.dtype)
        np.put_along_axis(dpatch, idx[..., None], grad[..., None], axis=-1)
        dx_core = dpatch.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        if (2 * ho, 2 * wo) == (h, w):
            return (dx_core,)
        dx = np.zeros((n, c, h, w), dtype=grad.dtype)
        dx[:, :, :2 * ho, :2 * wo] = dx_core
        return (dx,)


@register("avgpool_global")
class AvgPoolGlobal(Op):
    @staticmethod
    def forward(ctx, x):
        _expect(x.ndim == 4, f"avgpool_global expects 4-D input, got {x.shape}")
        ctx.save(x_shape=x.shape)
        return x.mean(axis=(2, 3))

    @staticmethod
    def backward(ctx, grad):
        n, c, h, w = ctx["x_shape"]
        dx = np.broadcast_to(grad[:, :, None, None] / (h * w), (n, c, h, w))
        return (np.ascontiguousarray(dx),)


# --- losses ----------------------------------------------------------------

@register("softmax_crossentropy")
class SoftmaxCrossEntropy(Op):
    @staticmethod
    def forward(ctx, logits, labels):
        _expect(logits.ndim == 2, f"softmax_crossentropy expects (N, K) logits, got {logits.shape}")
        n, k = logits.shape
        classes = labels.reshape(-1).astype(np.int64)
        _expect(classes.shape == (n,), f"expected {n} labels, got {labels.shape}")
        _expect(bool(np.all((classes >= 0) & (classes < k))), f"labels must lie in [0, {k})")
        z = logits.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        loss = (lse - z[np.arange(n), classes]).mean()
        probs = np.exp(z - lse[:, None])
        ctx.save(probs=probs, classes=classes, dtype=logits.dtype)
        return np.asarray(loss, dtype=logits.dtype)

    @staticmethod
    def backward(ctx, grad):
        probs, classes = ctx["probs"], ctx["classes"]
        n = probs.shape[0]
        d = probs.copy()
        d[np.arange(n), classes] -= 1.0
        d *= float(grad) / n
        return d.astype(ctx["dtype"]), None


@register("mse")
class MeanSquaredError(Op):
    @staticmethod
    def forward(ctx, pred, target):
        _expect(pred.shape == target.shape, f"mse shapes differ: {pred.shape} vs {target.shape}")
        diff = pred.astype(np.float64) - target.astype(np.float64)
        ctx.save(diff=diff, dtype=pred.dtype)
        return np.asarray((diff * diff).mean(), dtype=pred.dtype)

    @staticmethod
    def backward(ctx, grad):
        diff = ctx["diff"]
        d = (2.0 * float(grad) / diff.size) * diff
        return d.astype(ctx["dtype"]), (-d).astype(ctx["dtype"])


@register("sigmoid_bce")
class SigmoidBinaryCrossEntropy(Op):
    @staticmethod
    def forward(ctx, logits, targets):
        _expect(logits.shape == targets.shape, f"sigmoid_bce shapes differ: {logits.shape} vs {targets.shape}")
        z = logits.astype(np.float64)
        y = targets.astype(np.float64)
        loss = (np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()
        ctx.save(z=z, y=y, dtype=logits.dtype)
        return np.asarray(loss, dtype=logits.dtype)

    @staticmethod
    def backward(ctx, grad):
        z, y = ctx["z"], ctx["y"]
        scale = float(grad) / z.size
        dz = (1.0 / (1.0 + np.exp(-z)) - y) * scale
        dy = -z * scale
        return dz.astype(ctx["dtype"]), dy.astype(ctx["dtype"])


LOSS_OPS = ("softmax_crossentropy", "mse", "sigmoid_bce")


# --- tensor entry point ----------------------------------------------------

def forward_op(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run primitive `op` on `inputs`.

    The op is recorded only inside an AutodiffTape block and only when some
    input requires grad; outside a tape the result is a constant.
    """
    cls = OPS.get(op)
    if cls is None:
        raise UnknownOpError(f"unknown op {op!r}; known ops: {sorted(OPS)}")
    for position, tensor in enumerate(inputs):
        if not np.all(np.isfinite(tensor.data)):
            raise NonFiniteError(f"{op}: input {position} holds non-finite values")

    ctx = Context()
    out = cls.forward(ctx, *(t.data for t in inputs), **attrs)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op}: produced non-finite output")

    tape = active_tape()
    requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=requires_grad)
    if requires_grad:
        tape.record(cls, ctx, inputs, result)
    return result


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return forward_op("conv2d", [x, w, b], stride=stride, padding=padding)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return forward_op("dense", [x, w, b])


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, **attrs) -> Tensor:
    return forward_op("batchnorm", [x, gamma, beta], **attrs)


def relu(x: Tensor) -> Tensor:
    return forward_op("relu", [x])


def maxpool2x2(x: Tensor) -> Tensor:
    return forward_op("maxpool2x2", [x])


def avgpool_global(x: Tensor) -> Tensor:
    return forward_op("avgpool_global", [x])


def loss(kind: str, pred: Tensor, target: Tensor) -> Tensor:
    if kind not in LOSS_OPS:
        raise UnknownOpError(f"unknown loss {kind!r}; known losses: {LOSS_OPS}")
    return forward_op(kind, [pred, target])
