"""A fixed-operator reverse-mode tape.

Only the handful of operators needed by the network family in
:mod:`metasampler.model` are supported. Each operator computes its forward
value eagerly and pushes a closure that propagates the adjoint back to its
inputs. ``Tape.backward`` replays the closures in reverse order.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Var:
    """A value on the tape together with its accumulated adjoint."""

    __slots__ = ("value", "grad", "_leaf_buffer")

    def __init__(self, value, grad_buffer=None):
        self.value = value
        # Parameter leaves write straight into a view of the flat gradient.
        self._leaf_buffer = grad_buffer
        self.grad = grad_buffer

    def accumulate(self, g):
        if self._leaf_buffer is not None:
            self._leaf_buffer += g
        elif self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g


class Tape:
    def __init__(self):
        self._backward = []

    def leaf(self, value, grad_buffer=None):
        return Var(value, grad_buffer)

    def constant(self, value):
        return Var(value)

    def backward(self, output, seed=1.0):
        output.grad = np.asarray(seed, dtype=float)
        for fn in reversed(self._backward):
            fn()

    # -- operators -----------------------------------------------------

    def matmul(self, x, w):
        out = Var(x.value @ w.value)

        def back():
            if out.grad is None:
                return
            w.accumulate(x.value.T @ out.grad)
            x.accumulate(out.grad @ w.value.T)

        self._backward.append(back)
        return out

    def add_bias(self, x, b, axis=-1):
        """Broadcast-add ``b`` along ``axis`` of ``x``."""
        shape = [1] * x.value.ndim
        shape[axis] = -1
        out = Var(x.value + b.value.reshape(shape))
        reduce_axes = tuple(i for i in range(x.value.ndim) if i != axis % x.value.ndim)

        def back():
            if out.grad is None:
                return
            x.accumulate(out.grad)
            b.accumulate(out.grad.sum(axis=reduce_axes))

        self._backward.append(back)
        return out

    def add(self, x, y):
        out = Var(x.value + y.value)

        def back():
            if out.grad is None:
                return
            x.accumulate(out.grad)
            y.accumulate(out.grad)

        self._backward.append(back)
        return out

    def relu(self, x):
        mask = x.value > 0
        out = Var(np.where(mask, x.value, 0.0))

        def back():
            if out.grad is None:
                return
            x.accumulate(np.where(mask, out.grad, 0.0))

        self._backward.append(back)
        return out

    def identity(self, x):
        return x

    def conv2d(self, x, w):
        """3x3 'same' convolution, stride 1.

        ``x`` is (N, C_in, H, W) and ``w`` is (C_out, C_in, 3, 3).
        """
        n, c_in, h, wd = x.value.shape
        c_out, _, kh, kw = w.value.shape
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x.value, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N, C, H, W, kh, kw
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c_in * kh * kw)
        wmat = w.value.reshape(c_out, -1)
        out_flat = cols @ wmat.T
        out = Var(out_flat.reshape(n, h, wd, c_out).transpose(0, 3, 1, 2))

        def back():
            if out.grad is None:
                return
            g = out.grad.transpose(0, 2, 3, 1).reshape(n * h * wd, c_out)
            w.accumulate((g.T @ cols).reshape(w.value.shape))
            dcols = (g @ wmat).reshape(n, h, wd, c_in, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            x.accumulate(dxp[:, :, ph:ph + h, pw:pw + wd])

        self._backward.append(back)
        return out

    def mean_pool(self, x):
        """Global average over the spatial axes of an (N, C, H, W) tensor."""
        n, c, h, wd = x.value.shape
        out = Var(x.value.mean(axis=(2, 3)))

        def back():
            if out.grad is None:
                return
            x.accumulate(np.broadcast_to(out.grad[:, :, None, None] / (h * wd), x.value.shape).copy())

        self._backward.append(back)
        return out

    def reshape(self, x, shape):
        orig = x.value.shape
        out = Var(x.value.reshape(shape))

        def back():
            if out.grad is None:
                return
            x.accumulate(out.grad.reshape(orig))

        self._backward.append(back)
        return out

    def softmax_xent(self, logits, labels):
        """Sum over the batch of -log softmax(logits)[label]."""
        z = logits.value
        m = z.max(axis=1, keepdims=True)
        shifted = z - m
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - lse
        idx = np.arange(z.shape[0])
        out = Var(-logp[idx, labels].sum())

        def back():
            p = np.exp(logp)
            p[idx, labels] -= 1.0
            logits.accumulate(out.grad * p)

        self._backward.append(back)
        return out

    def squared_error(self, pred, target):
        """Sum over the batch of 0.5 * (pred - target)^2 (unit-variance Gaussian)."""
        resid = pred.value.reshape(target.shape) - target
        out = Var(0.5 * float(resid @ resid))

        def back():
            pred.accumulate((out.grad * resid).reshape(pred.value.shape))

        self._backward.append(back)
        return out
