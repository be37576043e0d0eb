"""Reverse-mode automatic differentiation on numpy float64 arrays.

A Tensor wraps a value and a closure that routes an incoming gradient to
its parents; backward() walks the tape in reverse topological order. The
op set is exactly what the detector needs: broadcasting arithmetic,
matmul, relu, log, clip, sum, reshape, softmax, a 3x3 same-padding
convolution, 2x2 ceil-mode max pooling, and RoI max pooling.

Everything stays float64 so finite-difference checks are meaningful and
training runs are bit-reproducible across machines.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def backward(self) -> None:
        if self.value.size != 1:
            raise ArgumentError("backward() needs a scalar loss")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # --- arithmetic ---

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value + other.value,
                     self.requires_grad or other.requires_grad, (self, other))

        def bw(g):
            if self.requires_grad or self._parents:
                self._accumulate(_unbroadcast(g, self.value.shape))
            if other.requires_grad or other._parents:
                other._accumulate(_unbroadcast(g, other.value.shape))
        out._backward = bw
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value * other.value,
                     self.requires_grad or other.requires_grad, (self, other))

        def bw(g):
            if self.requires_grad or self._parents:
                self._accumulate(_unbroadcast(g * other.value, self.value.shape))
            if other.requires_grad or other._parents:
                other._accumulate(_unbroadcast(g * self.value, other.value.shape))
        out._backward = bw
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __matmul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value @ other.value,
                     self.requires_grad or other.requires_grad, (self, other))

        def bw(g):
            if self.requires_grad or self._parents:
                self._accumulate(g @ other.value.T)
            if other.requires_grad or other._parents:
                other._accumulate(self.value.T @ g)
        out._backward = bw
        return out

    # --- elementwise ---

    def relu(self):
        out = Tensor(np.maximum(self.value, 0.0), self.requires_grad, (self,))

        def bw(g):
            self._accumulate(g * (self.value > 0.0))
        out._backward = bw
        return out

    def log(self):
        out = Tensor(np.log(self.value), self.requires_grad, (self,))

        def bw(g):
            self._accumulate(g / self.value)
        out._backward = bw
        return out

    def clip(self, lo: float, hi: float):
        out = Tensor(np.clip(self.value, lo, hi), self.requires_grad, (self,))
        inside = (self.value >= lo) & (self.value <= hi)

        def bw(g):
            self._accumulate(g * inside)
        out._backward = bw
        return out

    # --- shape / reduction ---

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.value.sum(axis=axis, keepdims=keepdims),
                     self.requires_grad, (self,))

        def bw(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.value.shape).copy())
            else:
                gx = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gx, self.value.shape).copy())
        out._backward = bw
        return out

    def reshape(self, *shape):
        out = Tensor(self.value.reshape(*shape), self.requires_grad, (self,))

        def bw(g):
            self._accumulate(g.reshape(self.value.shape))
        out._backward = bw
        return out

    def softmax(self, axis: int):
        shifted = self.value - self.value.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)
        out = Tensor(y, self.requires_grad, (self,))

        def bw(g):
            inner = (g * y).sum(axis=axis, keepdims=True)
            self._accumulate((g - inner) * y)
        out._backward = bw
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value: np.ndarray) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)


# --- structured ops --------------------------------------------------------

def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padding 3x3 convolution, x: (Ci, W, H), w: (Co, Ci, 3, 3), b: (Co,).

    Implemented as one matmul over the 9 shifted copies of the padded
    input; backward scatters through the same shifts.
    """
    ci, iw, ih = x.value.shape
    co = w.value.shape[0]
    if w.value.shape != (co, ci, 3, 3):
        raise ArgumentError(f"weight shape {w.value.shape} does not match input {x.value.shape}")
    padded = np.zeros((ci, iw + 2, ih + 2))
    padded[:, 1:-1, 1:-1] = x.value
    patches = np.empty((ci, 9, iw * ih))
    for dx in range(3):
        for dy in range(3):
            patches[:, dx * 3 + dy, :] = padded[:, dx:dx + iw, dy:dy + ih].reshape(ci, -1)
    pmat = patches.reshape(ci * 9, iw * ih)
    wmat = w.value.reshape(co, ci * 9)
    out_val = (wmat @ pmat).reshape(co, iw, ih) + b.value[:, None, None]
    out = Tensor(out_val, x.requires_grad or w.requires_grad or b.requires_grad,
                 (x, w, b))

    def bw(g):
        gmat = g.reshape(co, iw * ih)
        if w.requires_grad or w._parents:
            w._accumulate((gmat @ pmat.T).reshape(w.value.shape))
        if b.requires_grad or b._parents:
            b._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad or x._parents:
            dpatches = (wmat.T @ gmat).reshape(ci, 3, 3, iw, ih)
            dpad = np.zeros_like(padded)
            for dx in range(3):
                for dy in range(3):
                    dpad[:, dx:dx + iw, dy:dy + ih] += dpatches[:, dx, dy]
            x._accumulate(dpad[:, 1:-1, 1:-1])
    out._backward = bw
    return out


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd edges padded (ceil-mode output)."""
    c, iw, ih = x.value.shape
    ow, oh = (iw + 1) // 2, (ih + 1) // 2
    padded = np.full((c, ow * 2, oh * 2), -np.inf)
    padded[:, :iw, :ih] = x.value
    windows = padded.reshape(c, ow, 2, oh, 2).transpose(0, 1, 3, 2, 4).reshape(c, ow, oh, 4)
    arg = windows.argmax(axis=3)                      # first max wins on ties
    out_val = np.take_along_axis(windows, arg[..., None], axis=3)[..., 0]
    out = Tensor(out_val, x.requires_grad, (x,))

    def bw(g):
        dwin = np.zeros((c, ow, oh, 4))
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=3)
        dpad = dwin.reshape(c, ow, oh, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, ow * 2, oh * 2)
        x._accumulate(dpad[:, :iw, :ih])
    out._backward = bw
    return out


def _roi_cells(box, spatial_scale: float, fw: int, fh: int, pw: int, ph: int):
    """Feature-cell index ranges for each pooling cell of one box."""
    x1 = int(np.floor(box[0] * spatial_scale))
    y1 = int(np.floor(box[1] * spatial_scale))
    x2 = int(np.ceil(box[2] * spatial_scale))
    y2 = int(np.ceil(box[3] * spatial_scale))
    x1 = min(max(x1, 0), fw - 1)
    y1 = min(max(y1, 0), fh - 1)
    x2 = min(max(x2, x1 + 1), fw)
    y2 = min(max(y2, y1 + 1), fh)
    bw_, bh_ = x2 - x1, y2 - y1
    cells = []
    for i in range(pw):
        cx1 = x1 + (i * bw_) // pw
        cx2 = x1 + -((-(i + 1) * bw_) // pw)          # ceil division
        cx2 = max(cx2, cx1 + 1)
        for j in range(ph):
            cy1 = y1 + (j * bh_) // ph
            cy2 = y1 + -((-(j + 1) * bh_) // ph)
            cy2 = max(cy2, cy1 + 1)
            cells.append((cx1, cx2, cy1, cy2))
    return cells


def roi_max_pool(fmap: Tensor, boxes, spatial_scale: float, out_size: int = 4) -> Tensor:
    """Max-pool each box into (out_size, out_size) cells.

    fmap: (C, Wf, Hf); boxes: (B, 4) in original image coordinates.
    Returns (B, C * out_size * out_size), channel-major per box. Gradient
    routes to each cell's argmax feature entry.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    c, fw, fh = fmap.value.shape
    pp = out_size * out_size
    nb = boxes.shape[0]
    if nb == 0:
        raise ArgumentError("roi_max_pool needs at least one box")

    mask = np.zeros((nb, pp, fw * fh), dtype=bool)
    grid = np.arange(fw * fh).reshape(fw, fh)
    for bi, box in enumerate(boxes):
        for k, (cx1, cx2, cy1, cy2) in enumerate(
                _roi_cells(box, spatial_scale, fw, fh, out_size, out_size)):
            mask[bi, k, grid[cx1:cx2, cy1:cy2].ravel()] = True

    flat = fmap.value.reshape(c, fw * fh)
    masked = np.where(mask[:, None, :, :], flat[None, :, None, :], -np.inf)
    arg = masked.argmax(axis=3)                       # (B, C, PP), first max wins
    pooled = np.take_along_axis(masked, arg[..., None], axis=3)[..., 0]
    out = Tensor(pooled.reshape(nb, c * pp), fmap.requires_grad, (fmap,))

    def bw(g):
        gr = g.reshape(nb, c, pp)
        dflat = np.zeros_like(flat)
        ch = np.broadcast_to(np.arange(c)[None, :, None], arg.shape)
        np.add.at(dflat, (ch.ravel(), arg.ravel()), gr.ravel())
        fmap._accumulate(dflat.reshape(c, fw, fh))
    out._backward = bw
    return out
