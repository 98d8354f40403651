"""Minimal dense-array math with reverse-mode gradients.

Exactly the kernels the models need, on 64-bit floats throughout: 1-D
convolution, max pooling, pointwise pyramid pooling, dense layers, the
usual activations, inverted dropout, Adam, and a finite-difference
gradient checker. Convolutional ops take (batch, channels, length)
arrays; dense ops take (batch, features).

Graphs are built by the ops below; custom loss nodes can extend them by
constructing Tensor(value, parents, backward_fn) directly.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass
from typing import BinaryIO, Callable, Sequence

import numpy as np

CHECKPOINT_FORMAT = "trajseg-ckpt-v1"


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Build no graph inside this block; forward values only.

    Backward closures capture their output tensor, which forms a
    reference cycle the garbage collector is slow to notice under
    array-heavy workloads. Evaluation loops must run in this mode.
    """
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """A float64 array plus a lazy gradient buffer and a backward closure."""

    __slots__ = ("data", "_grad", "parents", "_backward_fn")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self._grad: np.ndarray | None = None
        self.parents = parents if _GRAD_ENABLED else ()
        self._backward_fn = backward_fn if _GRAD_ENABLED else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    @property
    def backward_fn(self) -> Callable[[], None] | None:
        return self._backward_fn

    @backward_fn.setter
    def backward_fn(self, fn: Callable[[], None] | None) -> None:
        # dropping the closure here keeps no_grad forwards cycle-free
        self._backward_fn = fn if _GRAD_ENABLED else None

    def zero_grad(self) -> None:
        self._grad = None

    def backward(self) -> None:
        """Reverse-mode accumulation from this scalar into all parents.

        Consumes the graph: closures and parent links are released as
        they are used, so each built graph supports one backward pass.
        """
        if self.data.size != 1:
            raise ValueError("backward() must start from a scalar")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn()
                node._backward_fn = None
            node.parents = ()


def _require_3d(x: Tensor, op: str) -> None:
    if x.data.ndim != 3:
        raise ValueError(f"{op} expects a (batch, channels, length) tensor")


def _im2col(xp: np.ndarray, ks: int, stride: int, l_out: int) -> np.ndarray:
    """Stack sliding windows: (B, C, Lp) -> (C*ks, B*l_out) copy."""
    b, c, _ = xp.shape
    s0, s1, s2 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (b, c, ks, l_out), (s0, s1, s2, s2 * stride)
    )
    # (C, ks, B, l_out) -> (C*ks, B*l_out); single big GEMM operand
    return np.ascontiguousarray(view.transpose(1, 2, 0, 3)).reshape(c * ks, b * l_out)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation along the last axis, with bias.

    x: (B, C_in, L); w: (C_out, C_in, ks); b: (C_out,).
    Output length L' = floor((L + 2*padding - ks) / stride) + 1.
    """
    _require_3d(x, "conv1d")
    if w.data.ndim != 3 or b.data.ndim != 1:
        raise ValueError("conv1d weights must be (C_out, C_in, ks), bias (C_out,)")
    batch, c_in, length = x.data.shape
    c_out, c_in_w, ks = w.data.shape
    if c_in_w != c_in or b.data.shape[0] != c_out:
        raise ValueError("conv1d channel mismatch")
    l_out = (length + 2 * padding - ks) // stride + 1
    if l_out < 1:
        raise ValueError("conv1d output would be empty")

    if padding:
        xp = np.zeros((batch, c_in, length + 2 * padding), dtype=np.float64)
        xp[:, :, padding : padding + length] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, ks, stride, l_out)
    w2 = w.data.reshape(c_out, c_in * ks)
    out_flat = w2 @ cols
    out_data = (
        out_flat.reshape(c_out, batch, l_out).transpose(1, 0, 2) + b.data[None, :, None]
    )
    result = Tensor(out_data, parents=(x, w, b))

    def _backward() -> None:
        d_y = result.grad
        b.grad += d_y.sum(axis=(0, 2))
        d_y2 = np.ascontiguousarray(d_y.transpose(1, 0, 2)).reshape(c_out, batch * l_out)
        # rebuild columns instead of caching them: trades a copy for memory
        cols_again = _im2col(xp, ks, stride, l_out)
        w.grad += (d_y2 @ cols_again.T).reshape(c_out, c_in, ks)
        d_cols = (w2.T @ d_y2).reshape(c_in, ks, batch, l_out).transpose(2, 0, 1, 3)
        d_xp = np.zeros_like(xp)
        for j in range(ks):
            d_xp[:, :, j : j + stride * l_out : stride] += d_cols[:, :, j, :]
        if padding:
            x.grad += d_xp[:, :, padding : padding + length]
        else:
            x.grad += d_xp

    result.backward_fn = _backward
    return result


def maxpool1d(x: Tensor, size: int, stride: int | None = None) -> Tensor:
    """Max pooling along the last axis; argmax positions route gradients."""
    _require_3d(x, "maxpool1d")
    if size < 1:
        raise ValueError("pool size must be >= 1")
    stride = size if stride is None else stride
    batch, chan, length = x.data.shape
    l_out = (length - size) // stride + 1
    if l_out < 1:
        raise ValueError("maxpool1d output would be empty")

    if stride == size and length % size == 0:
        resh = x.data.reshape(batch, chan, l_out, size)
        out_data = resh.max(axis=3)
        arg = resh.argmax(axis=3)
        result = Tensor(out_data, parents=(x,))

        def _backward_fast() -> None:
            d_x = np.zeros((batch, chan, l_out, size), dtype=np.float64)
            np.put_along_axis(d_x, arg[..., None], result.grad[..., None], axis=3)
            x.grad += d_x.reshape(batch, chan, length)

        result.backward_fn = _backward_fast
        return result

    s0, s1, s2 = x.data.strides
    view = np.lib.stride_tricks.as_strided(
        x.data, (batch, chan, l_out, size), (s0, s1, s2 * stride, s2)
    )
    out_data = view.max(axis=3)
    arg = view.argmax(axis=3)
    result = Tensor(out_data, parents=(x,))

    def _backward_general() -> None:
        # overlapping windows can hit one source position repeatedly, so
        # scatter-add via bincount on flattened indices
        pos = arg + stride * np.arange(l_out)[None, None, :]
        base = (
            np.arange(batch)[:, None, None] * (chan * length)
            + np.arange(chan)[None, :, None] * length
        )
        flat = (base + pos).ravel()
        added = np.bincount(flat, weights=result.grad.ravel(), minlength=batch * chan * length)
        x.grad += added.reshape(batch, chan, length)

    result.backward_fn = _backward_general
    return result


def ppp(x: Tensor, windows: Sequence[int]) -> Tensor:
    """Pointwise pyramid pooling: stride-1 max pools concatenated with x.

    Each window k produces a same-length pooled map (edge replication at
    the borders; k equal to the length reproduces the global max at
    every position). Output channels: C * (len(windows) + 1), with the
    input itself as the first block.
    """
    _require_3d(x, "ppp")
    batch, chan, length = x.data.shape
    blocks = [x.data]
    routes: list[tuple[str, np.ndarray, int, int]] = []
    for k in windows:
        if k < 1 or k > length:
            raise ValueError(f"ppp window {k} outside [1, {length}]")
        if k == length:
            arg = x.data.argmax(axis=2)
            blocks.append(
                np.broadcast_to(x.data.max(axis=2, keepdims=True), (batch, chan, length)).copy()
            )
            routes.append(("global", arg, 0, 0))
        else:
            left = (k - 1) // 2
            right = k - 1 - left
            xp = np.concatenate(
                [
                    np.repeat(x.data[:, :, :1], left, axis=2),
                    x.data,
                    np.repeat(x.data[:, :, -1:], right, axis=2),
                ],
                axis=2,
            )
            s0, s1, s2 = xp.strides
            view = np.lib.stride_tricks.as_strided(
                xp, (batch, chan, length, k), (s0, s1, s2, s2)
            )
            blocks.append(view.max(axis=3))
            routes.append(("slide", view.argmax(axis=3), left, k))
    result = Tensor(np.concatenate(blocks, axis=1), parents=(x,))

    def _backward() -> None:
        d_y = result.grad
        x.grad += d_y[:, :chan, :]
        for i, (kind, arg, left, k) in enumerate(routes):
            block = d_y[:, (i + 1) * chan : (i + 2) * chan, :]
            if kind == "global":
                sums = block.sum(axis=2)
                bgrid, cgrid = np.meshgrid(
                    np.arange(batch), np.arange(chan), indexing="ij"
                )
                np.add.at(x.grad, (bgrid, cgrid, arg), sums)
            else:
                l_pad = length + k - 1
                pos = arg + np.arange(length)[None, None, :]
                base = (
                    np.arange(batch)[:, None, None] * (chan * l_pad)
                    + np.arange(chan)[None, :, None] * l_pad
                )
                flat = (base + pos).ravel()
                d_xp = np.bincount(
                    flat, weights=block.ravel(), minlength=batch * chan * l_pad
                ).reshape(batch, chan, l_pad)
                core = d_xp[:, :, left : left + length].copy()
                core[:, :, 0] += d_xp[:, :, :left].sum(axis=2)
                core[:, :, -1] += d_xp[:, :, left + length :].sum(axis=2)
                x.grad += core

    result.backward_fn = _backward
    return result


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine layer: (B, F) @ (F, O) + (O,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError("dense expects x (B, F), w (F, O), b (O,)")
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ValueError("dense shape mismatch")
    result = Tensor(x.data @ w.data + b.data, parents=(x, w, b))

    def _backward() -> None:
        d_y = result.grad
        w.grad += x.data.T @ d_y
        b.grad += d_y.sum(axis=0)
        x.grad += d_y @ w.data.T

    result.backward_fn = _backward
    return result


def relu(x: Tensor) -> Tensor:
    result = Tensor(np.maximum(x.data, 0.0), parents=(x,))

    def _backward() -> None:
        x.grad += result.grad * (x.data > 0.0)

    result.backward_fn = _backward
    return result


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function."""
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    result = Tensor(out, parents=(x,))

    def _backward() -> None:
        x.grad += result.grad * result.data * (1.0 - result.data)

    result.backward_fn = _backward
    return result


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: scales by 1/(1-p) at train time, identity otherwise."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training dropout needs an rng")
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    result = Tensor(x.data * keep, parents=(x,))

    def _backward() -> None:
        x.grad += result.grad * keep

    result.backward_fn = _backward
    return result


def flatten(x: Tensor) -> Tensor:
    """Collapse all axes after the first: (B, ...) -> (B, F)."""
    if x.data.ndim < 2:
        raise ValueError("flatten expects at least 2 axes")
    batch = x.data.shape[0]
    result = Tensor(x.data.reshape(batch, -1), parents=(x,))

    def _backward() -> None:
        x.grad += result.grad.reshape(x.data.shape)

    result.backward_fn = _backward
    return result


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar (used to normalize batch losses)."""
    result = Tensor(x.data * factor, parents=(x,))

    def _backward() -> None:
        x.grad += result.grad * factor

    result.backward_fn = _backward
    return result


def hadamard(x: Tensor, mask: np.ndarray) -> Tensor:
    """Elementwise product with a constant array broadcastable into x's shape."""
    m = np.asarray(mask, dtype=np.float64)
    out = x.data * m
    if out.shape != x.data.shape:
        raise ValueError("hadamard mask must broadcast into x, not expand it")
    result = Tensor(out, parents=(x,))

    def _backward() -> None:
        x.grad += result.grad * m

    result.backward_fn = _backward
    return result


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar contraction sum(x * weights); the usual grad_check head."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.data.shape:
        raise ValueError("weighted_sum weights must match the input shape")
    result = Tensor(np.sum(x.data * w), parents=(x,))

    def _backward() -> None:
        x.grad += result.grad * w

    result.backward_fn = _backward
    return result


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform init in +-sqrt(6 / fan_in); variance 2/fan_in.

    Keeps activation scale roughly constant through relu layers, where
    glorot's 2/(fan_in+fan_out) shrinks it by ~0.58x per stage.
    """
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class AdamState:
    """Moment buffers and step counter for a fixed parameter list."""

    lr: float
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update from the accumulated gradients."""
    if len(params) != len(state.m):
        raise ValueError("parameter list does not match optimizer state")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of a finite-difference comparison."""

    max_rel_error: float
    n_checked: int

    def ok(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error <= tolerance


def grad_check(
    fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5
) -> GradCheckReport:
    """Compare analytic gradients of a scalar-valued fn to central differences.

    fn must be deterministic across calls (re-seed any randomness inside).
    Relative error uses max(1e-3, |analytic|, |numeric|) as denominator so
    near-zero gradients are compared on an absolute scale.
    """
    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    for t in inputs:
        t.zero_grad()
    out.backward()
    analytic = [t.grad.copy() for t in inputs]

    max_rel = 0.0
    n_checked = 0
    for t, a_grad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        a_flat = a_grad.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            with no_grad():
                flat[j] = orig + h
                f_plus = float(fn(*inputs).data)
                flat[j] = orig - h
                f_minus = float(fn(*inputs).data)
                flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(1e-3, abs(a_flat[j]), abs(numeric))
            max_rel = max(max_rel, abs(a_flat[j] - numeric) / denom)
            n_checked += 1
    return GradCheckReport(max_rel_error=max_rel, n_checked=n_checked)


def save_checkpoint(
    fp: BinaryIO, named_params: Sequence[tuple[str, np.ndarray]], meta: dict
) -> None:
    """Write a versioned, byte-deterministic parameter file.

    Layout: format line, one JSON meta line, then per parameter a JSON
    line {name, shape} followed by the little-endian float64 value
    bytes and a newline.
    """
    fp.write(CHECKPOINT_FORMAT.encode() + b"\n")
    header = dict(meta)
    header["n_params"] = len(named_params)
    fp.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
    for name, arr in named_params:
        desc = {"name": name, "shape": list(arr.shape)}
        fp.write(json.dumps(desc, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        fp.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fp.write(b"\n")


def load_checkpoint(fp: BinaryIO) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    """Read back a checkpoint; returns (meta, ordered named arrays)."""
    first = fp.readline().decode().rstrip("\n")
    if first != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {first!r}")
    meta = json.loads(fp.readline().decode())
    named: list[tuple[str, np.ndarray]] = []
    for _ in range(meta["n_params"]):
        desc = json.loads(fp.readline().decode())
        shape = tuple(desc["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = fp.read(count * 8)
        if len(raw) != count * 8:
            raise ValueError(f"checkpoint truncated in parameter {desc['name']!r}")
        if fp.read(1) != b"\n":
            raise ValueError(f"missing terminator after parameter {desc['name']!r}")
        named.append((desc["name"], np.frombuffer(raw, dtype="<f8").reshape(shape).copy()))
    return meta, named
