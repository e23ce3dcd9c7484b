"""Differentiable building blocks with explicit forward/backward contracts.

Linear layers come in two flavours: a dense affine map, and its low-rank
replacement holding the cascaded factor pair. Attention is the standard
scaled dot-product form; a multi-head block keeps separate per-head Q/K/V
projections so ranks can later be assigned per matrix type.

Backward passes run off a single-use :class:`GradTape` captured during the
forward call. Gradients are exact analytic adjoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import as_matrix


@dataclass
class GradTape:
    """Cached activations for one backward pass; consumable exactly once."""

    op: object
    cache: dict
    used: bool = field(default=False)


def backward(tape: GradTape, grad_out):
    """Run the backward pass recorded on ``tape``.

    Returns ``(grad_in, grad_params)`` where ``grad_params`` maps parameter
    names to arrays (empty for parameter-free ops). ``grad_in`` is a tuple
    for multi-input ops such as attention.
    """
    if tape.used:
        raise RuntimeError("gradient tape already consumed")
    tape.used = True
    grad_out = as_matrix(grad_out, "grad_out")
    if grad_out.shape != tape.cache["out_shape"]:
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{tape.cache['out_shape']}"
        )
    return tape.op._backward(tape.cache, grad_out)


def _check_bias(bias, c_out):
    if bias is None:
        return None
    b = np.asarray(bias, dtype=np.float64).reshape(-1)
    if b.shape[0] != c_out:
        raise ValueError(f"bias length {b.shape[0]} != output width {c_out}")
    if not np.isfinite(b).all():
        raise ValueError("bias contains non-finite entries")
    return b


class DenseLinear:
    """Affine map ``y = x @ weight + bias`` with weight C_in x C_out."""

    kind = "dense"

    def __init__(self, weight, bias=None):
        self.weight = as_matrix(weight, "weight")
        self.bias = _check_bias(bias, self.weight.shape[1])

    @property
    def c_in(self) -> int:
        return self.weight.shape[0]

    @property
    def c_out(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> "DenseLinear":
        return DenseLinear(self.weight.copy(),
                           None if self.bias is None else self.bias.copy())

    def forward(self, x) -> np.ndarray:
        x = as_matrix(x, "x")
        if x.shape[1] != self.c_in:
            raise ValueError(f"input width {x.shape[1]} != C_in {self.c_in}")
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y

    def forward_tape(self, x):
        y = self.forward(x)
        return y, GradTape(self, {"x": as_matrix(x, "x"), "out_shape": y.shape})

    def _backward(self, cache, grad_out):
        grad_in = grad_out @ self.weight.T
        grads = {"weight": cache["x"].T @ grad_out}
        if self.bias is not None:
            grads["bias"] = grad_out.sum(axis=0)
        return grad_in, grads

    def params(self) -> dict:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def param_count(self) -> int:
        return self.weight.size + (0 if self.bias is None else self.bias.size)

    def flops(self, rows: int) -> int:
        return 2 * rows * self.c_in * self.c_out


class LowRankLinear:
    """Cascaded pair ``y = (x @ w1) @ w2 + bias``; w1 is C_in x k, w2 is
    k x C_out. The weight parameter count is k*(C_in + C_out); the bias, when
    present, sits on the second factor's output."""

    kind = "lowrank"

    def __init__(self, w1, w2, bias=None):
        self.w1 = as_matrix(w1, "w1")
        self.w2 = as_matrix(w2, "w2")
        if self.w1.shape[1] != self.w2.shape[0]:
            raise ValueError(
                f"factor ranks disagree: w1 is {self.w1.shape}, w2 is {self.w2.shape}"
            )
        if self.k > min(self.c_in, self.c_out):
            raise ValueError(
                f"rank {self.k} exceeds min(C_in, C_out) = {min(self.c_in, self.c_out)}"
            )
        self.bias = _check_bias(bias, self.c_out)

    @property
    def k(self) -> int:
        return self.w1.shape[1]

    @property
    def c_in(self) -> int:
        return self.w1.shape[0]

    @property
    def c_out(self) -> int:
        return self.w2.shape[1]

    def copy(self) -> "LowRankLinear":
        return LowRankLinear(self.w1.copy(), self.w2.copy(),
                             None if self.bias is None else self.bias.copy())

    def forward(self, x) -> np.ndarray:
        x = as_matrix(x, "x")
        if x.shape[1] != self.c_in:
            raise ValueError(f"input width {x.shape[1]} != C_in {self.c_in}")
        y = (x @ self.w1) @ self.w2
        if self.bias is not None:
            y = y + self.bias
        return y

    def forward_tape(self, x):
        x = as_matrix(x, "x")
        if x.shape[1] != self.c_in:
            raise ValueError(f"input width {x.shape[1]} != C_in {self.c_in}")
        hidden = x @ self.w1
        y = hidden @ self.w2
        if self.bias is not None:
            y = y + self.bias
        return y, GradTape(self, {"x": x, "hidden": hidden, "out_shape": y.shape})

    def _backward(self, cache, grad_out):
        grad_hidden = grad_out @ self.w2.T
        grad_in = grad_hidden @ self.w1.T
        grads = {
            "w1": cache["x"].T @ grad_hidden,
            "w2": cache["hidden"].T @ grad_out,
        }
        if self.bias is not None:
            grads["bias"] = grad_out.sum(axis=0)
        return grad_in, grads

    def params(self) -> dict:
        out = {"w1": self.w1, "w2": self.w2}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def param_count(self) -> int:
        n = self.k * (self.c_in + self.c_out)
        return n + (0 if self.bias is None else self.bias.size)

    def flops(self, rows: int) -> int:
        return 2 * rows * self.k * (self.c_in + self.c_out)


def softmax_rows(a) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting each row's maximum."""
    a = as_matrix(a, "a")
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class _SoftmaxOp:
    def _backward(self, cache, grad_out):
        s = cache["s"]
        grad_in = s * (grad_out - np.sum(grad_out * s, axis=1, keepdims=True))
        return grad_in, {}


_SOFTMAX_OP = _SoftmaxOp()


def softmax_rows_tape(a):
    s = softmax_rows(a)
    return s, GradTape(_SOFTMAX_OP, {"s": s, "out_shape": s.shape})


def attention_forward(q, k, v) -> np.ndarray:
    """Scaled dot-product attention: softmax(q @ k.T / sqrt(d_k)) @ v."""
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    v = as_matrix(v, "v")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"q width {q.shape[1]} != k width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"k height {k.shape[0]} != v height {v.shape[0]}")
    scale = 1.0 / math.sqrt(q.shape[1])
    weights = softmax_rows((q @ k.T) * scale)
    return weights @ v


class _AttentionOp:
    def _backward(self, cache, grad_out):
        q, k, v, s, scale = (cache[n] for n in ("q", "k", "v", "s", "scale"))
        grad_v = s.T @ grad_out
        grad_s = grad_out @ v.T
        grad_z = s * (grad_s - np.sum(grad_s * s, axis=1, keepdims=True))
        grad_q = (grad_z @ k) * scale
        grad_k = (grad_z.T @ q) * scale
        return (grad_q, grad_k, grad_v), {}


_ATTENTION_OP = _AttentionOp()


def attention_forward_tape(q, k, v):
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    v = as_matrix(v, "v")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"q width {q.shape[1]} != k width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"k height {k.shape[0]} != v height {v.shape[0]}")
    scale = 1.0 / math.sqrt(q.shape[1])
    s = softmax_rows((q @ k.T) * scale)
    y = s @ v
    cache = {"q": q, "k": k, "v": v, "s": s, "scale": scale, "out_shape": y.shape}
    return y, GradTape(_ATTENTION_OP, cache)


@dataclass
class AttentionHead:
    """Per-head Q/K/V projections; dense or low-rank independently."""

    wq: object
    wk: object
    wv: object

    def copy(self) -> "AttentionHead":
        return AttentionHead(self.wq.copy(), self.wk.copy(), self.wv.copy())


class MhsaBlock:
    """Multi-head self-attention: per-head attention over projected inputs,
    outputs concatenated and mixed by the output projection ``wo``."""

    def __init__(self, heads, wo):
        heads = list(heads)
        if not heads:
            raise ValueError("need at least one head")
        d_k = heads[0].wq.c_out
        d_v = heads[0].wv.c_out
        d_model = heads[0].wq.c_in
        for i, h in enumerate(heads):
            if h.wq.c_out != d_k or h.wk.c_out != d_k:
                raise ValueError(f"head {i} disagrees on d_k")
            if h.wv.c_out != d_v:
                raise ValueError(f"head {i} disagrees on d_v")
            if h.wq.c_in != d_model or h.wk.c_in != d_model or h.wv.c_in != d_model:
                raise ValueError(f"head {i} disagrees on d_model")
        if wo.c_in != len(heads) * d_v:
            raise ValueError(
                f"wo input width {wo.c_in} != heads*d_v {len(heads) * d_v}"
            )
        self.heads = heads
        self.wo = wo

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def d_k(self) -> int:
        return self.heads[0].wq.c_out

    @property
    def d_v(self) -> int:
        return self.heads[0].wv.c_out

    def copy(self) -> "MhsaBlock":
        return MhsaBlock([h.copy() for h in self.heads], self.wo.copy())

    def forward(self, x) -> np.ndarray:
        outs = [
            attention_forward(h.wq.forward(x), h.wk.forward(x), h.wv.forward(x))
            for h in self.heads
        ]
        return self.wo.forward(np.hstack(outs))

    def forward_tape(self, x):
        head_tapes = []
        outs = []
        for h in self.heads:
            q, tq = h.wq.forward_tape(x)
            k, tk = h.wk.forward_tape(x)
            v, tv = h.wv.forward_tape(x)
            out, ta = attention_forward_tape(q, k, v)
            head_tapes.append((tq, tk, tv, ta))
            outs.append(out)
        y, to = self.wo.forward_tape(np.hstack(outs))
        cache = {"head_tapes": head_tapes, "wo_tape": to, "out_shape": y.shape}
        return y, GradTape(self, cache)

    def _backward(self, cache, grad_out):
        grad_concat, wo_grads = backward(cache["wo_tape"], grad_out)
        grads = {f"wo.{n}": g for n, g in wo_grads.items()}
        grad_x = None
        d_v = self.d_v
        for i, (tq, tk, tv, ta) in enumerate(cache["head_tapes"]):
            slice_grad = grad_concat[:, i * d_v:(i + 1) * d_v]
            (gq, gk, gv), _ = backward(ta, slice_grad)
            gx_q, q_grads = backward(tq, gq)
            gx_k, k_grads = backward(tk, gk)
            gx_v, v_grads = backward(tv, gv)
            for n, g in q_grads.items():
                grads[f"heads.{i}.wq.{n}"] = g
            for n, g in k_grads.items():
                grads[f"heads.{i}.wk.{n}"] = g
            for n, g in v_grads.items():
                grads[f"heads.{i}.wv.{n}"] = g
            part = gx_q + gx_k + gx_v
            grad_x = part if grad_x is None else grad_x + part
        return grad_x, grads

    def params(self) -> dict:
        out = {}
        for i, h in enumerate(self.heads):
            for pname, proj in (("wq", h.wq), ("wk", h.wk), ("wv", h.wv)):
                for n, arr in proj.params().items():
                    out[f"heads.{i}.{pname}.{n}"] = arr
        for n, arr in self.wo.params().items():
            out[f"wo.{n}"] = arr
        return out

    def param_count(self) -> int:
        total = self.wo.param_count()
        for h in self.heads:
            total += h.wq.param_count() + h.wk.param_count() + h.wv.param_count()
        return total


def mhsa_forward(x, block: MhsaBlock) -> np.ndarray:
    return block.forward(x)
