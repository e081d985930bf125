"""Minimal dense-network core: layers, activations, softmax cross-entropy,
Adam, finite-difference gradient checking, and the versioned binary
checkpoint format shared by the encoder and the policy.

Everything is float64 and functional: forward returns the activation cache,
backward consumes it, optimizer steps return new arrays.  Forward matmuls
route through _mm, which keeps per-row results independent of batch size
(batch-of-2 equals two single passes bit-exactly; see _mm).
"""

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import (BadLabel, CheckpointError, LengthMismatch, ShapeMismatch)

_ACTS = ("none", "relu", "tanh")


@dataclass(frozen=True)
class Net:
    specs: tuple            # ((fan_in, fan_out, activation), ...)
    params: np.ndarray      # flat float64, layer-major: W row-major, then b

    @property
    def in_dim(self):
        return self.specs[0][0]

    @property
    def out_dim(self):
        return self.specs[-1][1]


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _norm_specs(specs):
    out = []
    for fi, fo, act in specs:
        if act not in _ACTS:
            raise ShapeMismatch(f"unknown activation {act!r}")
        if fi < 1 or fo < 1:
            raise ShapeMismatch(f"bad layer dims ({fi}, {fo})")
        out.append((int(fi), int(fo), act))
    for k in range(1, len(out)):
        if out[k][0] != out[k - 1][1]:
            raise ShapeMismatch(f"layer {k} fan_in {out[k][0]} != previous fan_out {out[k - 1][1]}")
    return tuple(out)


def param_count(specs):
    return sum(fi * fo + fo for fi, fo, _ in specs)


def _offsets(specs):
    offs = []
    pos = 0
    for fi, fo, _ in specs:
        offs.append((pos, pos + fi * fo, pos + fi * fo + fo))
        pos += fi * fo + fo
    return offs


def net_init(specs, rng):
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    specs = _norm_specs(specs)
    params = np.zeros(param_count(specs))
    for (w0, b0, _end), (fi, fo, _) in zip(_offsets(specs), specs):
        limit = np.sqrt(6.0 / (fi + fo))
        params[w0:b0] = rng.uniform(-limit, limit, fi * fo)
    return Net(specs=specs, params=params)


def net_with_params(net, params):
    if params.shape != net.params.shape:
        raise LengthMismatch(f"params length {params.shape} != {net.params.shape}")
    return replace(net, params=params)


def _mm(a, b):
    # Forward matmul with per-row bit-stability: einsum evaluates each row
    # independently, so tiny batches match single-row passes exactly; BLAS
    # (np.matmul) keeps row content stable for M >= 5 under permutation,
    # duplication, and batch-size changes on one build, which the batching
    # consistency tests rely on.
    if a.shape[0] <= 4:
        return np.einsum("ij,jk->ik", a, b)
    return np.matmul(a, b)


def net_forward(net, x):
    """Forward pass; returns (output, cache of post-activation arrays)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeMismatch(f"input shape {x.shape} incompatible with fan_in {net.in_dim}")
    acts = [x]
    for (w0, b0, end), (fi, fo, act) in zip(_offsets(net.specs), net.specs):
        w = net.params[w0:b0].reshape(fi, fo)
        b = net.params[b0:end]
        h = _mm(acts[-1], w) + b
        if act == "relu":
            h = np.maximum(h, 0.0)
        elif act == "tanh":
            h = np.tanh(h)
        acts.append(h)
    out = acts[-1][0] if squeeze else acts[-1]
    return out, acts


def net_backward(net, acts, output_grad):
    """Gradient of a scalar loss with the given output gradient.

    Returns (flat parameter gradient, input gradient).  Gradients are summed
    over batch rows.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != acts[-1].shape:
        raise ShapeMismatch(f"output_grad shape {g.shape} != output {acts[-1].shape}")
    grad = np.zeros_like(net.params)
    offs = _offsets(net.specs)
    for k in range(len(net.specs) - 1, -1, -1):
        fi, fo, act = net.specs[k]
        w0, b0, end = offs[k]
        post = acts[k + 1]
        if act == "relu":
            g = g * (post > 0.0)
        elif act == "tanh":
            g = g * (1.0 - post * post)
        w = net.params[w0:b0].reshape(fi, fo)
        grad[w0:b0] = (acts[k].T @ g).ravel()
        grad[b0:end] = g.sum(axis=0)
        g = g @ w.T
    return grad, g


def cross_entropy(logits, label):
    """Softmax cross-entropy of one logit vector; grad = softmax - onehot."""
    logits = np.asarray(logits, dtype=np.float64)
    c = logits.shape[-1]
    if not (0 <= int(label) < c):
        raise BadLabel(f"label {label} out of range for {c} classes")
    z = logits - logits.max()
    lse = np.log(np.sum(np.exp(z)))
    loss = lse - z[int(label)]
    grad = np.exp(z - lse)
    grad[int(label)] -= 1.0
    return float(loss), grad


def cross_entropy_batch(logits, labels):
    """Mean softmax cross-entropy over rows; grad is of the mean."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise BadLabel(f"labels outside [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    losses = lse[:, 0] - z[np.arange(b), labels]
    grad = np.exp(z - lse)
    grad[np.arange(b), labels] -= 1.0
    return float(losses.mean()), grad / b


def adam_init(n_params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(m=np.zeros(n_params), v=np.zeros(n_params), step=0,
                     lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params, grads, state):
    """Bias-corrected Adam; returns (new params, new state)."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise LengthMismatch(
            f"params {params.shape}, grads {grads.shape}, moments {state.m.shape}")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    mhat = m / (1.0 - state.beta1 ** step)
    vhat = v / (1.0 - state.beta2 ** step)
    new_params = params - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=step)


def grad_check(loss_fn, params, samples, rng, step=1e-5):
    """Max relative error between loss_fn's gradient and central differences
    on `samples` random coordinates.  loss_fn(params) -> (loss, grad)."""
    params = np.asarray(params, dtype=np.float64)
    _, grad = loss_fn(params)
    idx = rng.choice(params.size, size=min(samples, params.size), replace=False)
    worst = 0.0
    for i in idx:
        p = params.copy()
        p[i] += step
        lp, _ = loss_fn(p)
        p[i] -= 2.0 * step
        lm, _ = loss_fn(p)
        fd = (lp - lm) / (2.0 * step)
        denom = max(abs(fd), abs(grad[i]), 1e-10)
        worst = max(worst, abs(fd - grad[i]) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
# magic "GDX1" | u32 version | str component | u32 n_sections | sections.
# section: str name | u32 kind | payload.
#   kind 0 net:   u32 n_layers; (u32 in, u32 out, u32 act) each; u64 count; f8
#   kind 1 f8 array / kind 2 i8 array: u32 ndim; u64 dims; data
#   kind 3 blob:  u64 nbytes; raw bytes
# All integers little-endian; float arrays little-endian f8 in C order.

_MAGIC = b"GDX1"
_VERSION = 1
_KIND_NET, _KIND_F8, _KIND_I8, _KIND_BLOB = 0, 1, 2, 3


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def string(self):
        return self.take(self.u32()).decode("utf-8")


def checkpoint_bytes(component, sections):
    """Serialize {name: Net | float array | int array | bytes} to bytes."""
    out = [_MAGIC, struct.pack("<I", _VERSION), _pack_str(component),
           struct.pack("<I", len(sections))]
    for name, value in sections.items():
        out.append(_pack_str(name))
        if isinstance(value, Net):
            out.append(struct.pack("<I", _KIND_NET))
            out.append(struct.pack("<I", len(value.specs)))
            for fi, fo, act in value.specs:
                out.append(struct.pack("<III", fi, fo, _ACTS.index(act)))
            data = np.ascontiguousarray(value.params, dtype="<f8")
            out.append(struct.pack("<Q", data.size))
            out.append(data.tobytes())
        elif isinstance(value, (bytes, bytearray)):
            out.append(struct.pack("<I", _KIND_BLOB))
            out.append(struct.pack("<Q", len(value)))
            out.append(bytes(value))
        else:
            arr = np.asarray(value)
            if arr.dtype.kind == "i":
                kind, dt = _KIND_I8, "<i8"
            elif arr.dtype.kind == "f":
                kind, dt = _KIND_F8, "<f8"
            else:
                raise CheckpointError(f"section {name!r}: unsupported dtype {arr.dtype}")
            arr = np.ascontiguousarray(arr, dtype=dt)
            out.append(struct.pack("<I", kind))
            out.append(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                out.append(struct.pack("<Q", d))
            out.append(arr.tobytes())
    return b"".join(out)


def parse_checkpoint(buf):
    """Inverse of checkpoint_bytes: returns (component, {name: value})."""
    r = _Reader(buf)
    if r.take(4) != _MAGIC:
        raise CheckpointError("bad magic (not a geodex checkpoint)")
    version = r.u32()
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    component = r.string()
    sections = {}
    for _ in range(r.u32()):
        name = r.string()
        kind = r.u32()
        if kind == _KIND_NET:
            n_layers = r.u32()
            specs = []
            for _ in range(n_layers):
                fi, fo, act = struct.unpack("<III", r.take(12))
                if act >= len(_ACTS):
                    raise CheckpointError(f"bad activation code {act}")
                specs.append((fi, fo, _ACTS[act]))
            count = r.u64()
            specs = tuple(specs)
            if count != param_count(specs):
                raise CheckpointError(f"net {name!r}: param count mismatch")
            params = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64)
            sections[name] = Net(specs=specs, params=params)
        elif kind in (_KIND_F8, _KIND_I8):
            ndim = r.u32()
            shape = tuple(r.u64() for _ in range(ndim))
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            dt = "<f8" if kind == _KIND_F8 else "<i8"
            arr = np.frombuffer(r.take(8 * count), dtype=dt)
            base = np.float64 if kind == _KIND_F8 else np.int64
            sections[name] = arr.astype(base).reshape(shape)
        elif kind == _KIND_BLOB:
            sections[name] = bytes(r.take(r.u64()))
        else:
            raise CheckpointError(f"unknown section kind {kind}")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes")
    return component, sections


def save_checkpoint(path, component, sections):
    data = checkpoint_bytes(component, sections)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_checkpoint(path, expect_component=None):
    with open(path, "rb") as fh:
        component, sections = parse_checkpoint(fh.read())
    if expect_component is not None and component != expect_component:
        raise CheckpointError(f"expected {expect_component!r} checkpoint, got {component!r}")
    return component, sections
