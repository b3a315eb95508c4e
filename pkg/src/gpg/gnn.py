"""Polynomial graph convolutional network.

Layer ``l`` computes ``Z_l = sum_k S^k X_{l-1} H_lk + 1 b_l^T`` followed by
``tanh`` on hidden layers; the output layer is linear.

Every sum in the forward pass runs in a fixed order: neighbours in ascending
index, input features in ascending index, taps in ascending order, bias last.
The node-local evaluator below repeats exactly these operations, so both
paths agree bit for bit (terms from non-neighbours are exact zeros).
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Dict, List, Optional, Sequence, Tuple

import numba
import numpy as np

MAGIC = b"GPGF"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


class MissingMessageError(RuntimeError):
    pass


@dataclass
class FilterTensor:
    """Per layer ``l``: ``weights[l]`` of shape ``(K, d_{l-1}, d_l)`` and ``biases[l]`` of shape ``(d_l,)``."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("need one weight tensor and one bias per layer")
        K = self.weights[0].shape[0]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 3 or w.shape[0] != K:
                raise ShapeError(f"layer {l}: weights must be (K={K}, d_in, d_out), got {w.shape}")
            if b.shape != (w.shape[2],):
                raise ShapeError(f"layer {l}: bias shape {b.shape} != ({w.shape[2]},)")
            if l and w.shape[1] != self.weights[l - 1].shape[2]:
                raise ShapeError(f"layer {l}: input width {w.shape[1]} does not chain "
                                 f"with previous output {self.weights[l - 1].shape[2]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ShapeError(f"layer {l}: non-finite parameters")

    @property
    def K(self) -> int:
        return self.weights[0].shape[0]

    @property
    def L(self) -> int:
        return len(self.weights)

    @property
    def widths(self) -> Tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[2] for w in self.weights)

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @classmethod
    def init(cls, widths: Sequence[int], K: int, rng: np.random.Generator,
             output_scale: float = 1.0) -> "FilterTensor":
        """Uniform in ``[-a, a]`` with ``a = sqrt(1 / (K d_in))``; zero biases.

        The last layer's range is further multiplied by ``output_scale``.
        """
        weights, biases = [], []
        n_layers = len(widths) - 1
        for l, (d_in, d_out) in enumerate(zip(widths[:-1], widths[1:])):
            a = np.sqrt(1.0 / (K * d_in)) * (output_scale if l == n_layers - 1 else 1.0)
            weights.append(rng.uniform(-a, a, size=(K, d_in, d_out)))
            biases.append(np.zeros(d_out))
        return cls(weights, biases)

    @classmethod
    def unchecked(cls, weights, biases) -> "FilterTensor":
        """Same-shaped container without the finiteness check (for gradients)."""
        obj = cls.__new__(cls)
        obj.weights, obj.biases = list(weights), list(biases)
        return obj

    @classmethod
    def zeros_like(cls, other: "FilterTensor") -> "FilterTensor":
        return cls([np.zeros_like(w) for w in other.weights],
                   [np.zeros_like(b) for b in other.biases])

    def copy(self) -> "FilterTensor":
        return FilterTensor([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights] + [b.ravel() for b in self.biases])

    def from_vector(self, vec: np.ndarray) -> "FilterTensor":
        """A tensor shaped like ``self`` filled from ``vec`` (the ``to_vector`` layout)."""
        out_w, out_b, i = [], [], 0
        for w in self.weights:
            out_w.append(vec[i:i + w.size].reshape(w.shape))
            i += w.size
        for b in self.biases:
            out_b.append(vec[i:i + b.size].reshape(b.shape))
            i += b.size
        if i != len(vec):
            raise ShapeError(f"vector length {len(vec)} != parameter count {i}")
        return FilterTensor(out_w, out_b)

    # -- serialization ---------------------------------------------------------

    def write(self, fh: BinaryIO) -> None:
        widths = self.widths
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, self.L, self.K, len(widths)))
        fh.write(struct.pack(f"<{len(widths)}I", *widths))
        for w in self.weights:
            for k in range(self.K):
                fh.write(np.ascontiguousarray(w[k], dtype="<f8").tobytes())
        for b in self.biases:
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())

    @classmethod
    def read(cls, fh: BinaryIO) -> "FilterTensor":
        if fh.read(4) != MAGIC:
            raise ShapeError("not a filter tensor container (bad magic)")
        version, L, K, n_widths = struct.unpack("<IIII", _read_exact(fh, 16))
        if version != FORMAT_VERSION:
            raise ShapeError(f"unsupported container version {version}")
        if n_widths != L + 1 or L < 1 or K < 1:
            raise ShapeError(f"inconsistent header: L={L}, K={K}, {n_widths} widths")
        widths = struct.unpack(f"<{n_widths}I", _read_exact(fh, 4 * n_widths))
        weights = []
        for d_in, d_out in zip(widths[:-1], widths[1:]):
            taps = [np.frombuffer(_read_exact(fh, 8 * d_in * d_out), dtype="<f8").reshape(d_in, d_out)
                    for _ in range(K)]
            weights.append(np.stack(taps).astype(np.float64))
        biases = [np.frombuffer(_read_exact(fh, 8 * d), dtype="<f8").astype(np.float64)
                  for d in widths[1:]]
        return cls(weights, biases)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.write(buf)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FilterTensor":
        return cls.read(io.BytesIO(data))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ShapeError("truncated filter tensor container")
    return data


# -- ordered primitives shared by the centralized and local evaluators ----------

# Compiled loops that add terms one at a time in index order. Without
# fastmath numba/LLVM never reassociates or fuses these adds, so results do
# not depend on array shapes, batch composition or BLAS.

@numba.njit(cache=True)
def _ordered_transform(Y, W):
    rows, d_in = Y.shape
    out = np.zeros((rows, W.shape[1]))
    for r in range(rows):
        for j in range(d_in):
            y = Y[r, j]
            for o in range(W.shape[1]):
                out[r, o] += y * W[j, o]
    return out


@numba.njit(cache=True)
def _ordered_shift(S, Y):
    graphs, n, m_count = S.shape
    out = np.zeros((graphs, n, Y.shape[2]))
    for g in range(graphs):
        for i in range(n):
            for m in range(m_count):
                w = S[g, i, m]
                for c in range(Y.shape[2]):
                    out[g, i, c] += w * Y[g, m, c]
    return out


def _shift(S: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """``S @ Y`` accumulated over neighbours ``m = 0, 1, ...`` in order."""
    lead = np.broadcast_shapes(S.shape[:-2], Y.shape[:-2])
    S3 = np.ascontiguousarray(np.broadcast_to(S, lead + S.shape[-2:])).reshape((-1,) + S.shape[-2:])
    Y3 = np.ascontiguousarray(np.broadcast_to(Y, lead + Y.shape[-2:])).reshape((-1,) + Y.shape[-2:])
    return _ordered_shift(S3, Y3).reshape(lead + (S.shape[-2], Y.shape[-1]))


def _transform(Y: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``Y @ W`` accumulated over input features in order."""
    Y2 = np.ascontiguousarray(Y).reshape(-1, Y.shape[-1])
    return _ordered_transform(Y2, np.ascontiguousarray(W)).reshape(Y.shape[:-1] + (W.shape[1],))


def _combine(stack: Sequence[np.ndarray], W: np.ndarray, b: np.ndarray, hidden: bool):
    z = np.zeros(stack[0].shape[:-1] + (W.shape[2],))
    for k, y in enumerate(stack):
        z = z + _transform(y, W[k])
    z = z + b
    return z, (np.tanh(z) if hidden else z)


@dataclass
class ForwardTrace:
    inputs: List[np.ndarray] = field(default_factory=list)       # X_{l-1}
    stacks: List[List[np.ndarray]] = field(default_factory=list)  # [S^k X_{l-1}]_k
    pre: List[np.ndarray] = field(default_factory=list)          # Z_l
    post: List[np.ndarray] = field(default_factory=list)         # X_l


def _check_inputs(X, S, H):
    if X.shape[-1] != H.widths[0]:
        raise ShapeError(f"input width {X.shape[-1]} != filter input width {H.widths[0]}")
    n = X.shape[-2]
    if S.shape[-2:] != (n, n):
        raise ShapeError(f"S shape {S.shape} does not match {n} nodes")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input signal")


def gnn_forward(X: np.ndarray, S: np.ndarray, H: FilterTensor):
    """Return ``(A, trace)``; leading batch axes on ``X`` and ``S`` broadcast."""
    X = np.asarray(X, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    _check_inputs(X, S, H)
    trace = ForwardTrace()
    cur = X
    for l, (W, b) in enumerate(zip(H.weights, H.biases)):
        stack = [cur]
        for _ in range(1, H.K):
            stack.append(_shift(S, stack[-1]))
        z, out = _combine(stack, W, b, hidden=l < H.L - 1)
        trace.inputs.append(cur)
        trace.stacks.append(stack)
        trace.pre.append(z)
        trace.post.append(out)
        cur = out
    return cur, trace


def gnn_backward(trace: ForwardTrace, S: np.ndarray, H: FilterTensor, upstream: np.ndarray):
    """Reverse-mode gradients of ``sum(upstream * A)``.

    Returns ``(grad_H, grad_X)``; batch axes are summed into ``grad_H``.
    ``S`` is treated as a constant.
    """
    if len(trace.pre) != H.L or trace.pre[-1].shape[-1] != H.widths[-1]:
        raise ShapeError("trace does not belong to this filter tensor")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != trace.post[-1].shape:
        raise ShapeError(f"upstream shape {upstream.shape} != output shape {trace.post[-1].shape}")
    S = np.asarray(S, dtype=np.float64)
    St = np.swapaxes(S, -1, -2)
    grad_w: List[np.ndarray] = [None] * H.L
    grad_b: List[np.ndarray] = [None] * H.L
    delta = upstream
    grad_in = None
    for l in range(H.L - 1, -1, -1):
        W = H.weights[l]
        d_in, d_out = W.shape[1], W.shape[2]
        flat_delta = delta.reshape(-1, d_out)
        grad_w[l] = np.stack([y.reshape(-1, d_in).T @ flat_delta for y in trace.stacks[l]])
        grad_b[l] = flat_delta.sum(axis=0)
        # d/dX_{l-1} of sum_k S^k X H_k, evaluated by Horner's rule in S^T
        grad_in = delta @ W[H.K - 1].T
        for k in range(H.K - 2, -1, -1):
            grad_in = St @ grad_in + delta @ W[k].T
        if l:
            delta = grad_in * (1.0 - trace.post[l - 1] ** 2)
    return FilterTensor.unchecked(grad_w, grad_b), grad_in


# -- node-local (distributed) evaluation ---------------------------------------

def local_diffuse(messages: Sequence[Tuple[int, float, np.ndarray]]) -> np.ndarray:
    """One diffusion hop at a node: weighted sum of neighbour rows, ascending sender index."""
    messages = sorted(messages, key=lambda m: m[0])
    weights = np.array([[[w for _, w, _ in messages]]])
    rows = np.stack([row for _, _, row in messages])[None]
    return _ordered_shift(weights, rows)[0, 0]


def local_combine(stack_rows: Sequence[np.ndarray], W: np.ndarray, b: np.ndarray, hidden: bool):
    """Filter taps and nonlinearity applied to one node's diffused rows."""
    rows = [r[None, :] for r in stack_rows]
    _, out = _combine(rows, W, b, hidden)
    return out[0]


def gnn_forward_local(X: np.ndarray, S: np.ndarray, H: FilterTensor,
                      drop: Optional[set] = None):
    """Evaluate the GNN by explicit message passing between nodes.

    Each node only ever reads its own state and rows sent by nodes ``m`` with
    ``S[n, m] != 0``. ``drop`` holds ``(layer, hop, receiver, sender)`` tuples
    of messages to lose in transit, for fault testing.

    Returns ``(A, received)`` where ``received[n]`` counts rows node ``n``
    received over the whole evaluation.
    """
    X = np.asarray(X, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("local evaluation takes a single graph")
    _check_inputs(X, S, H)
    n = X.shape[0]
    drop = drop or set()
    neighbours = [[m for m in range(n) if S[i, m] != 0] for i in range(n)]
    received = np.zeros(n, dtype=np.int64)
    state = [X[i] for i in range(n)]
    for l, (W, b) in enumerate(zip(H.weights, H.biases)):
        stacks = [[state[i]] for i in range(n)]
        for hop in range(1, H.K):
            outbox: Dict[int, np.ndarray] = {m: stacks[m][-1] for m in range(n)}
            for i in range(n):
                inbox = [(m, S[i, m], outbox[m]) for m in neighbours[i]
                         if (l, hop, i, m) not in drop]
                if len(inbox) != len(neighbours[i]):
                    missing = sorted(set(neighbours[i]) - {m for m, _, _ in inbox})
                    raise MissingMessageError(
                        f"node {i}, layer {l}, hop {hop}: no message from {missing}")
                received[i] += len(inbox)
                stacks[i].append(local_diffuse(inbox))
        state = [local_combine(stacks[i], W, b, hidden=l < H.L - 1) for i in range(n)]
    return np.stack(state), received
