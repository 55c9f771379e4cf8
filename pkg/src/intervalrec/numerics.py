"""Minimal reverse-mode autodiff on float64 numpy arrays.

Everything the models need is here: a tape that records operations, a
handful of batched primitives (embedding gather, affine, relu, sigmoid,
inverted dropout, reductions), binary cross-entropy with clamping, Adam,
and a central-difference gradient checker. No external framework.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

PROB_EPS = 1e-7  # clamp for probabilities entering log()


class ParamTensor:
    """A named trainable array with gradient and Adam moment buffers.

    `decay` is a per-parameter decoupled weight-decay coefficient applied at
    update time (never part of the loss), so loss values and loss gradients
    stay comparable whether or not a parameter is penalized.
    """

    __slots__ = ("name", "value", "grad", "moment1", "moment2", "decay")

    def __init__(self, name: str, value: np.ndarray, decay: float = 0.0):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.moment1 = np.zeros_like(self.value)
        self.moment2 = np.zeros_like(self.value)
        self.decay = float(decay)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"ParamTensor({self.name!r}, shape={self.value.shape})"


class Node:
    """An intermediate value on the tape."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None

    def _bump(self, delta: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += delta


def _out_grad(node: Node) -> np.ndarray:
    return node.grad if node.grad is not None else np.zeros_like(node.value)


class ComputeTape:
    """Records forward operations; backward() replays them in reverse.

    Execution order is a topological order of the graph, so walking the
    recorded list backwards visits every op exactly once with its output
    gradient fully accumulated.
    """

    def __init__(self, rng: np.random.Generator | None = None, training: bool = False):
        self.rng = rng
        self.training = training
        self._ops: list[Callable[[], None]] = []
        self._finalized = False

    # -- plumbing ---------------------------------------------------------

    def _record(self, backward_fn: Callable[[], None]) -> None:
        self._ops.append(backward_fn)

    def backward(self, loss: Node) -> None:
        """Backpropagate from a scalar loss, accumulating into ParamTensor.grad."""
        if self._finalized:
            raise RuntimeError("backward() called twice on the same tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        self._finalized = True
        loss.grad = np.ones_like(loss.value)
        for op in reversed(self._ops):
            op()

    # -- primitives -------------------------------------------------------

    def constant(self, value: np.ndarray) -> Node:
        return Node(np.asarray(value, dtype=np.float64))

    def embed(self, table: ParamTensor, indices: np.ndarray) -> Node:
        """Row gather from an embedding table; grad scatters back with +=."""
        idx = np.asarray(indices)
        out = Node(table.value[idx])

        def backward() -> None:
            np.add.at(table.grad, idx, _out_grad(out))

        self._record(backward)
        return out

    def affine(self, x: Node, weights: ParamTensor, bias: ParamTensor | None) -> Node:
        """x @ W (+ b) for 2-D x of shape (batch, fan_in)."""
        if x.value.ndim != 2:
            raise ValueError(f"affine expects 2-D input, got shape {x.value.shape}")
        if x.value.shape[1] != weights.value.shape[0]:
            raise ValueError(
                f"affine shape mismatch: input {x.value.shape} vs weights {weights.value.shape}"
            )
        value = x.value @ weights.value
        if bias is not None:
            value = value + bias.value
        out = Node(value)

        def backward() -> None:
            g = _out_grad(out)
            weights.grad += x.value.T @ g
            if bias is not None:
                bias.grad += g.sum(axis=0)
            x._bump(g @ weights.value.T)

        self._record(backward)
        return out

    def matmul_const(self, x: Node, matrix: np.ndarray) -> Node:
        """x @ M for a fixed (non-trainable) matrix M."""
        m = np.asarray(matrix, dtype=np.float64)
        out = Node(x.value @ m)

        def backward() -> None:
            x._bump(_out_grad(out) @ m.T)

        self._record(backward)
        return out

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ValueError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
        out = Node(a.value + b.value)

        def backward() -> None:
            g = _out_grad(out)
            a._bump(g)
            b._bump(g)

        self._record(backward)
        return out

    def scale(self, x: Node, factor: float) -> Node:
        out = Node(x.value * factor)

        def backward() -> None:
            x._bump(_out_grad(out) * factor)

        self._record(backward)
        return out

    def mul(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ValueError(f"mul shape mismatch: {a.value.shape} vs {b.value.shape}")
        out = Node(a.value * b.value)

        def backward() -> None:
            g = _out_grad(out)
            a._bump(g * b.value)
            b._bump(g * a.value)

        self._record(backward)
        return out

    def square(self, x: Node) -> Node:
        out = Node(x.value * x.value)

        def backward() -> None:
            x._bump(_out_grad(out) * 2.0 * x.value)

        self._record(backward)
        return out

    def sum(self, x: Node, axis: int) -> Node:
        axis = axis % x.value.ndim
        out = Node(x.value.sum(axis=axis))

        def backward() -> None:
            x._bump(np.expand_dims(_out_grad(out), axis).repeat(x.value.shape[axis], axis))

        self._record(backward)
        return out

    def mean(self, x: Node) -> Node:
        """Mean over all elements, yielding a scalar node."""
        n = x.value.size
        out = Node(np.asarray(x.value.mean()))

        def backward() -> None:
            x._bump(np.full_like(x.value, float(_out_grad(out)) / n))

        self._record(backward)
        return out

    def stack(self, parts: list[Node], axis: int = 1) -> Node:
        """Stack same-shaped nodes along a new axis (fields axis for FM)."""
        if not parts:
            raise ValueError("stack needs at least one node")
        out = Node(np.stack([p.value for p in parts], axis=axis))

        def backward() -> None:
            g = _out_grad(out)
            for i, part in enumerate(parts):
                part._bump(np.take(g, i, axis=axis))

        self._record(backward)
        return out

    def add_scalar_param(self, x: Node, param: ParamTensor) -> Node:
        """Broadcast-add a single-element parameter (a global bias)."""
        if param.value.size != 1:
            raise ValueError(f"{param.name} is not scalar-sized: {param.value.shape}")
        out = Node(x.value + param.value.reshape(()))

        def backward() -> None:
            g = _out_grad(out)
            param.grad += g.sum().reshape(param.value.shape)
            x._bump(g)

        self._record(backward)
        return out

    def concat(self, parts: list[Node], axis: int = 1) -> Node:
        if axis != 1 or any(p.value.ndim != 2 for p in parts):
            raise ValueError("concat supports 2-D nodes along axis=1")
        out = Node(np.concatenate([p.value for p in parts], axis=1))
        widths = [p.value.shape[1] for p in parts]
        offsets = np.cumsum([0] + widths)

        def backward() -> None:
            g = _out_grad(out)
            for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                part._bump(g[:, lo:hi])

        self._record(backward)
        return out

    def relu(self, x: Node) -> Node:
        out = Node(np.maximum(x.value, 0.0))

        def backward() -> None:
            x._bump(_out_grad(out) * (x.value > 0.0))

        self._record(backward)
        return out

    def sigmoid(self, x: Node) -> Node:
        out = Node(sigmoid_value(x.value))

        def backward() -> None:
            s = out.value
            x._bump(_out_grad(out) * s * (1.0 - s))

        self._record(backward)
        return out

    def dropout(self, x: Node, rate: float) -> Node:
        """Inverted dropout: active only when the tape is in training mode."""
        if not (0.0 <= rate < 1.0):
            raise ValueError(f"dropout rate must be in [0,1), got {rate}")
        if not self.training or rate == 0.0:
            return x
        if self.rng is None:
            raise RuntimeError("training-mode dropout needs a tape rng")
        keep = (self.rng.random(x.value.shape) >= rate) / (1.0 - rate)
        out = Node(x.value * keep)

        def backward() -> None:
            x._bump(_out_grad(out) * keep)

        self._record(backward)
        return out

    def select_index(self, x: Node, indices: np.ndarray) -> Node:
        """Pick one column per row: out[i] = x[i, indices[i]]."""
        idx = np.asarray(indices, dtype=np.int64)
        if x.value.ndim != 2 or idx.shape != (x.value.shape[0],):
            raise ValueError("select_index expects (batch, k) node and (batch,) indices")
        rows = np.arange(x.value.shape[0])
        out = Node(x.value[rows, idx])

        def backward() -> None:
            g = np.zeros_like(x.value)
            g[rows, idx] = _out_grad(out)
            x._bump(g)

        self._record(backward)
        return out

    def bce(self, prediction: Node, label: np.ndarray) -> Node:
        """Elementwise binary cross-entropy on probabilities, clamped to [eps, 1-eps].

        Gradient is zero where the clamp is active, so the loss stays
        bounded and finite even for saturated predictions.
        """
        y = np.asarray(label, dtype=np.float64)
        if y.shape != prediction.value.shape:
            raise ValueError(f"bce shape mismatch: {prediction.value.shape} vs {y.shape}")
        p = np.clip(prediction.value, PROB_EPS, 1.0 - PROB_EPS)
        in_range = (prediction.value > PROB_EPS) & (prediction.value < 1.0 - PROB_EPS)
        out = Node(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)))

        def backward() -> None:
            grad_p = (p - y) / (p * (1.0 - p))
            prediction._bump(_out_grad(out) * grad_p * in_range)

        self._record(backward)
        return out


def sigmoid_value(x: np.ndarray) -> np.ndarray:
    """Numerically stable sigmoid on plain arrays (no tape)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_value(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Tape-free binary cross-entropy with the same clamping as ComputeTape.bce."""
    pc = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=np.float64)
    return -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))


def affine_forward(tape: ComputeTape, x: Node, weights: ParamTensor, bias: ParamTensor | None) -> Node:
    """Affine layer entry point; thin alias over the tape primitive."""
    return tape.affine(x, weights, bias)


def fm_second_order(tape: ComputeTape, field_embeddings: Node) -> Node:
    """Pairwise-interaction term of a factorization machine.

    Input is (batch, n_fields, dim); output is (batch,) holding
    0.5 * sum_f [ (sum_i e_{i,f})^2 - sum_i e_{i,f}^2 ].
    """
    if field_embeddings.value.ndim != 3:
        raise ValueError(
            f"fm_second_order expects (batch, fields, dim), got {field_embeddings.value.shape}"
        )
    if field_embeddings.value.shape[1] < 2:
        raise ValueError("fm_second_order needs at least 2 fields")
    summed = tape.sum(field_embeddings, axis=1)            # (B, d)
    square_of_sum = tape.sum(tape.square(summed), axis=1)  # (B,)
    sum_of_square = tape.sum(tape.sum(tape.square(field_embeddings), axis=1), axis=1)
    return tape.scale(tape.add(square_of_sum, tape.scale(sum_of_square, -1.0)), 0.5)


# -- initialization -------------------------------------------------------


def init_embedding(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Embedding init: uniform(-0.01, 0.01)."""
    return rng.uniform(-0.01, 0.01, size=shape)


def init_affine_weights(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Glorot-uniform init for affine weights; biases start at zero."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# -- optimizer ------------------------------------------------------------


@dataclass
class AdamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(params: list[ParamTensor], config: AdamConfig, step: int) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards.

    `step` is the 1-based update count. A non-finite gradient aborts with
    the offending parameter named, before any state is touched.
    """
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    for p in params:
        if not np.isfinite(p.grad).all():
            raise RuntimeError(f"non-finite gradient in parameter {p.name!r}")
    b1, b2 = config.beta1, config.beta2
    for p in params:
        p.moment1 *= b1
        p.moment1 += (1.0 - b1) * p.grad
        p.moment2 *= b2
        p.moment2 += (1.0 - b2) * p.grad * p.grad
        m_hat = p.moment1 / (1.0 - b1**step)
        v_hat = p.moment2 / (1.0 - b2**step)
        p.value -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
        if p.decay:
            p.value -= config.learning_rate * p.decay * p.value
        p.zero_grad()


# -- gradient checking ----------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    entries_checked: int
    worst_param: str = ""
    per_param: dict[str, float] = field(default_factory=dict)

    def ok(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def grad_check(
    build_loss: Callable[[ComputeTape], Node],
    params: list[ParamTensor],
    step: float = 1e-5,
    max_entries: int = 10_000,
    seed: int = 0,
) -> GradCheckResult:
    """Compare tape gradients against central finite differences.

    `build_loss` must rebuild the scalar loss from current parameter values
    on the tape it is given (deterministically: dropout is disabled because
    the tape is created in eval mode). Relative error per entry is
    |a - n| / max(|a|, |n|, 1e-3); the floor makes near-zero gradients an
    absolute comparison. When the total entry count exceeds `max_entries`,
    a seeded random subsample is checked instead.
    """
    tape = ComputeTape(training=False)
    loss = build_loss(tape)
    for p in params:
        p.zero_grad()
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()

    entries = [(p, i) for p in params for i in range(p.value.size)]
    if len(entries) > max_entries:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[i] for i in picks]

    def loss_value() -> float:
        probe = ComputeTape(training=False)
        return float(build_loss(probe).value)

    result = GradCheckResult(max_rel_error=0.0, entries_checked=len(entries))
    for p, i in entries:
        original = p.value.flat[i]
        p.value.flat[i] = original + step
        up = loss_value()
        p.value.flat[i] = original - step
        down = loss_value()
        p.value.flat[i] = original
        numeric = (up - down) / (2.0 * step)
        a = analytic[p.name].flat[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
        if rel > result.per_param.get(p.name, 0.0):
            result.per_param[p.name] = rel
        if rel > result.max_rel_error:
            result.max_rel_error = rel
            result.worst_param = p.name
    return result
