"""Reverse-mode automatic differentiation over dense float64 tensors.

A Tape records every primitive as a node with a pullback closure; backward()
walks the node list in reverse, accumulating gradients. Gradients flow only
toward leaves created with requires_grad, so constants (masks, adjacency
operators, targets) cost nothing on the way back.

Also here: Glorot/zero parameter containers, the Adam optimizer with
per-parameter L2 added to gradients, a GRU cell composed from primitives,
and the bit-exact checkpoint container used across the package.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np


class AutodiffError(ValueError):
    """Raised on shape mismatches, non-scalar losses, and bad primitives."""


class Tensor:
    """Handle to one tape node; value is an immutable-by-convention ndarray."""

    __slots__ = ("tape", "node_id", "value", "needs_grad")

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray, needs_grad: bool):
        self.tape = tape
        self.node_id = node_id
        self.value = value
        self.needs_grad = needs_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, node={self.node_id})"


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tape:
    """Wengert list: append-only record of primitive applications."""

    def __init__(self) -> None:
        # parallel node storage: parents[i], pullbacks[i] for node i
        self._parents: list[tuple[int, ...]] = []
        self._pullbacks: list = []
        self._needs: list[bool] = []
        self._shapes: list[tuple[int, ...]] = []

    def _record(self, value, parents, pullback, needs_grad) -> Tensor:
        for p in parents:
            if p.tape is not self:
                raise AutodiffError("operand tensor belongs to a different tape")
        node_id = len(self._parents)
        self._parents.append(tuple(p.node_id for p in parents))
        self._pullbacks.append(pullback)
        self._needs.append(needs_grad)
        self._shapes.append(value.shape)
        return Tensor(self, node_id, value, needs_grad)

    # -- leaves ----------------------------------------------------------

    def leaf(self, value) -> Tensor:
        """Differentiable input (a parameter or an optimizable quantity)."""
        return self._record(_as_f64(value), (), None, True)

    def constant(self, value) -> Tensor:
        """Non-differentiable input; backward never visits it."""
        return self._record(_as_f64(value), (), None, False)

    # -- primitives ------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise AutodiffError(
                f"matmul shape mismatch: left {av.shape}, right {bv.shape}"
            )
        needs = a.needs_grad or b.needs_grad

        def pullback(g):
            ga = g @ bv.T if a.needs_grad else None
            gb = av.T @ g if b.needs_grad else None
            return ga, gb

        return self._record(av @ bv, (a, b), pullback, needs)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise add; also accepts a trailing-axis bias (m, n) + (n,)."""
        av, bv = a.value, b.value
        bias = av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]
        if not bias and av.shape != bv.shape:
            raise AutodiffError(f"add shape mismatch: {av.shape} vs {bv.shape}")
        needs = a.needs_grad or b.needs_grad

        def pullback(g):
            ga = g if a.needs_grad else None
            if not b.needs_grad:
                return ga, None
            return ga, g.sum(axis=0) if bias else g

        return self._record(av + bv, (a, b), pullback, needs)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        av, bv = a.value, b.value
        if av.shape != bv.shape:
            raise AutodiffError(f"sub shape mismatch: {av.shape} vs {bv.shape}")
        needs = a.needs_grad or b.needs_grad

        def pullback(g):
            return (g if a.needs_grad else None, -g if b.needs_grad else None)

        return self._record(av - bv, (a, b), pullback, needs)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        av, bv = a.value, b.value
        if av.shape != bv.shape:
            raise AutodiffError(f"mul shape mismatch: {av.shape} vs {bv.shape}")
        needs = a.needs_grad or b.needs_grad

        def pullback(g):
            ga = g * bv if a.needs_grad else None
            gb = g * av if b.needs_grad else None
            return ga, gb

        return self._record(av * bv, (a, b), pullback, needs)

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)

        def pullback(g):
            return (g * c,)

        return self._record(a.value * c, (a,), pullback, a.needs_grad)

    def concat(self, tensors: list[Tensor], axis: int) -> Tensor:
        if not tensors:
            raise AutodiffError("concat needs at least one tensor")
        values = [t.value for t in tensors]
        ndim = values[0].ndim
        if axis < 0 or axis >= ndim:
            raise AutodiffError(f"concat axis {axis} out of range for ndim {ndim}")
        for v in values[1:]:
            if v.ndim != ndim or any(
                v.shape[d] != values[0].shape[d] for d in range(ndim) if d != axis
            ):
                raise AutodiffError(
                    f"concat shape mismatch along axis {axis}: "
                    f"{[v.shape for v in values]}"
                )
        sizes = [v.shape[axis] for v in values]
        offsets = np.cumsum([0] + sizes)
        needs_each = [t.needs_grad for t in tensors]

        def pullback(g):
            out = []
            for k, need in enumerate(needs_each):
                if not need:
                    out.append(None)
                    continue
                sl = [slice(None)] * ndim
                sl[axis] = slice(int(offsets[k]), int(offsets[k + 1]))
                out.append(g[tuple(sl)])
            return tuple(out)

        return self._record(
            np.concatenate(values, axis=axis),
            tuple(tensors),
            pullback,
            any(needs_each),
        )

    def relu(self, a: Tensor) -> Tensor:
        mask = a.value > 0

        def pullback(g):
            return (g * mask,)

        return self._record(
            np.where(mask, a.value, 0.0), (a,), pullback, a.needs_grad
        )

    def sigmoid(self, a: Tensor) -> Tensor:
        x = a.value
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)

        def pullback(g):
            return (g * out * (1.0 - out),)

        return self._record(out, (a,), pullback, a.needs_grad)

    def tanh(self, a: Tensor) -> Tensor:
        out = np.tanh(a.value)

        def pullback(g):
            return (g * (1.0 - out * out),)

        return self._record(out, (a,), pullback, a.needs_grad)

    def absolute(self, a: Tensor) -> Tensor:
        sign = np.sign(a.value)  # subgradient 0 at the kink

        def pullback(g):
            return (g * sign,)

        return self._record(np.abs(a.value), (a,), pullback, a.needs_grad)

    def gather(self, a: Tensor, indices) -> Tensor:
        """Select rows by integer index; pullback scatter-adds."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim != 1:
            raise AutodiffError(f"gather indices must be 1-D, got shape {idx.shape}")
        if a.value.ndim != 2:
            raise AutodiffError(f"gather input must be 2-D, got shape {a.value.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[0]):
            raise AutodiffError(
                f"gather index out of range for {a.value.shape[0]} rows"
            )
        in_shape = a.value.shape

        def pullback(g):
            acc = np.zeros(in_shape, dtype=np.float64)
            np.add.at(acc, idx, g)
            return (acc,)

        return self._record(a.value[idx], (a,), pullback, a.needs_grad)

    def segment_sum(self, a: Tensor, segment_ids, n_segments: int) -> Tensor:
        """Sum rows into n_segments buckets keyed by segment_ids."""
        ids = np.asarray(segment_ids, dtype=np.int64)
        if a.value.ndim != 2:
            raise AutodiffError(
                f"segment_sum input must be 2-D, got shape {a.value.shape}"
            )
        if ids.shape != (a.value.shape[0],):
            raise AutodiffError(
                f"segment_ids shape {ids.shape} does not match "
                f"{a.value.shape[0]} input rows"
            )
        if ids.size and (ids.min() < 0 or ids.max() >= n_segments):
            raise AutodiffError(f"segment id out of range [0, {n_segments})")
        out = np.zeros((n_segments, a.value.shape[1]), dtype=np.float64)
        np.add.at(out, ids, a.value)

        def pullback(g):
            return (g[ids],)

        return self._record(out, (a,), pullback, a.needs_grad)

    def transpose(self, a: Tensor) -> Tensor:
        if a.value.ndim != 2:
            raise AutodiffError(f"transpose input must be 2-D, got {a.value.shape}")

        def pullback(g):
            return (g.T,)

        return self._record(a.value.T.copy(), (a,), pullback, a.needs_grad)

    def mean(self, a: Tensor) -> Tensor:
        size = a.value.size
        in_shape = a.value.shape

        def pullback(g):
            return (np.full(in_shape, float(g) / size),)

        return self._record(
            np.asarray(a.value.mean()), (a,), pullback, a.needs_grad
        )

    def total_sum(self, a: Tensor) -> Tensor:
        in_shape = a.value.shape

        def pullback(g):
            return (np.full(in_shape, float(g)),)

        return self._record(
            np.asarray(a.value.sum()), (a,), pullback, a.needs_grad
        )

    # -- backward --------------------------------------------------------

    def backward(self, loss: Tensor) -> "Gradients":
        """Accumulate d(loss)/d(node) for every grad-requiring node."""
        if loss.tape is not self:
            raise AutodiffError("loss tensor belongs to a different tape")
        if loss.value.size != 1:
            raise AutodiffError(
                f"loss must be scalar, got shape {loss.value.shape}"
            )
        grads: list[np.ndarray | None] = [None] * len(self._parents)
        grads[loss.node_id] = np.ones_like(loss.value)
        for node_id in range(loss.node_id, -1, -1):
            g = grads[node_id]
            if g is None or not self._needs[node_id]:
                continue
            pullback = self._pullbacks[node_id]
            if pullback is None:
                continue  # leaf
            parent_grads = pullback(g)
            for parent_id, pg in zip(self._parents[node_id], parent_grads):
                if pg is None or not self._needs[parent_id]:
                    continue
                if grads[parent_id] is None:
                    grads[parent_id] = pg.copy() if pg.base is not None else pg
                else:
                    grads[parent_id] = grads[parent_id] + pg
        return Gradients(self, grads)


class Gradients:
    """Gradient lookup by tensor; absent entries read as zeros."""

    def __init__(self, tape: Tape, grads: list[np.ndarray | None]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        if tensor.tape is not self._tape:
            raise AutodiffError("tensor belongs to a different tape")
        g = self._grads[tensor.node_id]
        if g is None:
            return np.zeros(self._tape._shapes[tensor.node_id], dtype=np.float64)
        return g


# -- composite cells -----------------------------------------------------

GRU_PARAM_KEYS = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")


def gru_cell(tape: Tape, x: Tensor, h: Tensor, params: dict[str, Tensor]) -> Tensor:
    """One GRU step: update z, reset r, candidate from r*h, then blend.

    h' = (1 - z) * h + z * h_tilde, computed as h + z * (h_tilde - h).
    With all-zero parameters this halves the state: h' = 0.5 * h.
    """
    z = tape.sigmoid(
        tape.add(
            tape.add(tape.matmul(x, params["w_z"]), tape.matmul(h, params["u_z"])),
            params["b_z"],
        )
    )
    r = tape.sigmoid(
        tape.add(
            tape.add(tape.matmul(x, params["w_r"]), tape.matmul(h, params["u_r"])),
            params["b_r"],
        )
    )
    h_tilde = tape.tanh(
        tape.add(
            tape.add(
                tape.matmul(x, params["w_h"]),
                tape.matmul(tape.mul(r, h), params["u_h"]),
            ),
            params["b_h"],
        )
    )
    return tape.add(h, tape.mul(z, tape.sub(h_tilde, h)))


# -- parameters ----------------------------------------------------------


class ParamSet:
    """Named float64 arrays with a stable iteration order."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        if arrays:
            for name, arr in arrays.items():
                self.add(name, arr)

    def add(self, name: str, array) -> None:
        if name in self._arrays:
            raise ValueError(f"duplicate parameter name: {name}")
        self._arrays[name] = _as_f64(array)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, array) -> None:
        if name not in self._arrays:
            raise KeyError(f"unknown parameter: {name}")
        new = _as_f64(array)
        if new.shape != self._arrays[name].shape:
            raise ValueError(
                f"parameter {name}: shape {new.shape} != {self._arrays[name].shape}"
            )
        self._arrays[name] = new

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def count(self) -> int:
        return int(sum(a.size for a in self._arrays.values()))

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._arrays.items()})

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        """Register every parameter as a differentiable leaf on a tape."""
        return {name: tape.leaf(arr) for name, arr in self._arrays.items()}


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# -- Adam ------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class AdamState:
    """First/second moment estimates plus the step counter."""

    def __init__(self, m: dict[str, np.ndarray], v: dict[str, np.ndarray], step: int):
        self.m = m
        self.v = v
        self.step = step

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "AdamState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.items()},
            {k: np.zeros_like(a) for k, a in params.items()},
            0,
        )


class DivergenceError(RuntimeError):
    """Raised when a gradient goes non-finite during optimization."""


def adam_step(
    params: ParamSet,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    l2: dict[str, float] | None = None,
    update_only: frozenset[str] | set[str] | None = None,
) -> None:
    """In-place Adam update; L2 coefficients shift gradients by coef * w.

    update_only restricts which parameters move (their moments update too);
    all other parameters and moments are left untouched, which keeps frozen
    weights byte-identical.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, _ in params.items():
        if update_only is not None and name not in update_only:
            continue
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
        coef = l2.get(name, 0.0) if l2 else 0.0
        if coef:
            g = g + coef * params[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        params[name] = params[name] - step


# -- checkpoint container --------------------------------------------------

CHECKPOINT_FORMAT = "nettwin-checkpoint"
CHECKPOINT_VERSION = 1


def _encode_array(arr: np.ndarray) -> dict:
    raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(raw).decode("ascii"),
    }


def _decode_array(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return arr.reshape(entry["shape"])


def checkpoint_payload(
    params: ParamSet, manifest: dict, adam: AdamState | None = None
) -> dict:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "manifest": manifest,
        "order": params.names(),
        "params": {k: _encode_array(a) for k, a in params.items()},
        "adam": None,
    }
    if adam is not None:
        payload["adam"] = {
            "step": adam.step,
            "m": {k: _encode_array(a) for k, a in adam.m.items()},
            "v": {k: _encode_array(a) for k, a in adam.v.items()},
        }
    return payload


def parse_checkpoint(payload: dict) -> tuple[ParamSet, dict, AdamState | None]:
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a nettwin checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    order = payload["order"]
    params = ParamSet({name: _decode_array(payload["params"][name]) for name in order})
    adam = None
    if payload.get("adam") is not None:
        blob = payload["adam"]
        adam = AdamState(
            {name: _decode_array(blob["m"][name]) for name in order},
            {name: _decode_array(blob["v"][name]) for name in order},
            int(blob["step"]),
        )
    return params, payload["manifest"], adam


def save_checkpoint(
    path: str | Path, params: ParamSet, manifest: dict, adam: AdamState | None = None
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_payload(params, manifest, adam), fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | Path) -> tuple[ParamSet, dict, AdamState | None]:
    with open(path, encoding="utf-8") as fh:
        return parse_checkpoint(json.load(fh))
