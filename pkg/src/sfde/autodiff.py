"""Minimal reverse-mode automatic differentiation over numpy arrays.

A `Tape` records every differentiable kernel invocation that happens while it
is active (entered as a context manager). Calling `Tape.backward(loss)` replays
the records once in strict reverse execution order and accumulates gradients
into every trainable `Parameter` that participated.

Kernels themselves live in `sfde.ops`; this module only provides the value
containers and the replay machinery.
"""

from __future__ import annotations

import numpy as np

# Extra invariant checking (finiteness after every kernel). Enabled by the
# test suite; off by default because it costs a pass over every output.
DEBUG_CHECKS = False


class TapeError(RuntimeError):
    """Raised on tape misuse (double replay, backward on a non-scalar...)."""


class Tensor:
    """A dense real array. Row-major, float32 by default, float64 for
    gradient checking."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """A learnable tensor with a gradient slot of identical shape."""

    __slots__ = ("grad", "trainable", "name", "clamp_range", "weight_decay")

    def __init__(self, data, name="", trainable=True, dtype=None):
        super().__init__(data, dtype=dtype)
        self.grad = np.zeros_like(self.data)
        self.trainable = trainable
        self.name = name
        self.clamp_range = None   # optional (lo, hi) applied after each step
        self.weight_decay = True  # AdamW decoupled decay applies to this param

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed differentiable operations.

    Single-owner: one forward pass, one backward replay. A second backward on
    the same tape raises `TapeError`.
    """

    def __init__(self):
        self._records = []  # (outputs tuple, inputs tuple, backward_fn)
        self._consumed = False
        self._grads = None

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        assert _TAPES and _TAPES[-1] is self
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor):
        """Populate gradients of every trainable Parameter reachable from
        `loss`. The gradient of the loss w.r.t. itself is 1."""
        if self._consumed:
            raise TapeError("tape already replayed; re-run the forward pass")
        if np.size(loss.data) != 1:
            raise TapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for outputs, inputs, backward_fn in reversed(self._records):
            gouts = [grads.get(id(o)) for o in outputs]
            if all(g is None for g in gouts):
                continue
            gouts = [np.zeros_like(o.data) if g is None else g
                     for o, g in zip(outputs, gouts)]
            gins = backward_fn(*gouts)
            for t, g in zip(inputs, gins):
                if g is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = np.array(g, copy=True)
                if isinstance(t, Parameter) and t.trainable:
                    t.grad += g.astype(t.grad.dtype, copy=False)
        self._grads = grads

    def grad(self, t: Tensor):
        """Gradient of the replayed loss w.r.t. any tensor seen on the tape
        (None if the tensor did not influence the loss)."""
        if self._grads is None:
            raise TapeError("call backward before querying gradients")
        return self._grads.get(id(t))


def active_tape():
    return _TAPES[-1] if _TAPES else None


def record(outputs, inputs, backward_fn):
    """Register one executed op with the active tape (no-op when untaped)."""
    if DEBUG_CHECKS:
        for o in outputs:
            if not np.all(np.isfinite(o.data)):
                raise FloatingPointError("non-finite values in kernel output")
    tape = active_tape()
    if tape is not None:
        tape._records.append((tuple(outputs), tuple(inputs), backward_fn))
