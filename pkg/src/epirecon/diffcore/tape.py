"""Reverse-mode tape: node records, backward traversal, gradient map."""

import threading

import numpy as np

_state = threading.local()


def _stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.no_grad_depth = 0
    return _state.tapes


def active_tape():
    """The innermost active tape, or None when recording is off."""
    stack = _stack()
    if _state.no_grad_depth > 0 or not stack:
        return None
    return stack[-1]


class no_grad:
    """Context manager that suppresses tape recording."""

    def __enter__(self):
        _stack()
        _state.no_grad_depth += 1
        return self

    def __exit__(self, *exc):
        _state.no_grad_depth -= 1
        return False


class Node:
    """One recorded operation: parent handles plus the vjp closure."""

    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op, inputs, vjp):
        self.op = op
        self.inputs = inputs  # tuple of parent node ids (None for constants)
        self.vjp = vjp        # callable(grad) -> tuple of parent grads


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; ops executed inside record nodes whenever an
    input requires gradients. Leaves (requires_grad arrays) register
    themselves lazily on first use.
    """

    def __init__(self):
        self.nodes = []
        self.leaf_ids = []  # node ids of registered leaves, in registration order

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _stack().pop()
        assert popped is self, "tape stack corrupted"
        return False

    def add_node(self, op, inputs, vjp):
        self.nodes.append(Node(op, inputs, vjp))
        return len(self.nodes) - 1

    def add_leaf(self):
        nid = self.add_node("leaf", (), None)
        self.leaf_ids.append(nid)
        return nid


class GradientMap:
    """Gradients keyed by array handle, as produced by ``backward``."""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def get(self, arr):
        """Gradient of the backward root w.r.t. ``arr``.

        Unreached leaves get zeros. Asking for a non-requires_grad array is
        an error: such arrays never receive a gradient slot.
        """
        from .array import DualArray

        if not arr.requires_grad:
            raise ValueError("array has requires_grad=False, no gradient slot")
        nid = arr.tape_id if arr._tape is self._tape else None
        if nid is None or nid not in self._grads:
            return DualArray(np.zeros_like(arr.values))
        return DualArray(self._grads[nid].reshape(arr.values.shape))

    def __getitem__(self, arr):
        return self.get(arr)

    def norm(self, arr):
        return float(np.linalg.norm(self.get(arr).values))


def backward(root):
    """Run the backward pass from a scalar root.

    Visits each tape node at most once, in reverse topological (= reverse
    recording) order, and returns a GradientMap covering every registered
    leaf. Deterministic: identical tape gives bit-identical gradients.
    """
    from .array import DualArray

    if not isinstance(root, DualArray):
        raise TypeError("backward expects a DualArray root")
    if root.values.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.values.shape}")
    tape = root._tape
    if tape is None or root.tape_id is None:
        raise ValueError("root is not on the active tape (no recorded graph)")

    grads = {root.tape_id: np.ones_like(root.values)}
    for nid in range(root.tape_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for pid, pg in zip(node.inputs, parent_grads):
            if pid is None or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
        # interior grads and vjp closures are dead once visited; dropping them
        # releases forward buffers progressively and keeps peak memory flat
        del grads[nid]
        node.vjp = None
    # every leaf keeps a slot; unreached ones resolve to zeros in GradientMap.get
    return GradientMap(tape, grads)
