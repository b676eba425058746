"""Append-only computation graph with reverse-mode differentiation."""

import numpy as np

from ..errors import ParameterError


class Tensor:
    """Handle to one node of a :class:`Graph`. Values are float64 and never mutated."""

    __slots__ = ("graph", "id", "value", "requires_grad", "name", "aux")

    def __init__(self, graph, node_id, value, requires_grad, name=None):
        self.graph = graph
        self.id = node_id
        self.value = value
        self.requires_grad = requires_grad
        self.name = name
        self.aux = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"<Tensor{tag} #{self.id} shape={self.value.shape}>"


class _Node:
    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op, inputs, vjp):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class Graph:
    def __init__(self):
        self.nodes = []
        self.tensors = []

    def _append(self, op, inputs, value, vjp, requires_grad, name=None):
        value = np.asarray(value, dtype=np.float64)
        value.flags.writeable = False
        t = Tensor(self, len(self.nodes), value, requires_grad, name)
        self.nodes.append(_Node(op, tuple(i.id for i in inputs), vjp))
        self.tensors.append(t)
        return t

    def release(self):
        """Drop all nodes; tensor handles keep their values but can no longer be differentiated.

        Tensors point back at their graph, so a finished graph is only freed by the
        cycle collector.  Call this when done to return the memory at once.
        """
        self.nodes = []
        self.tensors = []

    def leaf(self, value, requires_grad=True, name=None):
        value = np.array(value, dtype=np.float64)
        return self._append("leaf", (), value, None, requires_grad, name)

    def constant(self, value, name=None):
        return self.leaf(value, requires_grad=False, name=name)

    def record(self, op, inputs, value, vjp):
        """Add an op node. ``vjp(g)`` maps the output adjoint to one adjoint per input."""
        for t in inputs:
            if t.graph is not self:
                raise ParameterError(f"{op}: input {t!r} belongs to another graph")
        needs = any(t.requires_grad for t in inputs)
        return self._append(op, inputs, value, vjp if needs else None, needs)

    def backward(self, root):
        """Adjoints of ``root`` for every leaf that requires grad (zeros where unreached)."""
        if root.graph is not self:
            raise ParameterError("root belongs to another graph")
        if root.value.size != 1:
            raise ParameterError(f"backward needs a scalar root, got shape {root.value.shape}")
        adj = [None] * (root.id + 1)
        adj[root.id] = np.ones_like(root.value)
        for nid in range(root.id, -1, -1):
            g = adj[nid]
            node = self.nodes[nid]
            if g is None or node.vjp is None:
                continue
            grads = node.vjp(g)
            for iid, gi in zip(node.inputs, grads):
                if gi is None or not self.tensors[iid].requires_grad:
                    continue
                adj[iid] = gi if adj[iid] is None else adj[iid] + gi
            adj[nid] = None
        out = {}
        for t in self.tensors[: root.id + 1]:
            if self.nodes[t.id].op == "leaf" and t.requires_grad:
                g = adj[t.id]
                out[t] = np.zeros_like(t.value) if g is None else np.asarray(g, dtype=np.float64).reshape(t.value.shape)
        for t in self.tensors[root.id + 1:]:
            if self.nodes[t.id].op == "leaf" and t.requires_grad:
                out[t] = np.zeros_like(t.value)
        return out
