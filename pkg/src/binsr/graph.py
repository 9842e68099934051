"""Static layer graphs with information-flow analysis.

A LayerGraph is a DAG of typed nodes built in topological order. Forward
evaluation interprets the node list; flow analysis answers two structural
questions about binarization:

    * does a real-valued path exist from Input to Output that crosses no
      sign op and no binarized conv (both destroy full-precision content)?
    * per binarized conv: does its unit see full-precision input, and does
      a surrogate-free gradient route exist from its output back to the
      loss (no sign, no binarized conv on the way to Output)?

Both are pure graph reachability; weights never enter into it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import quantize as Q
from . import tensor as T
from .errors import ConfigError

NODE_KINDS = ("Input", "Sign", "BinConv", "FPConv", "BN", "Add", "Repeat",
              "PixelShuffle", "Output")

# kinds whose output is a real-valued transform of real-valued input;
# Sign and BinConv binarize and therefore break full-precision flow
_FP_TRANSPARENT = ("Input", "FPConv", "BN", "Add", "Repeat", "PixelShuffle",
                   "Output")


class Node:
    __slots__ = ("id", "kind", "preds", "params")

    def __init__(self, node_id: str, kind: str, preds, params: dict):
        self.id = node_id
        self.kind = kind
        self.preds = list(preds)
        self.params = params

    def __repr__(self):
        return f"Node({self.id!r}, {self.kind}, preds={self.preds})"


class LayerGraph:
    """Append-only DAG; nodes must be added after all their predecessors."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._by_id: dict[str, Node] = {}

    def add(self, kind: str, node_id: str, preds=(), **params) -> str:
        if kind not in NODE_KINDS:
            raise ConfigError(f"unknown node kind {kind!r}")
        if node_id in self._by_id:
            raise ConfigError(f"duplicate node id {node_id!r}")
        for p in preds:
            if p not in self._by_id:
                raise ConfigError(
                    f"node {node_id!r} references unknown predecessor {p!r}")
        node = Node(node_id, kind, preds, params)
        self.nodes.append(node)
        self._by_id[node_id] = node
        return node_id

    def node(self, node_id: str) -> Node:
        return self._by_id[node_id]

    def successors(self) -> dict[str, list[str]]:
        succ: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for p in n.preds:
                succ[p].append(n.id)
        return succ

    # -- validation ---------------------------------------------------------

    def validate(self):
        inputs = [n for n in self.nodes if n.kind == "Input"]
        outputs = [n for n in self.nodes if n.kind == "Output"]
        if len(inputs) != 1 or len(outputs) != 1:
            raise ConfigError(
                f"graph needs exactly one Input and one Output, found "
                f"{len(inputs)} / {len(outputs)}")
        # append order with preds-before-use makes cycles impossible, but a
        # hand-built graph could still dangle: every non-Input needs preds
        for n in self.nodes:
            if n.kind == "Input":
                if n.preds:
                    raise ConfigError(f"Input node {n.id!r} cannot have predecessors")
            elif not n.preds:
                raise ConfigError(f"node {n.id!r} has no predecessors")
        for n in self.nodes:
            if n.kind == "BinConv":
                self._check_binarized_feed(n)

    def _check_binarized_feed(self, conv: Node):
        # the activation chain into a binarized conv must pass a Sign
        cur = self.node(conv.preds[0])
        while True:
            if cur.kind == "Sign":
                return
            if cur.kind in ("BN", "PixelShuffle", "Repeat") and cur.preds:
                cur = self.node(cur.preds[0])
                continue
            raise ConfigError(
                f"binarized conv {conv.id!r} consumes non-binarized "
                f"activations (chain reaches {cur.kind} {cur.id!r})")

    # -- information flow -----------------------------------------------------

    def analyze_flow(self) -> "FlowReport":
        self.validate()
        succ = self.successors()

        fp_reach: set[str] = set()
        for n in self.nodes:  # topological order
            if n.kind == "Input":
                fp_reach.add(n.id)
            elif n.kind in _FP_TRANSPARENT and any(p in fp_reach for p in n.preds):
                fp_reach.add(n.id)

        output_id = next(n.id for n in self.nodes if n.kind == "Output")
        has_fp_path = output_id in fp_reach

        severed: list[str] = []
        for n in self.nodes:
            if n.id not in fp_reach or n.id == output_id:
                continue
            nxt = succ[n.id]
            if nxt and not any(s in fp_reach for s in nxt):
                # this fp stream dead-ends here; name the binarizers eating it
                severed.extend(s for s in nxt
                               if self.node(s).kind in ("Sign", "BinConv"))

        # nodes with a Sign-free and BinConv-free route to Output (gradient
        # bypass existence, walked backwards)
        grad_reach: set[str] = {output_id}
        for n in reversed(self.nodes):
            if n.id in grad_reach:
                continue
            for s in succ[n.id]:
                if s in grad_reach and self.node(s).kind not in ("Sign", "BinConv"):
                    grad_reach.add(n.id)
                    break

        flags = {}
        for n in self.nodes:
            if n.kind != "BinConv":
                continue
            sign_node = self.node(n.params["sign"])
            join = n.params.get("unit_out", n.id)
            flags[n.id] = BinConvFlags(
                receives_fp_input=sign_node.preds[0] in fp_reach,
                receives_accurate_grad=join in grad_reach,
            )
        return FlowReport(has_fp_path, sorted(set(severed)), flags)

    # -- execution ------------------------------------------------------------

    def forward(self, x: T.Tensor, mode: str = "train") -> T.Tensor:
        """Interpret the graph.

        Modes:
            train       batch-stat BN, dense binarized convs, tape-recordable
            eval        running-stat BN, packed XNOR dispatch, no grads
            eval-dense  running-stat BN, dense float binarized convs
        """
        if mode not in ("train", "eval", "eval-dense"):
            raise ConfigError(f"unknown forward mode {mode!r}")
        self.validate()
        vals: dict[str, T.Tensor] = {}
        out: Optional[T.Tensor] = None
        for n in self.nodes:
            try:
                val = self._eval_node(n, vals, x, mode)
            except ConfigError as e:
                raise ConfigError(f"at node {n.id!r}: {e}") from e
            vals[n.id] = val
            if n.kind == "Output":
                out = val
        assert out is not None
        return out

    def _eval_node(self, n: Node, vals, x: T.Tensor, mode: str) -> T.Tensor:
        p = n.params
        if n.kind == "Input":
            want = p.get("channels")
            if want is not None and x.shape[1] != want:
                raise ConfigError(
                    f"expected {want}-channel input, got {x.shape[1]}")
            return x
        args = [vals[q] for q in n.preds]
        if n.kind == "Output":
            return args[0]
        if n.kind == "Sign":
            return Q.sign_forward(args[0], quantizer=p["quantizer"])
        if n.kind == "FPConv":
            return T.conv2d(args[0], p["weight"], p.get("bias"),
                            stride=p["stride"], pad=p["pad"])
        if n.kind == "BinConv":
            bw = Q.binarize_weights(p["latent"])
            if mode == "eval":
                plane = Q.pack_bits(args[0].data, pad=p["pad"])
                return Q.xnor_conv(plane, Q.pack_weights(bw),
                                   stride=p["stride"], pad=p["pad"])
            return Q.binconv_forward(args[0], bw, stride=p["stride"],
                                     pad=p["pad"], quantizer=p["quantizer"])
        if n.kind == "BN":
            bn_mode = "train" if mode == "train" else "eval"
            return T.batchnorm(args[0], p["gamma"], p["beta"], p["stats"],
                               mode=bn_mode)
        if n.kind == "Add":
            return T.add(args[0], args[1])
        if n.kind == "Repeat":
            return T.repeat_channels(args[0], p["k"])
        if n.kind == "PixelShuffle":
            return T.pixel_shuffle(args[0], p["r"])
        raise ConfigError(f"unhandled node kind {n.kind}")  # pragma: no cover

    # -- parameters and serialization ------------------------------------------

    def parameters(self) -> list[tuple[str, T.Tensor]]:
        """Trainable tensors in graph order as (name, tensor)."""
        out = []
        for n in self.nodes:
            if n.kind == "FPConv":
                out.append((f"{n.id}.weight", n.params["weight"]))
                if n.params.get("bias") is not None:
                    out.append((f"{n.id}.bias", n.params["bias"]))
            elif n.kind == "BinConv":
                out.append((f"{n.id}.latent", n.params["latent"]))
            elif n.kind == "BN":
                out.append((f"{n.id}.gamma", n.params["gamma"]))
                out.append((f"{n.id}.beta", n.params["beta"]))
        return out

    def running_stats(self) -> list[tuple[str, T.RunningStats]]:
        return [(f"{n.id}.stats", n.params["stats"])
                for n in self.nodes if n.kind == "BN"]

    def dump(self) -> str:
        """Plain-text edge list: one line per node, id kind -> successors."""
        succ = self.successors()
        lines = []
        for n in self.nodes:
            tail = " ".join(succ[n.id])
            lines.append(f"{n.id} {n.kind} -> {tail}".rstrip())
        return "\n".join(lines) + "\n"


@dataclass
class BinConvFlags:
    receives_fp_input: bool
    receives_accurate_grad: bool


@dataclass
class FlowReport:
    has_fp_path: bool
    severed_at: list = field(default_factory=list)
    binconv_flags: dict = field(default_factory=dict)

    def all_fp_input(self) -> bool:
        return all(f.receives_fp_input for f in self.binconv_flags.values())

    def all_accurate_grad(self) -> bool:
        return all(f.receives_accurate_grad for f in self.binconv_flags.values())


def analyze_flow(g: LayerGraph) -> FlowReport:
    return g.analyze_flow()


def forward(g: LayerGraph, x: T.Tensor, mode: str = "train") -> T.Tensor:
    return g.forward(x, mode)
