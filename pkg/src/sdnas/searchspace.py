"""Micro cell-based search space over vector features.

A cell is a small DAG whose edges carry a softmax-weighted mix of candidate
operations; the supernet stacks several cells that share one set of mixing
logits ``alpha`` while keeping their own operation weights.  Discretization
picks the strongest non-zero operation per edge and optionally keeps only the
top-ranked incoming edges per node.
"""
from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import RngState, Tensor, derive_seed

OP_ORDER: tuple[str, ...] = ("zero", "identity", "linear", "relu_linear", "tanh_linear")
PARAMETRIC_OPS = frozenset({"linear", "relu_linear", "tanh_linear"})


@dataclass(frozen=True)
class CellTopology:
    """DAG over node 0 (input) and ``num_intermediate`` further nodes.

    ``edges`` are (source, destination) pairs in canonical order, sorted by
    (destination, source).  The cell output is the sum of all intermediate
    node values.
    """

    num_intermediate: int
    edges: tuple[tuple[int, int], ...]

    @classmethod
    def complete(cls, num_intermediate: int = 2) -> "CellTopology":
        if num_intermediate < 1:
            raise ValueError("num_intermediate must be >= 1")
        edges = tuple(
            (src, dst)
            for dst in range(1, num_intermediate + 1)
            for src in range(dst)
        )
        return cls(num_intermediate=num_intermediate, edges=edges)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def edge_index(self, src: int, dst: int) -> int:
        try:
            return self.edges.index((src, dst))
        except ValueError:
            raise ValueError(f"edge {src}->{dst} not in topology") from None

    def incoming(self, dst: int) -> list[int]:
        return [i for i, (_, d) in enumerate(self.edges) if d == dst]


@dataclass(frozen=True)
class Genotype:
    """One chosen operation per retained edge; dropped edges mean 'no path'."""

    choices: tuple[tuple[int, str], ...]
    num_intermediate: int = 2
    retain: object = "all"

    def __post_init__(self):
        seen = set()
        for e, op in self.choices:
            if e in seen:
                raise ValueError(f"genotype: duplicate edge index {e}")
            if op == "zero":
                raise ValueError("genotype: retained edge cannot carry the zero op")
            seen.add(e)
        object.__setattr__(self, "choices", tuple(sorted(self.choices)))

    def op_for(self, edge: int) -> str | None:
        for e, op in self.choices:
            if e == edge:
                return op
        return None


# ---------------------------------------------------------------------------
# genotype text format
# ---------------------------------------------------------------------------

_HEADER_RE = re.compile(r"^genotype v1; nodes=(\d+); retain=(all|\d+)$")
_EDGE_RE = re.compile(r"^edge (\d+)->(\d+): ([a-z_]+)$")


def genotype_serialize(g: Genotype) -> str:
    topo = CellTopology.complete(g.num_intermediate)
    lines = [f"genotype v1; nodes={g.num_intermediate}; retain={g.retain}"]
    for e, op in g.choices:
        src, dst = topo.edges[e]
        lines.append(f"edge {src}->{dst}: {op}")
    return "\n".join(lines) + "\n"


def genotype_parse(text: str) -> Genotype:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("genotype parse error at line 1: empty input")
    m = _HEADER_RE.match(lines[0].strip())
    if not m:
        raise ValueError(f"genotype parse error at line 1: bad header {lines[0]!r}")
    nodes = int(m.group(1))
    retain = m.group(2) if m.group(2) == "all" else int(m.group(2))
    topo = CellTopology.complete(nodes)
    choices: list[tuple[int, str]] = []
    seen: set[int] = set()
    for lineno, ln in enumerate(lines[1:], start=2):
        em = _EDGE_RE.match(ln.strip())
        if not em:
            raise ValueError(f"genotype parse error at line {lineno}: {ln!r}")
        src, dst, op = int(em.group(1)), int(em.group(2)), em.group(3)
        if op not in OP_ORDER:
            raise ValueError(f"genotype parse error at line {lineno}: unknown op {op!r}")
        if op == "zero":
            raise ValueError(
                f"genotype parse error at line {lineno}: zero cannot be retained"
            )
        try:
            e = topo.edge_index(src, dst)
        except ValueError:
            raise ValueError(
                f"genotype parse error at line {lineno}: edge {src}->{dst} not in a"
                f" {nodes}-node cell"
            ) from None
        if e in seen:
            raise ValueError(
                f"genotype parse error at line {lineno}: duplicate edge {src}->{dst}"
            )
        seen.add(e)
        choices.append((e, op))
    return Genotype(choices=tuple(choices), num_intermediate=nodes, retain=retain)


# ---------------------------------------------------------------------------
# discretization and enumeration
# ---------------------------------------------------------------------------


def _softmax_rows(alpha: np.ndarray) -> np.ndarray:
    z = alpha - alpha.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def discretize(alpha, topo: CellTopology, ops: Sequence[str] = OP_ORDER, retain="all") -> Genotype:
    """Argmax operation per edge (zero excluded), then keep the strongest
    ``retain`` incoming edges per destination node.

    Ties pick the lowest operation index; edge-rank ties keep the lowest edge
    index.
    """
    a = alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha, dtype=np.float64)
    if a.shape != (topo.num_edges, len(ops)):
        raise ValueError(
            f"alpha shape {a.shape} does not match {topo.num_edges} edges x {len(ops)} ops"
        )
    if not np.all(np.isfinite(a)):
        raise ValueError("alpha contains non-finite entries")
    candidates = [i for i, op in enumerate(ops) if op != "zero"]
    if not candidates:
        raise ValueError("no non-zero operations to choose from")
    chosen = []
    for e in range(topo.num_edges):
        vals = a[e, candidates]
        best = candidates[int(np.argmax(vals))]  # argmax keeps the first max
        chosen.append(best)
    if retain == "all":
        kept = list(range(topo.num_edges))
    else:
        k = int(retain)
        weights = _softmax_rows(a)
        kept = []
        for dst in range(1, topo.num_intermediate + 1):
            inc = topo.incoming(dst)
            if k > len(inc):
                raise ValueError(
                    f"retain={k} exceeds the {len(inc)} incoming edges of node {dst}"
                )
            ranked = sorted(inc, key=lambda e: (-weights[e, chosen[e]], e))
            kept.extend(sorted(ranked[:k]))
    choices = tuple((e, ops[chosen[e]]) for e in sorted(kept))
    return Genotype(choices=choices, num_intermediate=topo.num_intermediate, retain=retain)


def enumerate_genotypes(
    topo: CellTopology,
    ops: Sequence[str] = OP_ORDER,
    retain="all",
    include_zero: bool = False,
    cap: int = 4096,
) -> list[Genotype]:
    """Exhaustive, duplicate-free genotype list in canonical order.

    With ``include_zero`` the zero tag acts as a drop-the-edge surrogate, so a
    5-op space over 3 edges yields 5**3 genotypes instead of 4**3.
    """
    nonzero = [op for op in ops if op != "zero"]
    per_edge = (["zero"] if include_zero else []) + nonzero
    if retain == "all":
        total = len(per_edge) ** topo.num_edges
        if total > cap:
            raise ValueError(f"enumeration of {total} genotypes exceeds cap {cap}")
        out = []
        for assign in itertools.product(per_edge, repeat=topo.num_edges):
            choices = tuple((e, op) for e, op in enumerate(assign) if op != "zero")
            out.append(Genotype(choices=choices, num_intermediate=topo.num_intermediate, retain=retain))
        return out
    k = int(retain)
    node_sets = []
    for dst in range(1, topo.num_intermediate + 1):
        inc = topo.incoming(dst)
        if k > len(inc):
            raise ValueError(f"retain={k} exceeds the {len(inc)} incoming edges of node {dst}")
        node_sets.append(list(itertools.combinations(inc, k)))
    n_edge_sets = math.prod(len(s) for s in node_sets)
    total = n_edge_sets * len(per_edge) ** (k * topo.num_intermediate)
    if total > cap:
        raise ValueError(f"enumeration of {total} genotypes exceeds cap {cap}")
    out = []
    for combo in itertools.product(*node_sets):
        edges = sorted(e for grp in combo for e in grp)
        for assign in itertools.product(per_edge, repeat=len(edges)):
            choices = tuple((e, op) for e, op in zip(edges, assign) if op != "zero")
            out.append(Genotype(choices=choices, num_intermediate=topo.num_intermediate, retain=retain))
    return out


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


def _init_linear(rng: RngState, fan_in: int, fan_out: int, dtype, gain: float = 1.0) -> tuple[Tensor, Tensor]:
    w = Tensor(rng.normal((fan_in, fan_out), 0.0, gain / np.sqrt(fan_in)), requires_grad=True, dtype=dtype)
    b = Tensor(np.zeros(fan_out), requires_grad=True, dtype=dtype)
    return w, b


def _apply_op(op: str, x: Tensor, params: dict[str, Tensor], prefix: str, weight: Tensor | None):
    """One candidate op, optionally scaled by a mixing weight (0-d tensor)."""
    if op == "zero":
        return None
    if op == "identity":
        out = x
    else:
        h = dc.add(dc.matmul(x, params[prefix + ".W"]), params[prefix + ".b"])
        if op == "relu_linear":
            h = dc.relu(h)
        elif op == "tanh_linear":
            h = dc.tanh(h)
        elif op != "linear":
            raise ValueError(f"unknown op {op!r}")
        out = h
    return out if weight is None else dc.mul(weight, out)


def mixed_edge_forward(
    x: Tensor,
    edge: int,
    alpha: Tensor,
    edge_params: dict[str, Tensor],
    ops: Sequence[str] = OP_ORDER,
    prefix: str = "",
) -> Tensor:
    """Softmax(alpha[edge])-weighted sum of the candidate ops applied to x.

    ``edge_params`` maps "<prefix><op>.W"/".b" for each parametric op.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    weights = dc.softmax_lastdim(dc.row(alpha, edge))
    acc = None
    for o, op in enumerate(ops):
        term = _apply_op(op, x, edge_params, prefix + op, dc.at(weights, o))
        if term is not None:
            acc = term if acc is None else dc.add(acc, term)
    if acc is None:
        raise ValueError("mixed edge has no non-zero candidate operations")
    return acc


class Supernet:
    """Stacked cells with shared mixing logits and per-cell operation weights."""

    def __init__(self, topo, ops, num_cells, feature_dim, in_dim, class_count, alpha, params):
        self.topo = topo
        self.ops = tuple(ops)
        self.num_cells = num_cells
        self.feature_dim = feature_dim
        self.in_dim = in_dim
        self.class_count = class_count
        self.alpha = alpha
        self.params = params  # name -> Tensor, canonical insertion order

    @classmethod
    def init(
        cls,
        seed: int,
        topo: CellTopology | None = None,
        ops: Sequence[str] = OP_ORDER,
        num_cells: int = 4,
        feature_dim: int = 16,
        in_dim: int = 2,
        class_count: int = 2,
        alpha_scale: float = 1e-3,
        init_gain: float = 1.0,
        dtype=np.float64,
    ) -> "Supernet":
        topo = topo or CellTopology.complete(2)
        rng = RngState(derive_seed(seed, "supernet-init"))
        params: dict[str, Tensor] = {}
        params["stem.W"], params["stem.b"] = _init_linear(rng, in_dim, feature_dim, dtype)
        for c in range(num_cells):
            for e in range(topo.num_edges):
                for op in ops:
                    if op in PARAMETRIC_OPS:
                        w, b = _init_linear(rng, feature_dim, feature_dim, dtype, gain=init_gain)
                        params[f"cell{c}.edge{e}.{op}.W"] = w
                        params[f"cell{c}.edge{e}.{op}.b"] = b
        params["head.W"], params["head.b"] = _init_linear(rng, feature_dim, class_count, dtype)
        alpha = Tensor(
            rng.normal((topo.num_edges, len(ops)), 0.0, alpha_scale),
            requires_grad=True,
            dtype=dtype,
        )
        return cls(topo, ops, num_cells, feature_dim, in_dim, class_count, alpha, params)

    def w_tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, x) -> Tensor:
        """Logits for a batch; builds graph nodes on the active tape if any."""
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise dc.ShapeError(
                f"supernet: input shape {x.shape} does not match in_dim {self.in_dim}"
            )
        h = dc.add(dc.matmul(Tensor(x, dtype=self.alpha.dtype), self.params["stem.W"]), self.params["stem.b"])
        weights = dc.softmax_lastdim(self.alpha)
        # the mixing scalars are shared across cells; slice them out once
        wscal = [
            [dc.at(wrow, o) for o in range(len(self.ops))]
            for wrow in (dc.row(weights, e) for e in range(self.topo.num_edges))
        ]
        for c in range(self.num_cells):
            h = self._cell(c, h, wscal)
        return dc.add(dc.matmul(h, self.params["head.W"]), self.params["head.b"])

    def _cell(self, c: int, x: Tensor, wscal) -> Tensor:
        nodes = [x]
        for dst in range(1, self.topo.num_intermediate + 1):
            acc = None
            for e in self.topo.incoming(dst):
                src = self.topo.edges[e][0]
                mixed = None
                for o, op in enumerate(self.ops):
                    term = _apply_op(
                        op, nodes[src], self.params, f"cell{c}.edge{e}.{op}", wscal[e][o]
                    )
                    if term is not None:
                        mixed = term if mixed is None else dc.add(mixed, term)
                if mixed is not None:
                    acc = mixed if acc is None else dc.add(acc, mixed)
            nodes.append(acc)
        out = nodes[1]
        for j in range(2, len(nodes)):
            out = dc.add(out, nodes[j])
        return out

    def copy(self) -> "Supernet":
        alpha = Tensor(self.alpha.data.copy(), requires_grad=True)
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return Supernet(
            self.topo, self.ops, self.num_cells, self.feature_dim,
            self.in_dim, self.class_count, alpha, params,
        )

    def w_checksum(self) -> str:
        return dc.array_checksum(*(t.data for t in self.params.values()))

    def alpha_checksum(self) -> str:
        return dc.array_checksum(self.alpha.data)


class DiscreteNet:
    """Standalone network realizing one genotype; fresh parameters per seed."""

    def __init__(self, genotype, num_cells, feature_dim, in_dim, class_count, params):
        self.genotype = genotype
        self.topo = CellTopology.complete(genotype.num_intermediate)
        self.num_cells = num_cells
        self.feature_dim = feature_dim
        self.in_dim = in_dim
        self.class_count = class_count
        self.params = params

    @classmethod
    def init(
        cls,
        genotype: Genotype,
        num_cells: int = 4,
        feature_dim: int = 16,
        in_dim: int = 2,
        class_count: int = 2,
        seed: int = 0,
        dtype=np.float64,
    ) -> "DiscreteNet":
        topo = CellTopology.complete(genotype.num_intermediate)
        for e, op in genotype.choices:
            if not 0 <= e < topo.num_edges:
                raise ValueError(f"genotype edge index {e} out of range")
            if op not in OP_ORDER:
                raise ValueError(f"genotype op {op!r} unknown")
        rng = RngState(derive_seed(seed, "discrete-init"))
        params: dict[str, Tensor] = {}
        params["stem.W"], params["stem.b"] = _init_linear(rng, in_dim, feature_dim, dtype)
        for c in range(num_cells):
            for e, op in genotype.choices:
                if op in PARAMETRIC_OPS:
                    w, b = _init_linear(rng, feature_dim, feature_dim, dtype)
                    params[f"cell{c}.edge{e}.{op}.W"] = w
                    params[f"cell{c}.edge{e}.{op}.b"] = b
        params["head.W"], params["head.b"] = _init_linear(rng, feature_dim, class_count, dtype)
        return cls(genotype, num_cells, feature_dim, in_dim, class_count, params)

    def w_tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, x) -> Tensor:
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise dc.ShapeError(
                f"discrete net: input shape {x.shape} does not match in_dim {self.in_dim}"
            )
        dtype = self.params["stem.W"].dtype
        h = dc.add(dc.matmul(Tensor(x, dtype=dtype), self.params["stem.W"]), self.params["stem.b"])
        for c in range(self.num_cells):
            h = self._cell(c, h)
        return dc.add(dc.matmul(h, self.params["head.W"]), self.params["head.b"])

    def _cell(self, c: int, x: Tensor) -> Tensor:
        n = x.shape[0]
        zeros = None
        nodes = [x]
        for dst in range(1, self.topo.num_intermediate + 1):
            acc = None
            for e in self.topo.incoming(dst):
                op = self.genotype.op_for(e)
                if op is None:
                    continue
                src = self.topo.edges[e][0]
                term = _apply_op(op, nodes[src], self.params, f"cell{c}.edge{e}.{op}", None)
                acc = term if acc is None else dc.add(acc, term)
            if acc is None:
                if zeros is None:
                    zeros = Tensor(np.zeros((n, self.feature_dim)))
                acc = zeros
            nodes.append(acc)
        out = nodes[1]
        for j in range(2, len(nodes)):
            out = dc.add(out, nodes[j])
        return out


def build_discrete_net(genotype: Genotype, num_cells: int, feature_dim: int, seed: int, **kw) -> DiscreteNet:
    return DiscreteNet.init(genotype, num_cells=num_cells, feature_dim=feature_dim, seed=seed, **kw)


def supernet_forward(net: Supernet, x) -> Tensor:
    return net.forward(x)
