"""Lumped-parameter coronary flow: resistor network, boundary conditions, FFR.

Units inside the network are mmHg, mL/s and mm; element laws are evaluated
in SI and converted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .config import FlowConfig
from .core_io import CenterlineTree
from .errors import DataError, LocationError, NoConvergence, TopologyError

PA_PER_MMHG = 133.322387415
# mmHg·s/mL per Pa·s/m^3 and mmHg·s^2/mL^2 per Pa·s^2/m^6
LINEAR_TO_MMHG = 1e-6 / PA_PER_MMHG
QUADRATIC_TO_MMHG = 1e-12 / PA_PER_MMHG

MAX_ITER = 200
FLOW_TOL = 1e-9
PRESSURE_RTOL = 1e-10
DAMPING = 0.5


@dataclass(frozen=True, eq=False)
class Segment:
    """Vessel segment between two tree nodes.

    ``s`` runs from 0 to ``length`` (mm) along the segment; ``diameter`` is the
    effective lumen diameter sampled there.
    """

    s: np.ndarray
    diameter: np.ndarray
    parent_node: int
    child_node: int
    branch: int = 0
    branch_offset: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        d = np.asarray(self.diameter, dtype=float)
        if s.shape != d.shape or s.ndim != 1 or len(s) < 2:
            raise DataError("segment needs matching s/diameter arrays with >= 2 samples")
        if np.any(np.diff(s) <= 0) or s[0] != 0.0:
            raise DataError("segment positions must start at 0 and increase")
        if np.any(d <= 0):
            raise DataError("segment diameters must be positive")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "diameter", d)

    @property
    def length(self) -> float:
        return float(self.s[-1])


@dataclass(frozen=True, eq=False)
class VesselTree:
    segments: tuple
    n_nodes: int
    root: int = 0
    tree_side: str = "left"

    def __post_init__(self):
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise TopologyError("vessel tree has no segments")
        incoming = {}
        for k, seg in enumerate(segs):
            if seg.child_node in incoming:
                raise TopologyError(f"node {seg.child_node} has two parent segments")
            incoming[seg.child_node] = k
        if self.root in incoming:
            raise TopologyError("root node has an incoming segment")
        for node in range(self.n_nodes):
            if node != self.root and node not in incoming:
                raise TopologyError(f"node {node} is not connected to the tree")

    @property
    def leaves(self) -> list:
        parents = {seg.parent_node for seg in self.segments}
        return sorted(seg.child_node for seg in self.segments if seg.child_node not in parents)

    def leaf_segment(self, node: int) -> int:
        return next(k for k, seg in enumerate(self.segments) if seg.child_node == node)


def _median3(values: np.ndarray) -> np.ndarray:
    if len(values) < 3:
        return values.copy()
    return ndimage.median_filter(values, size=3, mode="nearest")


def tree_from_surfaces(surfaces: Sequence, topology: CenterlineTree) -> VesselTree:
    """Split branches at their children's attachment points into segments."""
    if len(surfaces) != len(topology.branches):
        raise TopologyError(f"{len(surfaces)} surfaces for {len(topology.branches)} branches")
    node_count = [1]

    def new_node() -> int:
        node_count[0] += 1
        return node_count[0] - 1

    segments = []
    start_node = {topology.root: 0}
    order = [topology.root]
    while order:
        k = order.pop(0)
        surf = surfaces[k]
        length = topology.branches[k].length
        s_planes = surf.plane_arc_length
        d_planes = _median3(np.asarray(surf.effective_diameter, dtype=float))
        kids = topology.children(k)
        cuts = sorted({s for _, s in kids if 0.0 < s < length})
        bounds = [0.0] + cuts + [length]
        nodes = [start_node[k]] + [new_node() for _ in bounds[1:]]
        at = dict(zip(bounds, nodes))
        for j, s in kids:
            key = 0.0 if s <= 0.0 else (length if s >= length else s)
            start_node[j] = at[key]
            order.append(j)
        for a, b, na, nb in zip(bounds[:-1], bounds[1:], nodes[:-1], nodes[1:]):
            inside = s_planes[(s_planes > a) & (s_planes < b)]
            pos = np.concatenate([[a], inside, [b]])
            diam = np.interp(pos, s_planes, d_planes)
            segments.append(Segment(pos - a, diam, na, nb, branch=k, branch_offset=a))
    return VesselTree(tuple(segments), node_count[0], 0, topology.tree_side)


def poiseuille_resistance(s, diameter, viscosity: float) -> float:
    """Integrated Poiseuille resistance (mmHg·s/mL); trapezoid rule in 1/d^4."""
    s_m = np.asarray(s, dtype=float) * 1e-3
    d_m = np.asarray(diameter, dtype=float) * 1e-3
    integrand = 128.0 * viscosity / (math.pi * d_m**4)
    return float(np.sum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(s_m))) * LINEAR_TO_MMHG


def expansion_resistance(diameter, density: float, loss: float) -> float:
    """Quadratic coefficient (mmHg·s²/mL²) of the expansion loss past the narrowest point."""
    d_m = np.asarray(diameter, dtype=float) * 1e-3
    area = math.pi * d_m**2 / 4.0
    a_min = float(area.min())
    a_distal = float(area[-1])
    if a_min >= a_distal:
        return 0.0
    return loss * density / 2.0 * (1.0 / a_min - 1.0 / a_distal) ** 2 * QUADRATIC_TO_MMHG


@dataclass(frozen=True, eq=False)
class FlowNetwork:
    """Resistor network; edge ``k`` follows ``dP = r_lin*Q + r_quad*Q*|Q|``.

    Edges listed in ``edge_a/edge_b`` connect tree nodes; every outlet node
    also drains to the venous reference through ``outlet_resistance``.
    """

    n_nodes: int
    root: int
    edge_a: np.ndarray
    edge_b: np.ndarray
    r_lin: np.ndarray
    r_quad: np.ndarray
    outlet_nodes: np.ndarray
    outlet_resistance: np.ndarray
    outlet_diameter: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ostial_pressure: float = 100.0
    venous_pressure: float = 0.0

    def __post_init__(self):
        for name in ("edge_a", "edge_b", "outlet_nodes"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        for name in ("r_lin", "r_quad", "outlet_resistance", "outlet_diameter"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.r_lin <= 0):
            raise DataError("linear resistances must be positive")
        if np.any(self.r_quad < 0):
            raise DataError("quadratic resistances must be non-negative")
        if np.any(self.outlet_resistance <= 0):
            raise DataError("outlet resistances must be positive")


def reference_tube_resistance(config: FlowConfig) -> float:
    d = config.reference_diameter_mm
    return poiseuille_resistance([0.0, config.reference_length_mm], [d, d], config.viscosity_pa_s)


def calibrate_outlet_scale(config: FlowConfig) -> float:
    """Outlet constant giving ``reference_ffr`` on a uniform reference tube."""
    r_tube = reference_tube_resistance(config)
    p0, pv, target = config.ostial_pressure_mmhg, config.venous_pressure_mmhg, config.reference_ffr
    # divider: (target*p0 - pv) / (p0 - pv) = R_out / (R_tube + R_out)
    frac = (target * p0 - pv) / (p0 - pv)
    r_out = frac / (1.0 - frac) * r_tube
    return r_out / config.reference_diameter_mm ** config.outlet_exponent


def outlet_resistances(diameters, config: FlowConfig, outlet_scale: Optional[float] = None) -> np.ndarray:
    """Per-outlet resistances proportional to ``d ** outlet_exponent``.

    Within one tree the constant is set so the outlets in parallel present the
    calibrated total resistance ``outlet_scale * reference_diameter ** exponent``.
    """
    d = np.asarray(diameters, dtype=float)
    if np.any(d <= 0):
        raise DataError("outlet diameters must be positive")
    scale = calibrate_outlet_scale(config) if outlet_scale is None else outlet_scale
    total = scale * config.reference_diameter_mm ** config.outlet_exponent
    shape = d ** config.outlet_exponent
    # parallel: 1/total = sum(1/(c*shape)) -> c = total * sum(1/shape)
    c = total * np.sum(1.0 / shape)
    return c * shape


def build_network(tree: VesselTree, config: FlowConfig = FlowConfig(), outlet_scale: Optional[float] = None) -> FlowNetwork:
    if outlet_scale is None:
        outlet_scale = config.outlet_scale
    r_lin, r_quad = [], []
    for seg in tree.segments:
        r_lin.append(poiseuille_resistance(seg.s, seg.diameter, config.viscosity_pa_s))
        r_quad.append(expansion_resistance(seg.diameter, config.density_kg_m3, config.expansion_loss))
    leaves = tree.leaves
    d_out = np.array([tree.segments[tree.leaf_segment(n)].diameter[-1] for n in leaves])
    return FlowNetwork(
        n_nodes=tree.n_nodes,
        root=tree.root,
        edge_a=[seg.parent_node for seg in tree.segments],
        edge_b=[seg.child_node for seg in tree.segments],
        r_lin=r_lin,
        r_quad=r_quad,
        outlet_nodes=leaves,
        outlet_resistance=outlet_resistances(d_out, config, outlet_scale),
        outlet_diameter=d_out,
        ostial_pressure=config.ostial_pressure_mmhg,
        venous_pressure=config.venous_pressure_mmhg,
    )


@dataclass(frozen=True, eq=False)
class FlowResult:
    node_pressures: np.ndarray
    edge_flows: np.ndarray
    outlet_flows: np.ndarray
    ostial_pressure: float
    iterations: int
    solver_residual: float

    def ffr_at_node(self, node: int) -> float:
        return float(self.node_pressures[node] / self.ostial_pressure)


def edge_flow(dp, r_lin, r_quad) -> np.ndarray:
    """Exact inverse of ``dp = r_lin*Q + r_quad*Q*|Q|``."""
    dp = np.asarray(dp, dtype=float)
    r_lin = np.asarray(r_lin, dtype=float)
    r_quad = np.asarray(r_quad, dtype=float)
    mag = np.abs(dp)
    with np.errstate(divide="ignore", invalid="ignore"):
        # rationalised root avoids cancellation when r_quad*|dp| << r_lin^2
        q_nl = 2.0 * mag / (r_lin + np.sqrt(r_lin * r_lin + 4.0 * r_quad * mag))
    return np.sign(dp) * np.where(r_quad > 0, q_nl, mag / r_lin)


def _imbalance(net: FlowNetwork, p: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    q = edge_flow(p[net.edge_a] - p[net.edge_b], net.r_lin, net.r_quad)
    q_out = (p[net.outlet_nodes] - net.venous_pressure) / net.outlet_resistance
    balance = np.zeros(net.n_nodes)
    np.add.at(balance, net.edge_a, -q)
    np.add.at(balance, net.edge_b, q)
    np.add.at(balance, net.outlet_nodes, -q_out)
    balance[net.root] = 0.0
    return q, q_out, float(np.max(np.abs(balance))) if len(balance) else 0.0


def _linear_solve(net: FlowNetwork, g_edge: np.ndarray) -> np.ndarray:
    n = net.n_nodes
    lap = np.zeros((n, n))
    rhs = np.zeros(n)
    a, b = net.edge_a, net.edge_b
    np.add.at(lap, (a, a), g_edge)
    np.add.at(lap, (b, b), g_edge)
    np.add.at(lap, (a, b), -g_edge)
    np.add.at(lap, (b, a), -g_edge)
    g_out = 1.0 / net.outlet_resistance
    np.add.at(lap, (net.outlet_nodes, net.outlet_nodes), g_out)
    np.add.at(rhs, net.outlet_nodes, g_out * net.venous_pressure)
    free = np.array([k for k in range(n) if k != net.root], dtype=np.int64)
    p = np.zeros(n)
    p[net.root] = net.ostial_pressure
    if len(free):
        rhs_f = rhs[free] - lap[np.ix_(free, [net.root])][:, 0] * net.ostial_pressure
        p[free] = np.linalg.solve(lap[np.ix_(free, free)], rhs_f)
    return p


def solve_flow(net: FlowNetwork, max_iter: int = MAX_ITER, flow_tol: float = FLOW_TOL, pressure_rtol: float = PRESSURE_RTOL) -> FlowResult:
    """Damped fixed point on effective conductances ``1/(r_lin + r_quad*|Q|)``."""
    q = np.zeros(len(net.r_lin))
    p_prev = None
    residual = float("inf")
    for it in range(1, max_iter + 1):
        g = 1.0 / (net.r_lin + net.r_quad * np.abs(q))
        p = _linear_solve(net, g)
        q_lin = g * (p[net.edge_a] - p[net.edge_b])
        q = q_lin if it == 1 else DAMPING * q_lin + (1.0 - DAMPING) * q
        q_exact, q_out, residual = _imbalance(net, p)
        if p_prev is not None:
            change = np.max(np.abs(p - p_prev)) / max(np.max(np.abs(p)), 1e-300)
            if residual < flow_tol and change < pressure_rtol:
                return FlowResult(p, q_exact, q_out, net.ostial_pressure, it, residual)
        if not np.any(net.r_quad > 0) and residual < flow_tol:
            return FlowResult(p, q_exact, q_out, net.ostial_pressure, it, residual)
        p_prev = p
    raise NoConvergence(
        f"flow solver did not converge in {max_iter} iterations (residual {residual:.3e} mL/s)",
        residual=residual,
        iterations=max_iter,
    )


def ffr_at(result: FlowResult, tree: VesselTree, segment: int, position: float) -> float:
    """Pressure ratio at ``position`` mm along ``segment`` (linear in between nodes)."""
    if not 0 <= segment < len(tree.segments):
        raise LocationError(f"segment {segment} does not exist")
    seg = tree.segments[segment]
    if not -1e-12 <= position <= seg.length + 1e-12:
        raise LocationError(f"position {position} mm outside segment {segment} (length {seg.length:.3f} mm)")
    t = min(max(position / seg.length, 0.0), 1.0)
    pa = result.node_pressures[seg.parent_node]
    pb = result.node_pressures[seg.child_node]
    return float((pa + (pb - pa) * t) / result.ostial_pressure)


def single_tube_tree(length: float, diameter, s=None) -> VesselTree:
    """One-segment tree; ``diameter`` may be a scalar or a profile over ``s``."""
    if s is None:
        s = np.array([0.0, length])
        diameter = np.full(2, float(diameter))
    return VesselTree((Segment(np.asarray(s, float), np.asarray(diameter, float), 0, 1),), 2)
