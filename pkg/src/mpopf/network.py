"""Multiphase radial network model and nodal matrix quantities.

A network couples ``n`` buses (bus 0 is the slack) through lines carrying
``m`` phases each; every line is described by an invertible m-by-m complex
admittance block.  From the network we build the mn-by-mn bus admittance
matrix and, per bus-phase, the Hermitian matrices whose quadratic forms in
the voltage vector give real and reactive injections.
"""

from __future__ import annotations

import dataclasses
from typing import NamedTuple

import numpy as np

HERMITIAN_TOL = 1e-12
INVERTIBILITY_RATIO = 1e-9


class NetworkError(ValueError):
    """Raised for malformed network data."""


class BusPhase(NamedTuple):
    """Bus-phase pair; phases are numbered 1..m, the flat index is 0-based."""

    bus: int
    phase: int

    def flat(self, m: int) -> int:
        return self.bus * m + (self.phase - 1)


def bus_phase_from_flat(flat: int, m: int) -> BusPhase:
    return BusPhase(flat // m, flat % m + 1)


def all_bus_phases(n: int, m: int) -> list[BusPhase]:
    return [BusPhase(j, phi) for j in range(n) for phi in range(1, m + 1)]


def require_hermitian(mat: np.ndarray, tol: float = HERMITIAN_TOL, what: str = "matrix") -> np.ndarray:
    mat = np.asarray(mat, dtype=complex)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise NetworkError(f"{what} must be square, got shape {mat.shape}")
    dev = np.max(np.abs(mat - mat.conj().T)) if mat.size else 0.0
    scale = max(1.0, float(np.max(np.abs(mat))) if mat.size else 1.0)
    if dev > tol * scale:
        raise NetworkError(f"{what} is not Hermitian (max deviation {dev:.3e})")
    return mat


@dataclasses.dataclass(frozen=True)
class Line:
    """Line between buses ``j < k`` with an m-by-m complex admittance block."""

    j: int
    k: int
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=complex)
        y.flags.writeable = False
        object.__setattr__(self, "y", y)


@dataclasses.dataclass(frozen=True)
class MultiphaseNetwork:
    """Tree-structured multiphase network.

    Buses are indexed 0..n-1 internally (0 = slack); ``names`` keeps the
    external labels used in case files and reports.
    """

    n: int
    m: int
    lines: tuple[Line, ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.n < 1:
            raise NetworkError("need at least one bus")
        if self.m < 1:
            raise NetworkError("need at least one phase")
        names = self.names or tuple(str(i) for i in range(self.n))
        if len(names) != self.n or len(set(names)) != self.n:
            raise NetworkError("bus names must be unique and cover all buses")
        object.__setattr__(self, "names", tuple(names))
        object.__setattr__(self, "lines", tuple(self.lines))
        seen = set()
        for ln in self.lines:
            if not (0 <= ln.j < self.n and 0 <= ln.k < self.n):
                raise NetworkError(f"line ({ln.j},{ln.k}) references an unknown bus")
            if ln.j == ln.k:
                raise NetworkError(f"self-loop at bus {names[ln.j]}")
            if ln.j > ln.k:
                raise NetworkError(f"line ({ln.j},{ln.k}) must be ordered j < k")
            if (ln.j, ln.k) in seen:
                raise NetworkError(f"duplicate line {names[ln.j]}-{names[ln.k]}")
            seen.add((ln.j, ln.k))
            if ln.y.shape != (self.m, self.m):
                raise NetworkError(
                    f"line {names[ln.j]}-{names[ln.k]} block has shape {ln.y.shape}, expected {(self.m, self.m)}"
                )
            sv = np.linalg.svd(ln.y, compute_uv=False)
            if sv[-1] <= INVERTIBILITY_RATIO * sv[0]:
                raise NetworkError(
                    f"line {names[ln.j]}-{names[ln.k]} admittance block is numerically singular"
                )

    @property
    def dim(self) -> int:
        """Flat dimension mn of the voltage vector."""
        return self.n * self.m

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise NetworkError(f"unknown bus name {name!r}") from None

    def edge_set(self) -> set[tuple[int, int]]:
        return {(ln.j, ln.k) for ln in self.lines}


@dataclasses.dataclass(frozen=True)
class TopologyReport:
    """Connectivity facts about the bus graph."""

    is_tree: bool
    connected: bool
    has_cycle: bool
    adjacency: tuple[tuple[int, ...], ...]

    def neighbors(self, buses) -> set[int]:
        """Union of neighbor sets over ``buses``."""
        out: set[int] = set()
        for j in buses:
            out.update(self.adjacency[j])
        return out

    def is_edge(self, a: int, b: int) -> bool:
        return b in self.adjacency[a]


def validate_tree(network: MultiphaseNetwork) -> TopologyReport:
    """Check that the bus graph is a tree; disconnection and cycles are
    reported separately since either alone breaks the tree property."""
    n = network.n
    adj: list[set[int]] = [set() for _ in range(n)]
    for ln in network.lines:
        adj[ln.j].add(ln.k)
        adj[ln.k].add(ln.j)

    seen = [False] * n
    components = 0
    for root in range(n):
        if seen[root]:
            continue
        components += 1
        stack = [root]
        seen[root] = True
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
    connected = components == 1
    # a simple undirected graph is a forest iff |E| = n - #components
    has_cycle = len(network.lines) > n - components
    return TopologyReport(
        is_tree=connected and not has_cycle,
        connected=connected,
        has_cycle=has_cycle,
        adjacency=tuple(tuple(sorted(s)) for s in adj),
    )


def assemble_bus_admittance(network: MultiphaseNetwork) -> np.ndarray:
    """Block bus admittance matrix: diagonal block j sums the blocks of all
    lines at j, block (j,k) is minus the line block for j~k, zero otherwise."""
    m, d = network.m, network.dim
    Y = np.zeros((d, d), dtype=complex)
    for ln in network.lines:
        sj, sk = ln.j * m, ln.k * m
        Y[sj:sj + m, sj:sj + m] += ln.y
        Y[sk:sk + m, sk:sk + m] += ln.y
        Y[sj:sj + m, sk:sk + m] -= ln.y
        Y[sk:sk + m, sj:sj + m] -= ln.y
    return Y


def injection_matrices(Y: np.ndarray, idx: BusPhase, m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hermitian triple (real-power, reactive-power, voltage-selector) for one
    bus-phase.

    The first two have the defining property that their quadratic forms in the
    network voltage vector are the real and reactive injections at ``idx``;
    the selector picks out the squared voltage magnitude.
    """
    d = Y.shape[0]
    flat = idx.flat(m)
    if not 0 <= flat < d:
        raise NetworkError(f"bus-phase {idx} out of range for dimension {d}")
    row = np.zeros((d, d), dtype=complex)
    row[flat, :] = Y[flat, :]
    phi = 0.5 * (row.conj().T + row)
    psi = (row.conj().T - row) / 2j
    sel = np.zeros((d, d), dtype=complex)
    sel[flat, flat] = 1.0
    return phi, psi, sel


def evaluate_injections(V: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Complex nodal injections for a voltage vector: s = V * conj(Y V).

    Equals, entry by entry, the quadratic forms of the per-bus-phase
    injection matrices (real part from the first, imaginary from the second).
    """
    V = np.asarray(V, dtype=complex)
    if V.shape != (Y.shape[0],):
        raise NetworkError(f"voltage vector has shape {V.shape}, expected ({Y.shape[0]},)")
    return V * np.conj(Y @ V)


def injections_from_lifted(Y: np.ndarray, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Real and reactive injections of a lifted voltage matrix.

    Uses tr(product) identities: with t the diagonal of Y @ W, the real
    injections are Re(t) and the reactive injections are -Im(t).
    """
    t = np.einsum("ij,ji->i", Y, W)
    return np.real(t), -np.imag(t)
