import math

import numpy as np
import pytest

from mpopf.network import Line, MultiphaseNetwork
from mpopf.opf import OpfCase

INF = math.inf


def single_phase_network(admittances: dict[tuple[int, int], complex], n: int) -> MultiphaseNetwork:
    lines = tuple(Line(j, k, np.array([[y]], dtype=complex)) for (j, k), y in sorted(admittances.items()))
    return MultiphaseNetwork(n=n, m=1, lines=lines)


def make_case(
    network: MultiphaseNetwork,
    c_re=None,
    c_im=None,
    v_lo=0.81,
    v_hi=1.21,
    p_lo=-INF,
    p_hi=INF,
    q_lo=-INF,
    q_hi=INF,
    v_ref=None,
) -> OpfCase:
    n, m = network.n, network.m

    def grid(val):
        arr = np.full((n, m), 0.0 if val is None else INF, dtype=float)
        if val is None:
            return arr
        if np.isscalar(val):
            return np.full((n, m), float(val))
        return np.asarray(val, dtype=float)

    if v_ref is None:
        v_ref = 1.05 * np.exp(-2j * np.pi * np.arange(m) / m)
    return OpfCase(
        network=network,
        c_re=grid(c_re),
        c_im=grid(c_im),
        v_lo=grid(v_lo),
        v_hi=grid(v_hi),
        p_lo=grid(p_lo),
        p_hi=grid(p_hi),
        q_lo=grid(q_lo),
        q_hi=grid(q_hi),
        v_ref=np.asarray(v_ref, dtype=complex),
    )


@pytest.fixture(scope="session")
def two_bus_case():
    """2-bus single-phase case with cost at the non-slack bus."""
    net = single_phase_network({(0, 1): 2.0 - 6.0j}, n=2)
    c_re = np.zeros((2, 1))
    c_im = np.zeros((2, 1))
    c_re[1] = 1.0
    c_im[1] = 0.4
    return make_case(net, c_re=c_re, c_im=c_im)


@pytest.fixture(scope="session")
def eleven_bus_case():
    from mpopf.caseio import load_bundled_case

    return load_bundled_case()


@pytest.fixture(scope="session")
def eleven_bus_solution(eleven_bus_case):
    from mpopf import sdp
    from mpopf.opf import build_relaxation

    return sdp.solve(build_relaxation(eleven_bus_case))
