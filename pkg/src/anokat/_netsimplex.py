"""Dense bipartite min-cost-flow via the network simplex method.

Solves the discrete transport problem between two weighted atom sets given a
dense cost matrix.  Masses are scaled to int64 so flows stay exact; costs are
float64.  The pivot rule is block search for the most negative reduced cost;
the leaving arc uses the standard strong-feasibility tie-break (strict
improvement on the tail path, ties overwritten on the head path).  The basis
tree is kept as parent/child linked lists; after each pivot the re-hung
subtree gets its depths recomputed and its potentials shifted by the entering
arc's reduced cost.

Numerical guard: when the block scan finds no entering arc, potentials are
recomputed exactly from the tree (they drift by accumulated shifts) and a
full rescan confirms optimality before returning.
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = ["solve_transport", "INT_MASS_TOTAL"]

INT_MASS_TOTAL = 1 << 52


@njit(inline="always")
def _arc_tail_is(a, v, nr, nc, e):
    if a < e:
        return (a // nc) == v
    av = a - e
    if av < nr:
        return av == v          # artificial arc source -> root
    return False                # artificial arc root -> sink


@njit(cache=True, nogil=True)
def _detach(v, parent, first_child, next_sib, prev_sib):
    p = parent[v]
    if p >= 0:
        if prev_sib[v] >= 0:
            next_sib[prev_sib[v]] = next_sib[v]
        else:
            first_child[p] = next_sib[v]
        if next_sib[v] >= 0:
            prev_sib[next_sib[v]] = prev_sib[v]
    next_sib[v] = -1
    prev_sib[v] = -1


@njit(cache=True, nogil=True)
def _attach(v, p, first_child, next_sib, prev_sib):
    next_sib[v] = first_child[p]
    if first_child[p] >= 0:
        prev_sib[first_child[p]] = v
    prev_sib[v] = -1
    first_child[p] = v


@njit(cache=True, nogil=True)
def _refresh_potentials(pedge, pot, first_child, next_sib,
                        cost, nr, nc, e, art_cost, root, stack):
    top = 0
    stack[0] = root
    pot[root] = 0.0
    while top >= 0:
        v = stack[top]
        top -= 1
        c_ = first_child[v]
        while c_ >= 0:
            a = pedge[c_]
            if a < e:
                i = a // nc
                cc = cost[i, a - i * nc]
                if i == c_:
                    pot[c_] = cc + pot[v]       # arc c_ -> v tight
                else:
                    pot[c_] = pot[v] - cc       # arc v -> c_ tight
            else:
                av = a - e
                if av == c_ and av < nr:
                    pot[c_] = art_cost + pot[v]
                else:
                    pot[c_] = pot[v] - art_cost
            top += 1
            stack[top] = c_
            c_ = next_sib[c_]


@njit(cache=True, nogil=True)
def _netsimplex(supply, demand, cost, flow_out, max_iter):
    """Balanced transport core.  Returns (status, pivots): status 0 optimal,
    1 iteration cap hit."""
    nr = supply.shape[0]
    nc = demand.shape[0]
    n = nr + nc
    root = n
    e = nr * nc

    max_c = 0.0
    for i in range(nr):
        for j in range(nc):
            if cost[i, j] > max_c:
                max_c = cost[i, j]
    art_cost = 1.0 + (n + 2) * max_c
    tol = 1e-11 * (1.0 + max_c)

    flow = np.zeros(e + n, dtype=np.int64)
    parent = np.empty(n + 1, dtype=np.int64)
    pedge = np.empty(n + 1, dtype=np.int64)
    depth = np.empty(n + 1, dtype=np.int64)
    pot = np.empty(n + 1, dtype=np.float64)
    first_child = np.full(n + 1, -1, dtype=np.int64)
    next_sib = np.full(n + 1, -1, dtype=np.int64)
    prev_sib = np.full(n + 1, -1, dtype=np.int64)
    stack = np.empty(n + 1, dtype=np.int64)

    parent[root] = -1
    pedge[root] = -1
    depth[root] = 0
    pot[root] = 0.0
    for v in range(n):
        parent[v] = root
        pedge[v] = e + v
        depth[v] = 1
        next_sib[v] = v + 1 if v + 1 < n else -1
        prev_sib[v] = v - 1
        if v < nr:
            flow[e + v] = supply[v]
            pot[v] = art_cost
        else:
            flow[e + v] = demand[v - nr]
            pot[v] = -art_cost
    first_child[root] = 0

    block = int(np.sqrt(e)) + 1
    scan_start = 0
    pivots = 0
    rescans = 0

    while True:
        pivots += 1
        if pivots > max_iter:
            for a in range(e):
                flow_out[a] = flow[a]
            return 1, pivots

        # entering arc: block search for most negative reduced cost
        best = -1
        best_r = -tol
        pos = scan_start
        scanned = 0
        while scanned < e:
            end = min(pos + block, e)
            for a in range(pos, end):
                if flow[a] == 0:
                    i = a // nc
                    r = cost[i, a - i * nc] - pot[i] + pot[nr + (a - i * nc)]
                    if r < best_r:
                        best_r = r
                        best = a
            scanned += end - pos
            pos = end if end < e else 0
            if best >= 0:
                break
        scan_start = pos
        if best < 0:
            if rescans < 3:
                rescans += 1
                _refresh_potentials(pedge, pot, first_child, next_sib,
                                    cost, nr, nc, e, art_cost, root, stack)
                for a in range(e):
                    if flow[a] == 0:
                        i = a // nc
                        r = cost[i, a - i * nc] - pot[i] + pot[nr + (a - i * nc)]
                        if r < best_r:
                            best_r = r
                            best = a
            if best < 0:
                for a in range(e):
                    flow_out[a] = flow[a]
                return 0, pivots

        u = best // nc
        w = nr + (best - u * nc)            # entering arc u -> w

        # join = deepest common ancestor
        a_u = u
        a_w = w
        while depth[a_u] > depth[a_w]:
            a_u = parent[a_u]
        while depth[a_w] > depth[a_u]:
            a_w = parent[a_w]
        while a_u != a_w:
            a_u = parent[a_u]
            a_w = parent[a_w]
        join = a_u

        # leaving arc: flow bound along the cycle.  Pushing along u -> w
        # moves flow parent-ward on the u side (arcs pointing up decrease)
        # and child-ward on the w side (arcs pointing up increase).
        delta = np.int64(1) << 62
        leave_node = -1
        leave_u_side = True
        v = u
        while v != join:
            a = pedge[v]
            if _arc_tail_is(a, v, nr, nc, e):
                if flow[a] < delta:
                    delta = flow[a]
                    leave_node = v
                    leave_u_side = True
            v = parent[v]
        v = w
        while v != join:
            a = pedge[v]
            if not _arc_tail_is(a, v, nr, nc, e):
                if flow[a] <= delta:
                    delta = flow[a]
                    leave_node = v
                    leave_u_side = False
            v = parent[v]

        if delta > 0:
            flow[best] += delta
            v = w
            while v != join:
                a = pedge[v]
                if _arc_tail_is(a, v, nr, nc, e):
                    flow[a] += delta
                else:
                    flow[a] -= delta
                v = parent[v]
            v = u
            while v != join:
                a = pedge[v]
                if _arc_tail_is(a, v, nr, nc, e):
                    flow[a] -= delta
                else:
                    flow[a] += delta
                v = parent[v]

        if leave_node < 0:
            # cannot happen for the transport polytope; defensive exit
            for a in range(e):
                flow_out[a] = flow[a]
            return 2, pivots

        if leave_u_side:
            enter_in = u
            enter_out = w
        else:
            enter_in = w
            enter_out = u

        i0 = best // nc
        r_enter = cost[i0, best - i0 * nc] - pot[u] + pot[w]
        shift = r_enter if leave_u_side else -r_enter

        # re-hang subtree: collect path enter_in .. leave_node
        plen = 0
        v = enter_in
        while True:
            stack[plen] = v
            plen += 1
            if v == leave_node:
                break
            v = parent[v]
        for k in range(plen):
            _detach(stack[k], parent, first_child, next_sib, prev_sib)
        for k in range(plen - 1, 0, -1):
            node = stack[k]
            new_par = stack[k - 1]
            parent[node] = new_par
            pedge[node] = pedge[new_par]
            _attach(node, new_par, first_child, next_sib, prev_sib)
        parent[enter_in] = enter_out
        pedge[enter_in] = best
        _attach(enter_in, enter_out, first_child, next_sib, prev_sib)

        # recompute depths and shift potentials across the moved subtree
        top = 0
        stack[top] = enter_in
        depth[enter_in] = depth[enter_out] + 1
        pot[enter_in] += shift
        while top >= 0:
            vtop = stack[top]
            top -= 1
            c_ = first_child[vtop]
            while c_ >= 0:
                depth[c_] = depth[vtop] + 1
                pot[c_] += shift
                top += 1
                stack[top] = c_
                c_ = next_sib[c_]


def solve_transport(mu_weights: np.ndarray, nu_weights: np.ndarray,
                    cost: np.ndarray, max_pivots: int | None = None,
                    ) -> tuple[float, np.ndarray, int, int]:
    """Exact transport value and plan between weighted atom sets.

    Returns (value, plan, status, pivots) with plan an (nr, nc) float64
    matrix whose marginals equal the normalized weights; status 0 means
    proven optimal, nonzero means the pivot cap was hit (caller decides on a
    fallback).  The default pivot budget grows with the arc count; pass
    ``max_pivots`` to override.
    """
    mu = np.asarray(mu_weights, dtype=np.float64).ravel()
    nu = np.asarray(nu_weights, dtype=np.float64).ravel()
    C = np.ascontiguousarray(cost, dtype=np.float64)
    if C.shape != (mu.size, nu.size):
        raise ValueError("cost matrix shape does not match weights")
    if max_pivots is None:
        max_pivots = 200000 + 50 * (mu.size + nu.size) + C.size // 4
    si = np.rint(mu / mu.sum() * INT_MASS_TOTAL).astype(np.int64)
    di = np.rint(nu / nu.sum() * INT_MASS_TOTAL).astype(np.int64)
    si[np.argmax(si)] += INT_MASS_TOTAL - si.sum()
    di[np.argmax(di)] += INT_MASS_TOTAL - di.sum()
    flow = np.zeros(mu.size * nu.size, dtype=np.int64)
    status, pivots = _netsimplex(si, di, C, flow, max_pivots)
    plan = flow.reshape(mu.size, nu.size).astype(np.float64) / INT_MASS_TOTAL
    value = float(np.einsum("ij,ij->", plan, C))
    return value, plan, int(status), int(pivots)
