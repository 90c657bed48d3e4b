"""Primal network simplex for uncapacitated integer min-cost flow.

The kernel follows the classical strongly-feasible-tree scheme: an artificial
root carries the initial flow, entering arcs are chosen by block search over
the real arcs, and the leaving arc is the last blocking arc met when walking
the pivot cycle from its apex.  Everything is int64, so optimal flows and the
objective are exact.  Callers are responsible for keeping
``max|cost| * (n_nodes + 1)`` below ``ART_LIMIT``.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

STATUS_OPTIMAL = 0
STATUS_INFEASIBLE = 1
STATUS_UNBOUNDED = 2

_INF = np.iinfo(np.int64).max

#: Upper bound on the artificial-arc price that keeps every intermediate
#: potential and reduced cost inside int64.
ART_LIMIT = 2**58


@njit(cache=True, nogil=True)
def _unlink(c, p, first_child, next_sib, prev_sib):
    ps = prev_sib[c]
    ns = next_sib[c]
    if ps != -1:
        next_sib[ps] = ns
    else:
        first_child[p] = ns
    if ns != -1:
        prev_sib[ns] = ps
    next_sib[c] = -1
    prev_sib[c] = -1


@njit(cache=True, nogil=True)
def _link(c, p, first_child, next_sib, prev_sib):
    fc = first_child[p]
    next_sib[c] = fc
    prev_sib[c] = -1
    if fc != -1:
        prev_sib[fc] = c
    first_child[p] = c


@njit(cache=True, nogil=True)
def network_simplex(n_nodes, arc_src, arc_dst, arc_cost, supply, block_size, art_cost, init_arc):
    """Solve min sum(cost*flow) s.t. out-in = supply, flow >= 0.

    ``init_arc[u] = e >= 0`` hangs node ``u`` below ``arc_dst[e]`` in the
    starting tree (``arc_src[e] == u``, ``supply[u] >= 0``, and the parent
    itself hangs from the root); ``-1`` attaches ``u`` to the root through an
    artificial arc.  A good starting assignment saves most of the pivots.

    Returns ``(flow, potential, status, pivots)`` where ``flow`` covers the
    real arcs only and ``potential`` satisfies
    ``cost + pi[src] - pi[dst] >= 0`` on every real arc at optimality.
    ``art_cost`` is the price of the artificial arcs; a nonpositive value
    selects the safe default ``(max|cost| + 1) * (n_nodes + 1)``.

    Subtree sizes are maintained so that each pivot shifts the potentials of
    the smaller side of the cut; potentials are only meaningful up to a
    common constant, and are renormalised to ``pi[root] = 0`` when the
    drift grows large and on return.
    """
    n_arcs = arc_src.shape[0]
    root = n_nodes
    n_all = n_arcs + n_nodes

    src = np.empty(n_all, np.int64)
    dst = np.empty(n_all, np.int64)
    cost = np.empty(n_all, np.int64)
    flow = np.zeros(n_all, np.int64)
    state = np.ones(n_all, np.int8)  # 1: at lower bound, 0: in tree

    max_cost = 0
    for e in range(n_arcs):
        src[e] = arc_src[e]
        dst[e] = arc_dst[e]
        cost[e] = arc_cost[e]
        c = arc_cost[e]
        if c < 0:
            c = -c
        if c > max_cost:
            max_cost = c
    if art_cost <= 0:
        art_cost = (max_cost + 1) * (n_nodes + 1)

    m = n_nodes + 1
    parent = np.empty(m, np.int64)
    pred = np.empty(m, np.int64)
    pdir = np.zeros(m, np.int64)
    size = np.ones(m, np.int64)
    mark = np.zeros(m, np.int64)
    pi = np.zeros(m, np.int64)
    first_child = np.full(m, -1, np.int64)
    next_sib = np.full(m, -1, np.int64)
    prev_sib = np.full(m, -1, np.int64)

    parent[root] = -1
    pred[root] = -1
    size[root] = m
    net = supply.copy()
    for u in range(n_nodes):
        if init_arc[u] >= 0:
            net[arc_dst[init_arc[u]]] += supply[u]
    for u in range(n_nodes):
        e = n_arcs + u
        if init_arc[u] >= 0:
            src[e] = u
            dst[e] = root
            cost[e] = 0
            continue
        if net[u] >= 0:
            src[e] = u
            dst[e] = root
            flow[e] = net[u]
            cost[e] = 0
            pdir[u] = 1
            pi[u] = 0
        else:
            src[e] = root
            dst[e] = u
            flow[e] = -net[u]
            cost[e] = art_cost
            pdir[u] = -1
            pi[u] = art_cost
        state[e] = 0
        parent[u] = root
        pred[u] = e
        _link(u, root, first_child, next_sib, prev_sib)
    for u in range(n_nodes):
        e = init_arc[u]
        if e < 0:
            continue
        v = dst[e]
        state[e] = 0
        flow[e] = supply[u]
        parent[u] = v
        pred[u] = e
        pdir[u] = 1
        pi[u] = pi[v] - cost[e]
        size[v] += 1
        _link(u, v, first_child, next_sib, prev_sib)

    stem = np.empty(m, np.int64)
    stem_pred = np.empty(m, np.int64)
    stem_dir = np.empty(m, np.int64)
    stem_size = np.empty(m, np.int64)
    stack = np.empty(m, np.int64)

    if block_size < 1:
        block_size = 1
    next_arc = 0
    pivots = 0
    status = STATUS_OPTIMAL
    drift_limit = np.int64(1) << np.int64(60)

    while True:
        if n_arcs == 0:
            break
        # block search for the entering arc
        in_arc = -1
        best = 0
        cnt = block_size
        e = next_arc
        for _ in range(n_arcs):
            if state[e] == 1:
                r = cost[e] + pi[src[e]] - pi[dst[e]]
                if r < best:
                    best = r
                    in_arc = e
            e += 1
            if e == n_arcs:
                e = 0
            cnt -= 1
            if cnt == 0:
                if in_arc >= 0:
                    break
                cnt = block_size
        if in_arc < 0:
            break
        next_arc = e
        pivots += 1

        first = src[in_arc]
        second = dst[in_arc]
        u = first
        while u != -1:
            mark[u] = pivots
            u = parent[u]
        u = second
        while mark[u] != pivots:
            u = parent[u]
        join = u

        delta = _INF
        u_out = -1
        side = 0
        u = first
        while u != join:
            if pdir[u] == 1:
                d = flow[pred[u]]
                if d < delta:
                    delta = d
                    u_out = u
                    side = 1
            u = parent[u]
        u = second
        while u != join:
            if pdir[u] == -1:
                d = flow[pred[u]]
                if d <= delta:
                    delta = d
                    u_out = u
                    side = 2
            u = parent[u]
        if side == 0:
            status = STATUS_UNBOUNDED
            break
        if side == 1:
            u_in = first
            v_in = second
        else:
            u_in = second
            v_in = first

        if delta > 0:
            flow[in_arc] += delta
            u = first
            while u != join:
                flow[pred[u]] -= pdir[u] * delta
                u = parent[u]
            u = second
            while u != join:
                flow[pred[u]] += pdir[u] * delta
                u = parent[u]

        out_arc = pred[u_out]
        state[in_arc] = 0
        state[out_arc] = 1

        if src[in_arc] == u_in:
            new_dir = 1
        else:
            new_dir = -1
        sigma = pi[v_in] - pi[u_in] - new_dir * cost[in_arc]
        moved = size[u_out]

        # detach the subtree of u_out and shrink its old ancestors
        u = parent[u_out]
        while u != -1:
            size[u] -= moved
            u = parent[u]

        # collect the stem u_in -> ... -> u_out
        k = 0
        u = u_in
        while True:
            stem[k] = u
            stem_pred[k] = pred[u]
            stem_dir[k] = pdir[u]
            stem_size[k] = size[u]
            k += 1
            if u == u_out:
                break
            u = parent[u]
        _unlink(u_out, parent[u_out], first_child, next_sib, prev_sib)
        for i in range(1, k):
            _unlink(stem[i - 1], stem[i], first_child, next_sib, prev_sib)
        below = 0
        for i in range(k - 1, 0, -1):
            w = stem[i]
            parent[w] = stem[i - 1]
            pred[w] = stem_pred[i - 1]
            pdir[w] = -stem_dir[i - 1]
            below = stem_size[i] - stem_size[i - 1] + below
            size[w] = below
            _link(w, stem[i - 1], first_child, next_sib, prev_sib)
        parent[u_in] = v_in
        pred[u_in] = in_arc
        pdir[u_in] = new_dir
        size[u_in] = moved
        _link(u_in, v_in, first_child, next_sib, prev_sib)
        u = v_in
        while u != -1:
            size[u] += moved
            u = parent[u]

        # shift the potentials of the smaller side of the cut
        top = 0
        if 2 * moved <= m:
            stack[top] = u_in
            top += 1
            while top > 0:
                top -= 1
                w = stack[top]
                pi[w] += sigma
                c = first_child[w]
                while c != -1:
                    stack[top] = c
                    top += 1
                    c = next_sib[c]
        else:
            stack[top] = root
            top += 1
            while top > 0:
                top -= 1
                w = stack[top]
                pi[w] -= sigma
                c = first_child[w]
                while c != -1:
                    if c != u_in:
                        stack[top] = c
                        top += 1
                    c = next_sib[c]
            if pi[root] > drift_limit or pi[root] < -drift_limit:
                base = pi[root]
                for w in range(m):
                    pi[w] -= base

    base = pi[root]
    for w in range(m):
        pi[w] -= base
    if status == STATUS_OPTIMAL:
        for u in range(n_nodes):
            if flow[n_arcs + u] != 0:
                status = STATUS_INFEASIBLE
                break
    return flow[:n_arcs].copy(), pi[:n_nodes].copy(), status, pivots


@njit(cache=True, nogil=True)
def _price(cost, pi_src, pi_dst, keep_tight):
    """Collect dense arcs with negative (or, with ``keep_tight``, zero) reduced cost."""
    n, m = cost.shape
    cnt = 0
    for i in range(n):
        for j in range(m):
            r = cost[i, j] + pi_src[i] - pi_dst[j]
            if r < 0 or (keep_tight and r == 0):
                cnt += 1
    rows = np.empty(cnt, np.int64)
    cols = np.empty(cnt, np.int64)
    k = 0
    for i in range(n):
        for j in range(m):
            r = cost[i, j] + pi_src[i] - pi_dst[j]
            if r < 0 or (keep_tight and r == 0):
                rows[k] = i
                cols[k] = j
                k += 1
    return rows, cols


def default_block_size(n_arcs: int) -> int:
    return max(10, 4 * int(math.sqrt(n_arcs)))


def safe_art_cost(max_cost: int, n_nodes: int) -> int:
    """Big-M price for artificial arcs; raises if int64 headroom is lost."""
    art = (int(max_cost) + 1) * (int(n_nodes) + 1)
    if art >= ART_LIMIT:
        raise OverflowError(
            f"cost range {max_cost} with {n_nodes} nodes exceeds int64 headroom")
    return art


def solve_flow(n_nodes, arc_src, arc_dst, arc_cost, supply, art_cost=0, init_arc=None):
    """Thin wrapper that normalises dtypes, checks the start, and picks the block size."""
    arc_src = np.ascontiguousarray(arc_src, dtype=np.int64)
    arc_dst = np.ascontiguousarray(arc_dst, dtype=np.int64)
    arc_cost = np.ascontiguousarray(arc_cost, dtype=np.int64)
    supply = np.ascontiguousarray(supply, dtype=np.int64)
    if art_cost <= 0:
        max_cost = int(np.abs(arc_cost).max()) if arc_cost.size else 0
        art_cost = safe_art_cost(max_cost, n_nodes)
    if init_arc is None:
        init_arc = np.full(int(n_nodes), -1, np.int64)
    else:
        init_arc = np.ascontiguousarray(init_arc, dtype=np.int64)
        check_start(init_arc, arc_src, arc_dst, supply)
    return network_simplex(
        int(n_nodes), arc_src, arc_dst, arc_cost, supply,
        default_block_size(arc_src.shape[0]), int(art_cost), init_arc,
    )


def check_start(init_arc, arc_src, arc_dst, supply) -> None:
    """Reject starting trees the kernel cannot take (see :func:`network_simplex`)."""
    hung = np.flatnonzero(init_arc >= 0)
    e = init_arc[hung]
    if e.size == 0:
        return
    if np.any(e >= arc_src.shape[0]) or np.any(arc_src[e] != hung):
        raise ValueError("init_arc must name an outgoing real arc of its node")
    if np.any(supply[hung] < 0):
        raise ValueError("only supply nodes can hang below another node")
    if np.any(init_arc[arc_dst[e]] >= 0):
        raise ValueError("the parent of a hung node must hang from the root")


def solve_transportation(cost, supply, demand, n_nearest=8, col_potentials=None):
    """Exact balanced transportation problem on a dense integer cost matrix.

    The solve starts from the ``n_nearest`` cheapest columns of every row and
    adds arcs with negative reduced cost until the dense problem is priced
    out, so the result is optimal for the full matrix.  Approximate column
    potentials (say from a coarser grid) make "cheapest" mean cheapest
    reduced cost, which leaves few pivots; they never affect the optimum.

    Parameters
    ----------
    cost : (n, m) int64 array
    supply, demand : int64 arrays with equal sums

    Returns
    -------
    rows, cols, flow : arrays describing the positive-flow arcs
    pi_src, pi_dst : dual potentials with ``cost + pi_src - pi_dst >= 0``
    status : one of the ``STATUS_*`` constants
    """
    cost = np.ascontiguousarray(cost, dtype=np.int64)
    supply = np.asarray(supply, dtype=np.int64)
    demand = np.asarray(demand, dtype=np.int64)
    n, m = cost.shape
    n_nodes = n + m
    max_cost = int(np.abs(cost).max()) if cost.size else 0
    art = safe_art_cost(max_cost, n_nodes)
    node_supply = np.concatenate([supply, -demand])

    pi_col = np.zeros(m, np.int64)
    if col_potentials is not None and m:
        pi_col = np.asarray(col_potentials, dtype=np.int64)
        pi_col = pi_col - pi_col.min()
    k0 = min(m, max(1, n_nearest))
    if k0 < m:
        near = np.argpartition(cost - pi_col, k0 - 1, axis=1)[:, :k0]
    else:
        near = np.broadcast_to(np.arange(m), (n, m))
    rows = np.repeat(np.arange(n, dtype=np.int64), k0)
    cols = np.ascontiguousarray(near, dtype=np.int64).ravel()
    # start with every row hung below its cheapest column (reduced by the
    # column potentials of the previous round), so only the column
    # imbalances are left for the pivots
    init = np.full(n_nodes, -1, np.int64)
    while True:
        if n and m:
            reduced = np.take_along_axis(cost, near, axis=1) - pi_col[near]
            init[:n] = np.arange(n, dtype=np.int64) * k0 + np.argmin(reduced, axis=1)
        flow, pi, status, _ = network_simplex(
            n_nodes, rows, n + cols, cost[rows, cols], node_supply,
            default_block_size(rows.shape[0]), art, init,
        )
        pi_col = pi[n:] - pi[n:].min() if m else pi_col
        if status == STATUS_UNBOUNDED:
            break
        add_r, add_c = _price(cost, pi[:n], pi[n:], False)
        if add_r.shape[0] == 0:
            break
        rows = np.concatenate([rows, add_r])
        cols = np.concatenate([cols, add_c])
    pos = flow > 0
    return rows[pos], cols[pos], flow[pos], pi[:n].copy(), pi[n:].copy(), status


def tight_arcs(cost, pi_src, pi_dst):
    """All dense arcs whose reduced cost vanishes under the given potentials."""
    return _price(np.ascontiguousarray(cost, dtype=np.int64),
                  np.asarray(pi_src, np.int64), np.asarray(pi_dst, np.int64), True)
