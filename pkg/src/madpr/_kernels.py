"""Compiled inner loops: candidate selection for KNN and Dijkstra ranking."""

import numba
import numpy as np

_JIT = dict(nogil=True, cache=True)


@numba.njit(**_JIT)
def _sift_down_max(vals, idx, size, pos):
    # max-heap on (value, index)
    while True:
        left = 2 * pos + 1
        if left >= size:
            return
        child = left
        right = left + 1
        if right < size and (vals[right] > vals[left] or (vals[right] == vals[left] and idx[right] > idx[left])):
            child = right
        if vals[child] > vals[pos] or (vals[child] == vals[pos] and idx[child] > idx[pos]):
            vals[pos], vals[child] = vals[child], vals[pos]
            idx[pos], idx[child] = idx[child], idx[pos]
            pos = child
        else:
            return


@numba.njit(**_JIT)
def select_candidates(gram, row_ids, sq, norms, cosine, c, out_idx, out_excluded):
    """Keep the c smallest screened distances of every row of a Gram block.

    Screened distance is ``sq[i] + sq[j] - 2 g`` (squared euclidean) or
    ``1 - g / (norm_i norm_j)`` (cosine).  Also records the smallest screened
    value that did not make the cut, so callers can prove the cut is safe.
    """
    b, n = gram.shape
    vals = np.empty(c, dtype=np.float64)
    idx = np.empty(c, dtype=np.int64)
    for r in range(b):
        i = row_ids[r]
        size = 0
        excluded = np.inf
        for j in range(n):
            if j == i:
                continue
            g = np.float64(gram[r, j])
            if cosine:
                v = 1.0 - g / (norms[i] * norms[j])
            else:
                v = sq[i] + sq[j] - 2.0 * g
            if size < c:
                # sift up
                pos = size
                vals[pos] = v
                idx[pos] = j
                size += 1
                while pos > 0:
                    parent = (pos - 1) // 2
                    if vals[pos] > vals[parent] or (vals[pos] == vals[parent] and idx[pos] > idx[parent]):
                        vals[pos], vals[parent] = vals[parent], vals[pos]
                        idx[pos], idx[parent] = idx[parent], idx[pos]
                        pos = parent
                    else:
                        break
            elif v < vals[0]:
                if vals[0] < excluded:
                    excluded = vals[0]
                vals[0] = v
                idx[0] = j
                _sift_down_max(vals, idx, size, 0)
            elif v < excluded:
                excluded = v
        for t in range(size):
            out_idx[r, t] = idx[t]
        out_excluded[r] = excluded


@numba.njit(**_JIT)
def _sort_tied_runs(order, dist, tie):
    # order is non-decreasing in dist; sort each run of equal dist by (tie, index)
    count = order.size
    a = 0
    while a < count:
        b = a + 1
        while b < count and dist[order[b]] == dist[order[a]]:
            b += 1
        if b - a > 1:
            run = np.sort(order[a:b])
            keys = np.empty(run.size, dtype=np.float64)
            for t in range(run.size):
                keys[t] = tie[run[t]]
            perm = np.argsort(keys, kind="mergesort")
            for t in range(run.size):
                order[a + t] = run[perm[t]]
        a = b


@numba.njit(**_JIT)
def dijkstra_rank(offsets, neighbors, costs, att_nodes, att_costs, tie, top_k):
    """Shortest paths from a virtual source attached to ``att_nodes``.

    Binary min-heap on distance with lazy deletion (stale entries are
    skipped on pop).  Stops once ``top_k`` vertices are settled and every
    vertex tied with the last of them is settled too.  Returns the settled
    vertices ordered by (distance, tie, index), the distance array and the
    hop array; unsettled vertices get distance inf and hops -1.
    """
    n = offsets.size - 1
    dist = np.full(n, np.inf)
    hops = np.full(n, -1, dtype=np.int64)
    done = np.zeros(n, dtype=np.bool_)
    cap = neighbors.size + att_nodes.size + 1
    hd = np.empty(cap, dtype=np.float64)
    hi = np.empty(cap, dtype=np.int64)
    size = 0

    for a in range(att_nodes.size):
        v = att_nodes[a]
        c = att_costs[a]
        if c < dist[v]:
            dist[v] = c
            hops[v] = 1
            pos = size
            size += 1
            while pos > 0:
                parent = (pos - 1) >> 1
                if c < hd[parent]:
                    hd[pos] = hd[parent]
                    hi[pos] = hi[parent]
                    pos = parent
                else:
                    break
            hd[pos] = c
            hi[pos] = v

    order = np.empty(n, dtype=np.int64)
    count = 0
    kth = np.inf
    while size > 0:
        d = hd[0]
        u = hi[0]
        size -= 1
        last_d = hd[size]
        last_i = hi[size]
        pos = 0
        while True:
            child = 2 * pos + 1
            if child >= size:
                break
            if child + 1 < size and hd[child + 1] < hd[child]:
                child += 1
            if hd[child] < last_d:
                hd[pos] = hd[child]
                hi[pos] = hi[child]
                pos = child
            else:
                break
        hd[pos] = last_d
        hi[pos] = last_i

        if done[u] or d > dist[u]:
            continue
        if count >= top_k and d > kth:
            break
        done[u] = True
        order[count] = u
        count += 1
        if count == top_k:
            kth = d
        hu = hops[u] + 1
        for e in range(offsets[u], offsets[u + 1]):
            v = neighbors[e]
            if done[v]:
                continue
            nd = d + costs[e]
            if nd < dist[v]:
                dist[v] = nd
                hops[v] = hu
                pos = size
                size += 1
                while pos > 0:
                    parent = (pos - 1) >> 1
                    if nd < hd[parent]:
                        hd[pos] = hd[parent]
                        hi[pos] = hi[parent]
                        pos = parent
                    else:
                        break
                hd[pos] = nd
                hi[pos] = v

    order = order[:count]
    _sort_tied_runs(order, dist, tie)
    for a in range(n):
        if not done[a]:
            dist[a] = np.inf
            hops[a] = -1
    return order, dist, hops
