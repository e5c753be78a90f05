"""Minimum-cost bipartite assignment for set-prediction training.

`hungarian` maps each of G ground truths to a distinct proposal (N >= G),
minimizing total cost.  Ties are broken toward the lexicographically smallest
assignment vector, which keeps constructed test cases deterministic; the
refinement only runs when the dual solution reveals that alternative optima
might exist.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

_INF = np.inf


def _solve(cost):
    """Shortest-augmenting-path assignment on a (R, C) matrix with R <= C.

    Returns (col4row, total, u, v): the chosen column per row, the total
    cost, and the dual potentials.
    """
    r, c = cost.shape
    u = np.zeros(r)
    v = np.zeros(c)
    col4row = np.full(r, -1, dtype=np.intp)
    row4col = np.full(c, -1, dtype=np.intp)

    for cur_row in range(r):
        shortest = np.full(c, _INF)
        path = np.full(c, -1, dtype=np.intp)
        on_sr = np.zeros(r, dtype=bool)
        done_cols = np.zeros(c, dtype=bool)
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            on_sr[i] = True
            reduced = min_val + cost[i] - u[i] - v
            better = ~done_cols & (reduced < shortest)
            shortest[better] = reduced[better]
            path[better] = i
            open_cols = np.where(~done_cols)[0]
            lowest = shortest[open_cols].min()
            if lowest == _INF:
                raise ContractError("assignment infeasible (non-finite costs)")
            # prefer an unassigned column at the lowest cost, lowest index first
            ties = open_cols[shortest[open_cols] == lowest]
            free = ties[row4col[ties] == -1]
            j = int(free[0] if free.size else ties[0])
            min_val = lowest
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
            done_cols[j] = True

        u[cur_row] += min_val
        sr = np.where(on_sr)[0]
        sr = sr[sr != cur_row]
        u[sr] += min_val - shortest[col4row[sr]]
        sc = np.where(done_cols)[0]
        v[sc] -= min_val - shortest[sc]

        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur_row:
                break
    total = float(cost[np.arange(r), col4row].sum())
    return col4row, total, u, v


_QUANT_BITS = 36


def hungarian(cost):
    """Minimum-cost injective assignment of G ground truths to N proposals.

    `cost` is an (N, G) matrix.  Returns an integer array `a` of length G
    with a[g] = proposal index; among optimal assignments the vector `a` is
    lexicographically smallest.

    Costs are quantized to integers at 2^-36 of the largest magnitude so the
    solver arithmetic is exact: dual slacks are exactly zero on tight edges,
    ties are detected exactly, and the lexicographic refinement only runs
    when alternative optima genuinely exist at that resolution.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be a 2-D matrix, got shape {cost.shape}")
    n, g = cost.shape
    if n < g:
        raise ContractError(f"need at least as many proposals as ground truths ({n} < {g})")
    if not np.isfinite(cost).all():
        raise ContractError("cost matrix must be finite")
    scale = np.abs(cost).max()
    if scale == 0.0:
        return np.arange(g, dtype=np.intp)
    quant = np.round(cost.T * (2.0 ** _QUANT_BITS / scale))  # (G, N), exact ints
    assign, total, u, v = _solve(quant)

    tight = quant - u[:, None] - v[None, :] == 0.0
    if tight.sum() == g:
        # the matched edges are the only tight ones: the optimum is unique
        return assign
    return _lex_refine(quant, tight, assign, total)


def _lex_refine(by_gt, tight, assign, total):
    """Greedily fix the smallest optimal proposal index per ground truth.

    Only tight edges can belong to an optimal assignment (complementary
    slackness against the solver's optimal duals), so only tight candidates
    below the known-optimal completion's choice need a sub-solve; whenever a
    deviation verifies, the sub-solve's solution becomes the new completion.
    """
    g, n = by_gt.shape
    avail = list(range(n))
    out = np.empty(g, dtype=np.intp)
    budget = total
    completion = list(assign)  # completion[row:] always completes optimally
    for row in range(g):
        pick = completion[row]
        for cand in avail:
            if cand >= pick:
                break
            if not tight[row, cand]:
                continue
            rest = by_gt[row + 1:]
            if rest.shape[0] == 0:
                if by_gt[row, cand] <= budget + 0.25:
                    pick = cand
                    break
                continue
            cols = [c for c in avail if c != cand]
            sub_assign, sub_total, _, _ = _solve(rest[:, cols])
            if by_gt[row, cand] + sub_total <= budget + 0.25:
                pick = cand
                completion[row + 1:] = [cols[c] for c in sub_assign]
                break
        out[row] = pick
        avail.remove(pick)
        budget -= by_gt[row, pick]
    return out


def brute_force_assignment(cost):
    """Exhaustive-permutation oracle: same contract as `hungarian`."""
    from itertools import permutations

    cost = np.asarray(cost, dtype=np.float64)
    n, g = cost.shape
    best = None
    for perm in permutations(range(n), g):
        tot = cost[list(perm), range(g)].sum()
        key = (tot, perm)
        if best is None or key < best:
            best = key
    return np.array(best[1], dtype=np.intp), float(best[0])
