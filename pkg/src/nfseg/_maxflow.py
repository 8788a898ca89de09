"""Compiled kernels for the labeling moves.

``dinic_min_cut`` is a Dinic max-flow over a paired-arc layout: arc ``k``
and arc ``k ^ 1`` are each other's reverses, so pushing flow on one frees
capacity on the other. Capacities are plain float64; residuals at or below
``EPS`` count as saturated, which both guarantees termination and
implements the cut comparison slack.

The kernel also reports the minimal sink side of a minimum cut (every node
with a residual path to the sink). Using the minimal sink side means nodes
whose assignment is cost-indifferent stay on the source side, which the
expansion moves rely on for their keep-current-label tie rule.

``expansion_move`` assembles one expansion move's network (switch costs,
Potts pair terms, label-cost gadgets) and solves it in place, returning the
switched-node mask together with the proposed labeling's exact energy
parts, so the caller can apply its accept-only-if-better rule without
another pass over the graph.
"""

import numpy as np
from numba import njit

EPS = 1e-12


@njit(cache=True)
def dinic_min_cut(n, tails, heads, caps, source, sink):
    """Max-flow / min-cut on a paired-arc network.

    Returns (flow_value, sink_side) where sink_side is a boolean mask over
    the n nodes marking the minimal sink side of a minimum cut.
    """
    m = len(tails)
    deg = np.zeros(n, dtype=np.int64)
    for k in range(m):
        deg[tails[k]] += 1
    adj_start = np.zeros(n + 1, dtype=np.int64)
    for v in range(n):
        adj_start[v + 1] = adj_start[v] + deg[v]
    adj = np.empty(m, dtype=np.int64)
    fill = adj_start[:-1].copy()
    for k in range(m):
        v = tails[k]
        adj[fill[v]] = k
        fill[v] += 1

    flow = np.zeros(m, dtype=np.float64)
    level = np.empty(n, dtype=np.int64)
    it = np.empty(n, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    stack_v = np.empty(n + 1, dtype=np.int64)
    stack_e = np.empty(n + 1, dtype=np.int64)
    total = 0.0

    while True:
        for v in range(n):
            level[v] = -1
        level[source] = 0
        qh, qt = 0, 1
        queue[0] = source
        while qh < qt:
            v = queue[qh]
            qh += 1
            for a in range(adj_start[v], adj_start[v + 1]):
                k = adj[a]
                w = heads[k]
                if level[w] < 0 and caps[k] - flow[k] > EPS:
                    level[w] = level[v] + 1
                    queue[qt] = w
                    qt += 1
        if level[sink] < 0:
            break
        for v in range(n):
            it[v] = adj_start[v]
        while True:
            sp = 0
            stack_v[0] = source
            pushed = 0.0
            while sp >= 0:
                v = stack_v[sp]
                if v == sink:
                    bottleneck = np.inf
                    for q in range(sp):
                        k = stack_e[q]
                        residual = caps[k] - flow[k]
                        if residual < bottleneck:
                            bottleneck = residual
                    for q in range(sp):
                        k = stack_e[q]
                        flow[k] += bottleneck
                        flow[k ^ 1] -= bottleneck
                    pushed = bottleneck
                    break
                advanced = False
                while it[v] < adj_start[v + 1]:
                    k = adj[it[v]]
                    w = heads[k]
                    if level[w] == level[v] + 1 and caps[k] - flow[k] > EPS:
                        stack_e[sp] = k
                        sp += 1
                        stack_v[sp] = w
                        advanced = True
                        break
                    it[v] += 1
                if not advanced:
                    if sp == 0:
                        sp = -1
                    else:
                        sp -= 1
                        it[stack_v[sp]] += 1
            if pushed <= 0.0:
                break
            total += pushed

    # Minimal sink side: nodes that still reach the sink through residual arcs.
    sink_side = np.zeros(n, dtype=np.bool_)
    sink_side[sink] = True
    qh, qt = 0, 1
    queue[0] = sink
    while qh < qt:
        w = queue[qh]
        qh += 1
        for a in range(adj_start[w], adj_start[w + 1]):
            k = adj[a]
            v = heads[k]
            # Arc v -> w is the pair of k; it is passable if its residual remains.
            if not sink_side[v] and caps[k ^ 1] - flow[k ^ 1] > EPS:
                sink_side[v] = True
                queue[qt] = v
                qt += 1
    return total, sink_side


@njit(cache=True)
def expansion_move(cur, a, d_keep, d_alpha, e0, e1, wp, lam_m, use_gadgets, n_labels):
    """Build and solve one expansion move onto label column ``a``.

    ``cur`` holds each node's label column; ``d_keep``/``d_alpha`` are the
    per-node data costs of keeping the current label vs switching. Returns
    (switched, new_data, new_smoothness_raw, new_active) for the proposed
    labeling, where new_smoothness_raw is the cut weight sum (smoothness
    weight already applied in ``wp``) and new_active the surviving label
    count. No node switches when the move cannot improve.
    """
    n = cur.size
    m_edges = e0.size

    nv = 0
    for i in range(n):
        if cur[i] != a:
            nv += 1
    switched = np.zeros(n, dtype=np.bool_)
    if nv == 0:
        return switched, 0.0, 0.0, 0

    var_of = np.full(n, -1, dtype=np.int64)
    var_nodes = np.empty(nv, dtype=np.int64)
    k = 0
    for i in range(n):
        if cur[i] != a:
            var_of[i] = k
            var_nodes[k] = i
            k += 1

    g0 = np.empty(nv)
    g1 = np.empty(nv)
    for q in range(nv):
        i = var_nodes[q]
        g0[q] = d_keep[i]
        g1[q] = d_alpha[i]

    # Pair terms: same-label pairs give a symmetric arc, different-label
    # pairs give a one-directional arc plus a switch credit on the second
    # endpoint, and a variable next to a fixed-alpha node pays the boundary
    # weight while it keeps its label.
    n_same = 0
    n_diff = 0
    for e in range(m_edges):
        i, j = e0[e], e1[e]
        vi, vj = cur[i] != a, cur[j] != a
        if vi and vj:
            if cur[i] == cur[j]:
                n_same += 1
            else:
                n_diff += 1
                g1[var_of[j]] -= wp[e]
        elif vi:
            g0[var_of[i]] += wp[e]
        elif vj:
            g0[var_of[j]] += wp[e]

    n_aux = 0
    member_arcs = 0
    if use_gadgets and lam_m > 0.0:
        # One vacancy gadget per label present among the variables.
        label_count = np.zeros(n_labels, dtype=np.int64)
        for q in range(nv):
            label_count[cur[var_nodes[q]]] += 1
        for l in range(n_labels):
            if label_count[l] > 0:
                n_aux += 1
                member_arcs += label_count[l]
        alpha_empty = True
        for i in range(n):
            if cur[i] == a:
                alpha_empty = False
                break
        if alpha_empty:
            n_aux += 1
            member_arcs += nv

    max_arcs = 2 * (nv + n_same + n_diff + n_aux + member_arcs)
    tails = np.empty(max_arcs, dtype=np.int64)
    heads = np.empty(max_arcs, dtype=np.int64)
    caps = np.empty(max_arcs)
    n_total = nv + n_aux + 2
    source = n_total - 2
    sink = n_total - 1

    def _add(idx, u, v, cf, cr):
        tails[idx] = u
        heads[idx] = v
        caps[idx] = cf
        tails[idx + 1] = v
        heads[idx + 1] = u
        caps[idx + 1] = cr
        return idx + 2

    pos = 0
    finite_cap = 0.0
    for e in range(m_edges):
        i, j = e0[e], e1[e]
        vi, vj = cur[i] != a, cur[j] != a
        if vi and vj:
            w = wp[e]
            if cur[i] == cur[j]:
                pos = _add(pos, var_of[i], var_of[j], w, w)
                finite_cap += 2.0 * w
            else:
                pos = _add(pos, var_of[i], var_of[j], w, 0.0)
                finite_cap += w

    for q in range(nv):
        net = g1[q] - g0[q]
        if net > EPS:
            pos = _add(pos, source, q, net, 0.0)
            finite_cap += net
        elif net < -EPS:
            pos = _add(pos, q, sink, -net, 0.0)
            finite_cap -= net

    if use_gadgets and lam_m > 0.0 and n_aux > 0:
        inf_cap = finite_cap + lam_m * n_aux + 1.0
        z = nv
        label_gadget = np.full(n_labels, -1, dtype=np.int64)
        for q in range(nv):
            l = cur[var_nodes[q]]
            if label_gadget[l] < 0:
                label_gadget[l] = z
                z += 1
        for l in range(n_labels):
            if label_gadget[l] >= 0:
                pos = _add(pos, label_gadget[l], sink, lam_m, 0.0)
        for q in range(nv):
            pos = _add(pos, q, label_gadget[cur[var_nodes[q]]], inf_cap, 0.0)
        if z < nv + n_aux:
            # Activation gadget: switching any node turns the label on.
            pos = _add(pos, source, z, lam_m, 0.0)
            for q in range(nv):
                pos = _add(pos, z, q, inf_cap, 0.0)

    _, sink_side = dinic_min_cut(n_total, tails[:pos], heads[:pos], caps[:pos], source, sink)

    any_switch = False
    for q in range(nv):
        if sink_side[q]:
            switched[var_nodes[q]] = True
            any_switch = True
    if not any_switch:
        return switched, 0.0, 0.0, 0

    new_data = 0.0
    for i in range(n):
        new_data += d_alpha[i] if switched[i] else d_keep[i]
    new_smooth = 0.0
    for e in range(m_edges):
        li = a if switched[e0[e]] else cur[e0[e]]
        lj = a if switched[e1[e]] else cur[e1[e]]
        if li != lj:
            new_smooth += wp[e]
    present = np.zeros(n_labels, dtype=np.bool_)
    for i in range(n):
        present[a if switched[i] else cur[i]] = True
    new_active = 0
    for l in range(n_labels):
        if present[l]:
            new_active += 1
    return switched, new_data, new_smooth, new_active


@njit(cache=True)
def _solve4(a, b, out):
    """Gaussian elimination with partial pivoting; returns False when singular."""
    m = a.copy()
    v = b.copy()
    for col in range(4):
        piv = col
        best = abs(m[col, col])
        for row in range(col + 1, 4):
            if abs(m[row, col]) > best:
                best = abs(m[row, col])
                piv = row
        if best <= 1e-300:
            return False
        if piv != col:
            for q in range(4):
                m[col, q], m[piv, q] = m[piv, q], m[col, q]
            v[col], v[piv] = v[piv], v[col]
        inv = 1.0 / m[col, col]
        for row in range(col + 1, 4):
            f = m[row, col] * inv
            if f != 0.0:
                for q in range(col, 4):
                    m[row, q] -= f * m[col, q]
                v[row] -= f * v[col]
    for col in range(3, -1, -1):
        acc = v[col]
        for q in range(col + 1, 4):
            acc -= m[col, q] * out[q]
        out[col] = acc / m[col, col]
    return True


@njit(cache=True)
def lm_refine(xy, flow, inv_mag, params0, tau, truncate, max_iters, tol, obj_tol,
              lambda0, lambda_up, lambda_down, min_points):
    """Damped Gauss-Newton refinement of the truncated constraint objective.

    Mirrors the fitting module's update rule: steps come from the
    (optionally inlier-masked) normal equations of the scaled residuals and
    are accepted only when the truncated objective decreases. Returns
    (params, objective, iterations, converged, nonfinite).
    """
    k = xy.shape[0]
    params = params0.copy()
    tau_sq = tau * tau

    def eval_point(p, r_out, jac_out):
        rho, theta, tx, ty = p[0], p[1], p[2], p[3]
        c, s = np.cos(theta), np.sin(theta)
        ok = True
        for i in range(k):
            x, y = xy[i, 0], xy[i, 1]
            nx, ny = flow[i, 0], flow[i, 1]
            ux = (rho * c - 1.0) * x - rho * s * y + tx
            uy = rho * s * x + (rho * c - 1.0) * y + ty
            w = inv_mag[i]
            r = (nx * ux + ny * uy - (nx * nx + ny * ny)) * w
            r_out[i] = r
            jac_out[i, 0] = (nx * (c * x - s * y) + ny * (s * x + c * y)) * w
            jac_out[i, 1] = (nx * (-rho * s * x - rho * c * y) + ny * (rho * c * x - rho * s * y)) * w
            jac_out[i, 2] = nx * w
            jac_out[i, 3] = ny * w
            if not np.isfinite(r):
                ok = False
        return ok

    def objective_of(r_arr):
        total = 0.0
        for i in range(k):
            rr = r_arr[i] * r_arr[i]
            if truncate and rr > tau_sq:
                rr = tau_sq
            total += rr
        return total

    r = np.empty(k)
    jac = np.empty((k, 4))
    r_trial = np.empty(k)
    jac_trial = np.empty((k, 4))
    if not eval_point(params, r, jac):
        return params, 0.0, 0, False, True
    objective = objective_of(r)

    lam = lambda0
    converged = False
    iterations = 0
    for _ in range(max_iters):
        if objective <= 1e-24:
            converged = True
            break
        n_in = 0
        if truncate:
            for i in range(k):
                if abs(r[i]) < tau:
                    n_in += 1
        use_mask = truncate and n_in >= min_points
        jtj = np.zeros((4, 4))
        jtr = np.zeros(4)
        for i in range(k):
            if use_mask and abs(r[i]) >= tau:
                continue
            for p in range(4):
                jtr[p] += jac[i, p] * r[i]
                for q in range(4):
                    jtj[p, q] += jac[i, p] * jac[i, q]
        finite = True
        for p in range(4):
            if not np.isfinite(jtr[p]):
                finite = False
            for q in range(4):
                if not np.isfinite(jtj[p, q]):
                    finite = False
        if not finite:
            return params, objective, iterations, False, True
        diag = np.empty(4)
        for p in range(4):
            diag[p] = jtj[p, p] if jtj[p, p] > 1e-12 else 1e-12

        accepted = False
        step = np.empty(4)
        for _attempt in range(12):
            a = jtj.copy()
            for p in range(4):
                a[p, p] += lam * diag[p]
            if not _solve4(a, -jtr, step):
                lam *= lambda_up
                continue
            trial = params + step
            if not (trial[0] > 0 and -np.pi / 2 < trial[1] <= np.pi / 2):
                lam *= lambda_up
                continue
            if not eval_point(trial, r_trial, jac_trial):
                return params, objective, iterations, False, True
            obj_trial = objective_of(r_trial)
            if obj_trial < objective:
                rel_decrease = (objective - obj_trial) / max(objective, 1e-300)
                step_size = 0.0
                for p in range(4):
                    if abs(step[p]) > step_size:
                        step_size = abs(step[p])
                for p in range(4):
                    params[p] = trial[p]
                for i in range(k):
                    r[i] = r_trial[i]
                    for p in range(4):
                        jac[i, p] = jac_trial[i, p]
                objective = obj_trial
                lam = max(lam / lambda_down, 1e-12)
                accepted = True
                iterations += 1
                if step_size < tol or rel_decrease < obj_tol:
                    converged = True
                break
            lam *= lambda_up
        if not accepted:
            converged = True
            break
        if converged:
            break
    return params, objective, iterations, converged, False
