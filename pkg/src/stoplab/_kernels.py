"""Hot numerical loops.

Everything in this module is written against plain float64/int64 arrays so it
compiles under numba's nopython mode; with ``STOPLAB_JIT=0`` the same source
runs uncompiled (see ``backend``).  Drivers arrive as flat postfix programs
(``codes``/``consts`` pairs produced by ``expr``), evaluated by a small stack
machine.  Evaluation errors are signalled with NaN and turned into typed
exceptions by the Python-side wrappers.
"""

import numpy as np

from .backend import maybe_njit

# Opcodes for the postfix programs. expr.compile_program must stay in sync.
OP_CONST = 0
OP_T = 1
OP_Y = 2
OP_Z = 3
OP_ADD = 4
OP_SUB = 5
OP_MUL = 6
OP_DIV = 7
OP_NEG = 8
OP_ABS = 9
OP_MAX = 10
OP_MIN = 11
OP_POS = 12
OP_NEGPART = 13
OP_EXP = 14
OP_SQRT = 15

MAX_STACK = 64

# Backward-pass modes.
MODE_PLAIN = 0
MODE_SNELL = 1
MODE_FROZEN = 2

# Kernel status codes.
OK = 0
ERR_PICARD = 1
ERR_EVAL = 2
ERR_INFEASIBLE = 3

_GOLDEN = 0.6180339887498949
_NSCAN = 33


@maybe_njit
def eval_program(codes, consts, t, y, z, stack):
    """Run one postfix program at a scalar point. NaN signals an error."""
    sp = 0
    for i in range(codes.shape[0]):
        op = codes[i]
        if op == OP_CONST:
            stack[sp] = consts[i]
            sp += 1
        elif op == OP_T:
            stack[sp] = t
            sp += 1
        elif op == OP_Y:
            stack[sp] = y
            sp += 1
        elif op == OP_Z:
            stack[sp] = z
            sp += 1
        elif op == OP_ADD:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] + stack[sp]
        elif op == OP_SUB:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] - stack[sp]
        elif op == OP_MUL:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] * stack[sp]
        elif op == OP_DIV:
            sp -= 1
            den = stack[sp]
            if den == 0.0:
                return np.nan
            v = stack[sp - 1] / den
            if not np.isfinite(v):
                return np.nan
            stack[sp - 1] = v
        elif op == OP_NEG:
            stack[sp - 1] = -stack[sp - 1]
        elif op == OP_ABS:
            stack[sp - 1] = abs(stack[sp - 1])
        elif op == OP_MAX:
            sp -= 1
            a = stack[sp - 1]
            b = stack[sp]
            stack[sp - 1] = a if a >= b else b
        elif op == OP_MIN:
            sp -= 1
            a = stack[sp - 1]
            b = stack[sp]
            stack[sp - 1] = a if a <= b else b
        elif op == OP_POS:
            v = stack[sp - 1]
            stack[sp - 1] = v if v > 0.0 else 0.0
        elif op == OP_NEGPART:
            v = stack[sp - 1]
            stack[sp - 1] = -v if v < 0.0 else 0.0
        elif op == OP_EXP:
            v = np.exp(stack[sp - 1])
            if not np.isfinite(v):
                return np.nan
            stack[sp - 1] = v
        else:  # OP_SQRT
            v = stack[sp - 1]
            if v < 0.0:
                return np.nan
            stack[sp - 1] = np.sqrt(v)
    return stack[0]


@maybe_njit
def picard_value(codes, consts, t, z, base, dt, tol, maxit, stack):
    """Fixed point of y = base + g(t, y, z) * dt.

    Returns (y, iterations); iterations < 0 flags non-convergence, NaN in y
    flags an evaluation error.
    """
    y = base
    for k in range(maxit):
        gv = eval_program(codes, consts, t, y, z, stack)
        if not np.isfinite(gv):
            return np.nan, k + 1
        y_new = base + gv * dt
        if abs(y_new - y) <= tol:
            return y_new, k + 1
        y = y_new
    return y, -maxit


@maybe_njit
def backward_solve(level_starts, stride, hi_level, times, dt, sqrt_dt,
                   codes, consts, tol, maxit, mode, x, stop,
                   values, z_out, cont_out, iters_out):
    """One backward induction sweep from ``hi_level`` down to the root.

    ``values`` must be preloaded on level ``hi_level``.  At every interior
    node z is the scaled child difference and y the Picard fixed point of the
    driver around the child mean; ``mode`` then either keeps it (plain),
    takes the maximum with the reward x (snell), or overwrites with x at
    flagged nodes (frozen).  Returns (status, node).
    """
    stack = np.empty(MAX_STACK, np.float64)
    two_sq = 2.0 * sqrt_dt
    for i in range(hi_level - 1, -1, -1):
        s = level_starts[i]
        e = level_starts[i + 1]
        t = times[i]
        for j in range(e - s):
            k = s + j
            cu = e + stride * j
            cd = cu + 1
            yu = values[cu]
            yd = values[cd]
            z = (yu - yd) / two_sq
            base = 0.5 * (yu + yd)
            y, it = picard_value(codes, consts, t, z, base, dt, tol, maxit, stack)
            if it < 0:
                return ERR_PICARD, k
            if not np.isfinite(y):
                return ERR_EVAL, k
            iters_out[k] = it
            z_out[k] = z
            cont_out[k] = y
            if mode == MODE_SNELL:
                xv = x[k]
                if xv > y:
                    y = xv
            elif mode == MODE_FROZEN:
                if stop[k] != 0:
                    y = x[k]
            values[k] = y
    return OK, -1


@maybe_njit
def direct_value(codes, consts, t, z, yu, yd, dt, sqrt_dt, tol, maxit, stack):
    """Smallest y with both child adjustments nonnegative at a fixed z."""
    base = yu - z * sqrt_dt
    alt = yd + z * sqrt_dt
    if alt > base:
        base = alt
    return picard_value(codes, consts, t, z, base, dt, tol, maxit, stack)


@maybe_njit
def one_step_direct(codes, consts, t, yu, yd, dt, sqrt_dt, zlo, zhi, kappa_g,
                    tol, maxit, ztol, tie_eps, stack):
    """Minimize the one-step value over feasible z.

    The feasible interval [zlo, zhi] is intersected with the node bracket
    10 * (1 + |yu - yd| / sqrt_dt).  ``kappa_g`` is sqrt_dt times the
    driver's z-slope: below 1 the objective is strictly V-shaped around the
    unconstrained optimum (yu - yd) / (2 sqrt_dt), so its clamp onto the
    interval is the exact minimizer; the clamp is probed on both sides and
    kept when it wins.  Otherwise a 33-point scan brackets the minimum,
    golden-section refines it to ``ztol``, and ties are broken toward the
    smallest |z|.  Returns (y, z, iterations, status).
    """
    spread = abs(yu - yd)
    b = 10.0 * (1.0 + spread / sqrt_dt)
    lo = zlo
    hi = zhi
    if lo < -b:
        lo = -b
    if hi > b:
        hi = b
    if lo > hi:
        return np.nan, np.nan, 0, ERR_INFEASIBLE

    if hi - lo <= ztol:
        zm = 0.5 * (lo + hi)
        y, it = direct_value(codes, consts, t, zm, yu, yd, dt, sqrt_dt, tol, maxit, stack)
        if it < 0:
            return np.nan, zm, it, ERR_PICARD
        if not np.isfinite(y):
            return np.nan, zm, it, ERR_EVAL
        return y, zm, it, OK

    if kappa_g < 0.999:
        zc = (yu - yd) / (2.0 * sqrt_dt)
        if zc < lo:
            zc = lo
        elif zc > hi:
            zc = hi
        fc, it = direct_value(codes, consts, t, zc, yu, yd, dt, sqrt_dt, tol, maxit, stack)
        if it < 0:
            return np.nan, zc, it, ERR_PICARD
        if not np.isfinite(fc):
            return np.nan, zc, it, ERR_EVAL
        h = 1e-6 * (1.0 + abs(zc))
        if h < ztol:
            h = ztol
        confirmed = True
        if zc - h >= lo:
            fl, it2 = direct_value(codes, consts, t, zc - h, yu, yd, dt, sqrt_dt,
                                   tol, maxit, stack)
            if it2 < 0:
                return np.nan, zc - h, it2, ERR_PICARD
            if not np.isfinite(fl):
                return np.nan, zc - h, it2, ERR_EVAL
            if fl < fc - tie_eps:
                confirmed = False
        if confirmed and zc + h <= hi:
            fr, it3 = direct_value(codes, consts, t, zc + h, yu, yd, dt, sqrt_dt,
                                   tol, maxit, stack)
            if it3 < 0:
                return np.nan, zc + h, it3, ERR_PICARD
            if not np.isfinite(fr):
                return np.nan, zc + h, it3, ERR_EVAL
            if fr < fc - tie_eps:
                confirmed = False
        if confirmed:
            return fc, zc, it, OK

    # Coarse scan.
    best_i = 0
    best_f = np.inf
    step = (hi - lo) / (_NSCAN - 1)
    total_it = 0
    for i in range(_NSCAN):
        zi = lo + step * i
        f, it = direct_value(codes, consts, t, zi, yu, yd, dt, sqrt_dt, tol, maxit, stack)
        if it < 0:
            return np.nan, zi, it, ERR_PICARD
        if not np.isfinite(f):
            return np.nan, zi, it, ERR_EVAL
        total_it += it
        if f < best_f:
            best_f = f
            best_i = i
    a = lo + step * (best_i - 1)
    c = lo + step * (best_i + 1)
    if a < lo:
        a = lo
    if c > hi:
        c = hi

    # Golden-section refinement.
    p = c - _GOLDEN * (c - a)
    q = a + _GOLDEN * (c - a)
    fp, it = direct_value(codes, consts, t, p, yu, yd, dt, sqrt_dt, tol, maxit, stack)
    if it < 0:
        return np.nan, p, it, ERR_PICARD
    if not np.isfinite(fp):
        return np.nan, p, it, ERR_EVAL
    fq, it = direct_value(codes, consts, t, q, yu, yd, dt, sqrt_dt, tol, maxit, stack)
    if it < 0:
        return np.nan, q, it, ERR_PICARD
    if not np.isfinite(fq):
        return np.nan, q, it, ERR_EVAL
    while c - a > ztol:
        if fp <= fq:
            c = q
            q = p
            fq = fp
            p = c - _GOLDEN * (c - a)
            fp, it = direct_value(codes, consts, t, p, yu, yd, dt, sqrt_dt, tol, maxit, stack)
            if it < 0:
                return np.nan, p, it, ERR_PICARD
            if not np.isfinite(fp):
                return np.nan, p, it, ERR_EVAL
        else:
            a = p
            p = q
            fp = fq
            q = a + _GOLDEN * (c - a)
            fq, it = direct_value(codes, consts, t, q, yu, yd, dt, sqrt_dt, tol, maxit, stack)
            if it < 0:
                return np.nan, q, it, ERR_PICARD
            if not np.isfinite(fq):
                return np.nan, q, it, ERR_EVAL
    zm = 0.5 * (a + c)
    fm, it = direct_value(codes, consts, t, zm, yu, yd, dt, sqrt_dt, tol, maxit, stack)
    if it < 0:
        return np.nan, zm, it, ERR_PICARD
    if not np.isfinite(fm):
        return np.nan, zm, it, ERR_EVAL

    # Tie-break toward the smallest |z|.
    zc = 0.0
    if zc < lo:
        zc = lo
    elif zc > hi:
        zc = hi
    if zc != zm:
        f0, it = direct_value(codes, consts, t, zc, yu, yd, dt, sqrt_dt, tol, maxit, stack)
        if it < 0:
            return np.nan, zc, it, ERR_PICARD
        if not np.isfinite(f0):
            return np.nan, zc, it, ERR_EVAL
        if f0 <= fm + tie_eps:
            return f0, zc, it, OK
        # The sublevel set {F <= fm + tie_eps} is an interval around zm;
        # bisect for its endpoint nearest zero.
        lo_s = zc
        hi_s = zm
        if zm < zc:
            lo_s = zm
            hi_s = zc
            # search for the rightmost acceptable point: mirror by sign
            while hi_s - lo_s > 1e-12 * (1.0 + abs(hi_s)):
                mid = 0.5 * (lo_s + hi_s)
                f, it = direct_value(codes, consts, t, mid, yu, yd, dt, sqrt_dt, tol, maxit, stack)
                if it < 0:
                    return np.nan, mid, it, ERR_PICARD
                if not np.isfinite(f):
                    return np.nan, mid, it, ERR_EVAL
                if f <= fm + tie_eps:
                    lo_s = mid
                else:
                    hi_s = mid
            f, it = direct_value(codes, consts, t, lo_s, yu, yd, dt, sqrt_dt, tol, maxit, stack)
            return f, lo_s, it, OK
        while hi_s - lo_s > 1e-12 * (1.0 + abs(hi_s)):
            mid = 0.5 * (lo_s + hi_s)
            f, it = direct_value(codes, consts, t, mid, yu, yd, dt, sqrt_dt, tol, maxit, stack)
            if it < 0:
                return np.nan, mid, it, ERR_PICARD
            if not np.isfinite(f):
                return np.nan, mid, it, ERR_EVAL
            if f <= fm + tie_eps:
                hi_s = mid
            else:
                lo_s = mid
        f, it = direct_value(codes, consts, t, hi_s, yu, yd, dt, sqrt_dt, tol, maxit, stack)
        return f, hi_s, it, OK
    return fm, zm, it, OK


@maybe_njit
def backward_solve_direct(level_starts, stride, hi_level, times, dt, sqrt_dt,
                          codes, consts, tol, maxit, ztol, tie_eps, kappa_g,
                          zlo_levels, zhi_levels, mode, x, stop,
                          values, z_out, dc_up, dc_dn, cont_out, iters_out):
    """Backward sweep using the constrained one-step minimizer per node."""
    stack = np.empty(MAX_STACK, np.float64)
    for i in range(hi_level - 1, -1, -1):
        s = level_starts[i]
        e = level_starts[i + 1]
        t = times[i]
        zlo = zlo_levels[i]
        zhi = zhi_levels[i]
        for j in range(e - s):
            k = s + j
            cu = e + stride * j
            cd = cu + 1
            yu = values[cu]
            yd = values[cd]
            y, z, it, st = one_step_direct(codes, consts, t, yu, yd, dt, sqrt_dt,
                                           zlo, zhi, kappa_g, tol, maxit, ztol,
                                           tie_eps, stack)
            if st != OK:
                return st, k
            iters_out[k] = it
            z_out[k] = z
            cont_out[k] = y
            if mode == MODE_SNELL:
                xv = x[k]
                if xv > y:
                    y = xv
            elif mode == MODE_FROZEN:
                if stop[k] != 0:
                    y = x[k]
            values[k] = y
            gv = eval_program(codes, consts, t, y, z, stack)
            if not np.isfinite(gv):
                return ERR_EVAL, k
            dc_up[k] = y - yu - gv * dt + z * sqrt_dt
            dc_dn[k] = y - yd - gv * dt - z * sqrt_dt
    return OK, -1


@maybe_njit
def rule_values(level_starts, stride, times, dt, sqrt_dt, codes, consts,
                tol, maxit, x, rules, out):
    """Root values of x frozen at each stopping rule in ``rules`` (one row each)."""
    n_levels = level_starts.shape[0] - 1
    hi = n_levels - 1
    n = level_starts[n_levels]
    leaf_s = level_starts[hi]
    values = np.empty(n, np.float64)
    z_buf = np.empty(leaf_s, np.float64)
    cont = np.empty(leaf_s, np.float64)
    iters = np.empty(leaf_s, np.int64)
    for r in range(rules.shape[0]):
        for k in range(leaf_s, n):
            values[k] = x[k]
        st, node = backward_solve(level_starts, stride, hi, times, dt, sqrt_dt,
                                  codes, consts, tol, maxit, MODE_FROZEN,
                                  x, rules[r], values, z_buf, cont, iters)
        if st != OK:
            return st, node, r
        out[r] = values[0]
    return OK, -1, -1


@maybe_njit
def rule_values_direct(level_starts, stride, times, dt, sqrt_dt, codes, consts,
                       tol, maxit, ztol, tie_eps, kappa_g, zlo_levels, zhi_levels,
                       x, rules, out):
    """Same as ``rule_values`` with the constrained one-step minimizer."""
    n_levels = level_starts.shape[0] - 1
    hi = n_levels - 1
    n = level_starts[n_levels]
    leaf_s = level_starts[hi]
    values = np.empty(n, np.float64)
    z_buf = np.empty(leaf_s, np.float64)
    dcu = np.empty(leaf_s, np.float64)
    dcd = np.empty(leaf_s, np.float64)
    cont = np.empty(leaf_s, np.float64)
    iters = np.empty(leaf_s, np.int64)
    for r in range(rules.shape[0]):
        for k in range(leaf_s, n):
            values[k] = x[k]
        st, node = backward_solve_direct(level_starts, stride, hi, times, dt, sqrt_dt,
                                         codes, consts, tol, maxit, ztol, tie_eps,
                                         kappa_g, zlo_levels, zhi_levels, MODE_FROZEN,
                                         x, rules[r], values, z_buf, dcu, dcd, cont, iters)
        if st != OK:
            return st, node, r
        out[r] = values[0]
    return OK, -1, -1
