"""Semi-unbalanced optimal transport between global and OOD prompts.

The plan ``pi`` is ``C x J``. Columns (OOD prompts) carry a hard marginal
``b``; row sums are pulled toward ``a`` by a generalised KL penalty:

    J(pi) = <cost, pi> + lam * sum_c [r_c log(r_c / a_c) - r_c + a_c],  r = pi 1

The solver is Frank-Wolfe over the product of scaled column simplices: the
linear minimisation oracle puts each column's whole mass ``b_j`` on its
row of smallest partial derivative. The default pairwise variant shifts
mass between two rows of one column per iteration instead of blending the
whole plan toward the vertex, which avoids the zig-zag of the classic
update near faces.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import PromptBank, SemiUotConfig

ROW_FLOOR = 1e-30


@dataclass(frozen=True, eq=False)
class TransportPlan:
    pi: np.ndarray
    col_marginal: np.ndarray
    row_target: np.ndarray
    objective_value: float
    iterations: int
    history: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def row_sums(self) -> np.ndarray:
        return self.pi.sum(axis=1)


def cost_matrix(T_g, T_o) -> np.ndarray:
    """Squared Euclidean distances between global and OOD contexts."""
    G = T_g.contexts if isinstance(T_g, PromptBank) else np.atleast_2d(T_g)
    O = T_o.contexts if isinstance(T_o, PromptBank) else np.atleast_2d(T_o)
    if G.shape[1] != O.shape[1]:
        raise ValueError(f"context dims differ: {G.shape[1]} vs {O.shape[1]}")
    diff = G[:, None, :] - O[None, :, :]
    return np.einsum("cjk,cjk->cj", diff, diff)


def semiuot_gradient(pi, cost, a, lam: float) -> np.ndarray:
    r = np.maximum(np.asarray(pi).sum(axis=1), ROW_FLOOR)
    return cost + lam * np.log(r / a)[:, None]


def fw_direction(grad, b) -> np.ndarray:
    """Vertex putting each column's mass on its argmin row (lowest index on ties)."""
    grad = np.asarray(grad)
    rows = np.argmin(grad, axis=0)
    s = np.zeros_like(grad, dtype=np.float64)
    s[rows, np.arange(grad.shape[1])] = b
    return s


def pairwise_direction(pi, grad) -> np.ndarray:
    """Move one column's worst occupied row onto its best row.

    For every column the worst row is the occupied row of largest gradient
    and the best row the argmin (lowest index on ties); the column whose
    swap promises the largest first-order decrease is chosen. A full step
    empties the worst row, so iterates stay convex combinations of vertices
    and keep their column sums.
    """
    pi = np.asarray(pi)
    grad = np.asarray(grad)
    cols = np.arange(pi.shape[1])
    src = np.argmax(np.where(pi > 0, grad, -np.inf), axis=0)
    dst = np.argmin(grad, axis=0)
    d = np.zeros_like(pi, dtype=np.float64)
    amount = np.where(src != dst, pi[src, cols], 0.0)
    gain = amount * (grad[src, cols] - grad[dst, cols])
    j = int(np.argmax(gain))
    d[src[j], j] -= amount[j]
    d[dst[j], j] += amount[j]
    return d


def _kl_rows(r, a) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(r > 0, r * np.log(r / a), 0.0)
    return float(np.sum(t - r + a))


def semiuot_objective(pi, cost, a, lam: float) -> float:
    pi = np.asarray(pi, dtype=np.float64)
    lin = float(np.sum(cost * pi))
    if lam == 0:
        return lin
    return lin + lam * _kl_rows(pi.sum(axis=1), np.asarray(a, dtype=np.float64))


def _line_search(lin_d: float, r, dr, a, lam: float, guess: float = 0.5) -> float:
    """Minimiser over [0, 1] of the objective restricted to ``pi + beta * d``.

    The restriction is convex, so its derivative
    ``lin_d + lam * sum(dr * log((r + beta dr) / a))`` is nondecreasing; a
    bracketed Newton iteration finds its root. Rows are few, so this runs on
    Python floats.
    """
    if lam == 0:
        return 1.0 if lin_d < 0 else 0.0
    terms = [(float(ri), float(di), float(ai)) for ri, di, ai in zip(r, dr, a) if di != 0]
    log = math.log

    def deriv_curv(beta):
        val, curv = lin_d, 0.0
        for ri, di, ai in terms:
            rb = ri + beta * di
            if rb <= 0:
                return (-math.inf if di > 0 else math.inf), math.inf
            val += lam * di * log(rb / ai)
            curv += lam * di * di / rb
        return val, curv

    if deriv_curv(1.0)[0] <= 0:
        return 1.0
    if deriv_curv(0.0)[0] >= 0:
        return 0.0
    lo, hi = 0.0, 1.0
    beta = min(max(guess, 1e-12), 1.0 - 1e-12)
    for _ in range(100):
        val, curv = deriv_curv(beta)
        if val > 0:
            hi = beta
        elif val < 0:
            lo = beta
        else:
            return beta
        if hi - lo <= 1e-15 * max(hi, 1e-300):
            break
        nxt = beta - val / curv if 0 < curv < math.inf else 0.5 * (lo + hi)
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - beta) <= 1e-16 * max(beta, 1e-300):
            beta = nxt
            break
        beta = nxt
    return beta


def semiuot_solve(cost, a, b, cfg: SemiUotConfig,
                  callback: Optional[Callable[[int, np.ndarray, float], None]] = None
                  ) -> TransportPlan:
    """Frank-Wolfe from the vertex with every column on row 0.

    ``cfg.step_rule`` selects the update:

    ``"fixed"``
        ``pi <- (1 - beta) pi + beta s`` with ``beta = 1/(i+2)``.
    ``"linesearch"``
        same segment toward the vertex ``s``, exact minimisation over beta.
    ``"pairwise"`` (default)
        :func:`pairwise_direction` with exact line search.

    Both line-searched rules keep the objective nonincreasing.
    ``callback(i, pi, objective)`` sees every iterate, ``i = 0`` included.
    """
    cost = np.asarray(cost, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    C, J = cost.shape
    if a.shape != (C,) or b.shape != (J,):
        raise ValueError("marginal shapes do not match the cost matrix")
    if np.any(a <= 0) or np.any(b < 0):
        raise ValueError("a must be positive and b nonnegative")
    lam = float(cfg.lam)

    pi = np.zeros((C, J))
    pi[0] = b
    f = semiuot_objective(pi, cost, a, lam)
    history = [f]
    if callback:
        callback(0, pi, f)
    it = 0
    for it in range(cfg.max_iters):
        grad = semiuot_gradient(pi, cost, a, lam)
        s = fw_direction(grad, b)
        if cfg.step_rule == "pairwise":
            d = pairwise_direction(pi, grad)
            if -float(np.sum(grad * d)) <= 0:
                break
            beta = _line_search(float(np.sum(cost * d)), pi.sum(axis=1), d.sum(axis=1),
                                a, lam, guess=1.0)
            if beta == 0.0:
                break
            pi = pi + beta * d
            f_new = semiuot_objective(pi, cost, a, lam)
        else:
            d = s - pi
            gap = -float(np.sum(grad * d))
            if gap <= 0:
                break
            if cfg.step_rule == "fixed":
                beta = 1.0 / (it + 2)
            else:
                beta = _line_search(float(np.sum(cost * d)), pi.sum(axis=1), d.sum(axis=1),
                                    a, lam, guess=1.0 / (it + 2))
                if beta == 0.0:
                    break
            pi = (1 - beta) * pi + beta * s
            f_new = semiuot_objective(pi, cost, a, lam)
        history.append(f_new)
        if callback:
            callback(it + 1, pi, f_new)
        decrease = (f - f_new) / max(abs(f), 1e-300)
        f = f_new
        if 0 <= decrease < cfg.convergence_tol:
            it += 1
            break
    else:
        it = cfg.max_iters
    return TransportPlan(pi, b.copy(), a.copy(), f, it, np.array(history))


def exact_ot_small(cost) -> float:
    """Balanced OT with uniform marginals by enumerating permutation couplings."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError("cost must be square")
    if n > 8:
        raise ValueError("enumeration limited to n <= 8")
    if n == 0:
        return 0.0
    best = math.inf
    cols = range(n)
    for perm in itertools.permutations(cols):
        total = sum(cost[i, perm[i]] for i in cols)
        best = min(best, total)
    return best / n


# -- plain-text instance / plan format --------------------------------------

class InstanceFormatError(ValueError):
    pass


def _tokens(text: str):
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def parse_instance(text: str):
    """Parse ``C J`` / C cost rows / ``a`` row / ``b`` row / ``lambda``."""
    lines = list(_tokens(text))
    if not lines:
        raise InstanceFormatError("empty instance")
    try:
        lineno, head = lines[0]
        if len(head) != 2:
            raise InstanceFormatError(f"line {lineno}: expected 'C J'")
        C, J = int(head[0]), int(head[1])
        if C < 1 or J < 1:
            raise InstanceFormatError(f"line {lineno}: dimensions must be positive")
        if len(lines) != C + 4:
            raise InstanceFormatError(f"expected {C + 4} non-comment lines, got {len(lines)}")

        def row(k, n):
            ln, toks = lines[k]
            if len(toks) != n:
                raise InstanceFormatError(f"line {ln}: expected {n} values, got {len(toks)}")
            try:
                return [float(t) for t in toks]
            except ValueError:
                raise InstanceFormatError(f"line {ln}: non-numeric value") from None

        cost = np.array([row(1 + c, J) for c in range(C)])
        a = np.array(row(C + 1, C))
        b = np.array(row(C + 2, J))
        lam = row(C + 3, 1)[0]
    except ValueError as exc:
        if isinstance(exc, InstanceFormatError):
            raise
        raise InstanceFormatError(str(exc)) from None
    if lam < 0:
        raise InstanceFormatError("lambda must be >= 0")
    if np.any(a <= 0) or np.any(b < 0):
        raise InstanceFormatError("a must be positive and b nonnegative")
    return cost, a, b, lam


def format_instance(cost, a, b, lam) -> str:
    cost = np.atleast_2d(cost)
    out = [f"{cost.shape[0]} {cost.shape[1]}"]
    out += [" ".join(repr(float(v)) for v in r) for r in cost]
    out.append(" ".join(repr(float(v)) for v in a))
    out.append(" ".join(repr(float(v)) for v in b))
    out.append(repr(float(lam)))
    return "\n".join(out) + "\n"


def format_plan(plan: TransportPlan) -> str:
    C, J = plan.pi.shape
    out = [f"objective {plan.objective_value:.12g}",
           f"iterations {plan.iterations}",
           f"plan {C} {J}"]
    out += [" ".join(f"{v:.12g}" for v in r) for r in plan.pi]
    return "\n".join(out) + "\n"


def parse_plan(text: str):
    """Inverse of :func:`format_plan`: returns ``(objective, iterations, pi)``."""
    lines = [t for _, t in _tokens(text)]
    try:
        if lines[0][0] != "objective" or lines[1][0] != "iterations" or lines[2][0] != "plan":
            raise InstanceFormatError("missing plan header")
        obj = float(lines[0][1])
        iters = int(lines[1][1])
        C, J = int(lines[2][1]), int(lines[2][2])
        pi = np.array([[float(v) for v in r] for r in lines[3:3 + C]])
    except (IndexError, ValueError) as exc:
        if isinstance(exc, InstanceFormatError):
            raise
        raise InstanceFormatError(f"malformed plan: {exc}") from None
    if pi.shape != (C, J):
        raise InstanceFormatError(f"plan shape {pi.shape} != ({C}, {J})")
    return obj, iters, pi
