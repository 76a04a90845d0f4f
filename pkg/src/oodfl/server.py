"""Server aggregation and transport-based calibration of global / OOD prompts."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import PromptBank, Role, RunConfig
from .transport import TransportPlan, cost_matrix, semiuot_solve


@dataclass(frozen=True, eq=False)
class CalibrationOutcome:
    new_global: PromptBank
    new_ood: PromptBank
    seemly_indices: np.ndarray
    plan: Optional[TransportPlan]
    scores: Optional[np.ndarray]
    missing_classes: tuple = ()


def aggregate_global(banks: Sequence[PromptBank], counts, previous: Optional[PromptBank] = None):
    """Per-class count-weighted mean of client global contexts.

    A class no client has samples of keeps ``previous``'s context (or, with
    no previous bank, raises). Returns ``(bank, missing_class_ids)``.
    """
    if not banks:
        raise ValueError("no client banks")
    counts = np.asarray(counts, dtype=np.float64)
    stack = np.stack([b.contexts for b in banks])  # K x C x d
    if counts.shape != stack.shape[:2]:
        raise ValueError(f"counts shape {counts.shape} != {stack.shape[:2]}")
    totals = counts.sum(axis=0)
    missing = tuple(int(c) for c in np.flatnonzero(totals == 0))
    if missing and previous is None:
        raise ValueError(f"classes {missing} have no samples and no previous prompt")
    safe = np.where(totals > 0, totals, 1.0)
    out = np.einsum("kc,kcd->cd", counts, stack) / safe[:, None]
    if missing:
        out[list(missing)] = previous.contexts[list(missing)]
    return PromptBank(Role.GLOBAL_ID, out, banks[0].names), missing


def alignment_scores(plan: TransportPlan, cost) -> np.ndarray:
    """Per-unit transported cost of each column; lower means closer to the ID prompts."""
    b = plan.col_marginal
    moved = np.sum(plan.pi * np.asarray(cost), axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(b > 0, moved / np.where(b > 0, b, 1.0), 0.0)


def select_seemly(scores, M: int) -> np.ndarray:
    scores = np.asarray(scores)
    if not 0 <= M <= scores.size:
        raise ValueError("M out of range")
    order = np.lexsort((np.arange(scores.size), scores))
    return np.sort(order[:M])


def retained_indices(scores, U: int) -> np.ndarray:
    """Indices of the ``U`` highest scores, listed by descending score then ascending index.

    Membership is taken from the top end of the same (score, index) order
    that :func:`select_seemly` reads from the bottom, so the two sets stay
    disjoint under ties whenever ``M + U <= J``.
    """
    scores = np.asarray(scores)
    if not 0 <= U <= scores.size:
        raise ValueError("U out of range")
    order = np.lexsort((np.arange(scores.size), scores))
    chosen = order[scores.size - U:]
    return chosen[np.lexsort((chosen, -scores[chosen]))]


def filter_ood(all_ood: PromptBank, scores, U: int) -> PromptBank:
    idx = retained_indices(scores, U)
    return PromptBank(Role.OOD, all_ood.contexts[idx], all_ood.names[idx])


def calibrate_global(T_g: PromptBank, seemly_contexts, plan_restricted, alpha: float) -> PromptBank:
    """Blend each class context toward the plan-weighted mean of the seemly contexts."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha out of [0,1]")
    W = np.atleast_2d(np.asarray(plan_restricted, dtype=np.float64))
    S = np.atleast_2d(np.asarray(seemly_contexts, dtype=np.float64))
    if W.shape != (T_g.size, S.shape[0]):
        raise ValueError("restricted plan shape mismatch")
    if alpha == 1 or S.shape[0] == 0:
        return T_g
    mass = W.sum(axis=1)
    has = mass > 0
    target = np.zeros_like(T_g.contexts)
    target[has] = (W[has] / mass[has, None]) @ S
    new = T_g.contexts.copy()
    new[has] = alpha * T_g.contexts[has] + (1 - alpha) * target[has]
    return T_g.with_contexts(new)


def concat_ood(banks: Sequence[PromptBank]) -> PromptBank:
    return PromptBank(Role.OOD, np.concatenate([b.contexts for b in banks]),
                      np.concatenate([b.names for b in banks]))


def round_robin(banks: Sequence[PromptBank], U: int) -> PromptBank:
    """Prompt 0 of every client, then prompt 1 of every client, ... until ``U``."""
    picks = []
    depth = max(b.size for b in banks)
    for i in range(depth):
        for b in banks:
            if i < b.size and len(picks) < U:
                picks.append((b.contexts[i], b.names[i]))
    if len(picks) < U:
        raise ValueError(f"only {len(picks)} OOD prompts for {U} slots")
    return PromptBank(Role.OOD, np.array([p[0] for p in picks]), np.array([p[1] for p in picks]))


def default_top_m(J: int, top_m: int = 0) -> int:
    return top_m if top_m > 0 else math.ceil(0.1 * J)


def server_round(global_banks: Sequence[PromptBank], ood_banks: Sequence[PromptBank],
                 counts, previous_global: Optional[PromptBank], cfg: RunConfig,
                 enable_goc: Optional[bool] = None) -> CalibrationOutcome:
    """Aggregate, then (with GOC) transport-calibrate the global bank and prune OOD prompts."""
    if not global_banks or len(global_banks) != len(ood_banks):
        raise ValueError("need matching, nonempty global and OOD bank lists")
    goc = cfg.enable_goc if enable_goc is None else enable_goc
    U = cfg.num_ood_prompts
    agg, missing = aggregate_global(global_banks, counts, previous_global)
    if not goc:
        return CalibrationOutcome(agg, round_robin(ood_banks, U), np.empty(0, dtype=np.int64),
                                  None, None, missing)
    all_ood = concat_ood(ood_banks)
    J = all_ood.size
    if U > J:
        raise ValueError(f"U={U} exceeds the {J} collected OOD prompts")
    C = agg.size
    cost = cost_matrix(agg, all_ood)
    plan = semiuot_solve(cost, np.full(C, 1.0 / C), np.full(J, 1.0 / J), cfg.semiuot)
    scores = alignment_scores(plan, cost)
    M = default_top_m(J, cfg.server.top_m)
    seemly = select_seemly(scores, M)
    new_global = calibrate_global(agg, all_ood.contexts[seemly], plan.pi[:, seemly],
                                  cfg.server.alpha)
    return CalibrationOutcome(new_global, filter_ood(all_ood, scores, U), seemly, plan,
                              scores, missing)
