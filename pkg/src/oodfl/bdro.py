"""Worst-case prompt exploration and the smoothed robust loss.

Each client step draws Gaussian noise for the global and OOD banks, pushes
it uphill on the penalised separation loss, then descends the log-mean-exp
of per-sample (loss - transport cost) with the noise held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from .core import BdroConfig, PromptBank, PromptContext, Role
from .encoder import FrozenEncoder
from .objective import Banks, banks_loss_and_grad

# loss_eval(contexts) -> (batch loss, gradient w.r.t. contexts)
LossEval = Callable[[np.ndarray], Tuple[float, np.ndarray]]

MAX_HALVINGS = 30


@dataclass(frozen=True)
class PerturbationState:
    epsilons: np.ndarray
    target_role: Role

    def apply(self, bank: PromptBank) -> np.ndarray:
        return bank.contexts + self.epsilons


def transport_cost(p: PromptContext, q: PromptContext) -> float:
    if p.context.shape != q.context.shape:
        raise ValueError("prompt dimensions differ")
    return float(np.linalg.norm(p.context - q.context))


def mean_cost(eps: np.ndarray) -> float:
    """Average per-prompt L2 displacement."""
    if eps.shape[0] == 0:
        return 0.0
    return float(np.linalg.norm(eps, axis=1).mean())


def _mean_cost_grad(eps: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(eps, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms[:, None] > 0, eps / safe[:, None], 0.0) / max(eps.shape[0], 1)


def penalized_objective(loss: float, eps: np.ndarray, tau_cost: float, gamma: float) -> float:
    return loss - tau_cost * mean_cost(eps) - gamma * float(np.abs(eps).sum())


def perturb_bank(bank: PromptBank, loss_eval: LossEval, tau_cost: float,
                 cfg: BdroConfig, rng: np.random.Generator,
                 steps: int | None = None) -> PerturbationState:
    """Gradient ascent on ``L(bank + eps) - tau_cost * cost(eps) - gamma * |eps|_1``.

    Each step starts at ``cfg.inner_lr`` and halves it until the penalised
    objective does not decrease; a step that never qualifies is skipped.
    """
    if bank.role not in (Role.GLOBAL_ID, Role.OOD):
        raise ValueError("only global and OOD banks are perturbed")
    if steps is None:
        steps = cfg.steps_global if bank.role is Role.GLOBAL_ID else cfg.steps_ood
    eps = rng.normal(0.0, cfg.sigma, size=bank.contexts.shape) if cfg.sigma > 0 \
        else np.zeros_like(bank.contexts)
    base = bank.contexts
    loss, g = loss_eval(base + eps)
    obj = penalized_objective(loss, eps, tau_cost, cfg.gamma)
    for _ in range(steps):
        ascent = g - tau_cost * _mean_cost_grad(eps) - cfg.gamma * np.sign(eps)
        lr = cfg.inner_lr
        for _ in range(MAX_HALVINGS):
            cand = eps + lr * ascent
            c_loss, c_g = loss_eval(base + cand)
            c_obj = penalized_objective(c_loss, cand, tau_cost, cfg.gamma)
            if c_obj >= obj:
                eps, g, obj = cand, c_g, c_obj
                break
            lr *= 0.5
    return PerturbationState(eps, bank.role)


def robust_loss(f_values, scale: float) -> float:
    """``scale * log(mean(exp(f / scale)))`` with a max shift."""
    f = np.asarray(f_values, dtype=np.float64).ravel()
    if f.size == 0:
        raise ValueError("empty loss vector")
    if scale <= 0:
        raise ValueError("scale must be positive")
    return float(scale * (logsumexp(f / scale) - np.log(f.size)))


def robust_weights(f_values, scale: float) -> np.ndarray:
    """Gradient of :func:`robust_loss` w.r.t. each ``f_i``."""
    return softmax(np.asarray(f_values, dtype=np.float64) / scale)


@dataclass(frozen=True)
class StepResult:
    banks: Banks
    loss: float
    global_eps: np.ndarray
    ood_eps: np.ndarray


def composite_terms(X, y, banks: Banks, enc: FrozenEncoder, tau: float, rho: float,
                    cfg: BdroConfig, global_eps, ood_eps, need_grad=True):
    """Per-sample ``f_i``, robust loss and its gradient with the noise frozen."""
    g_hat = banks.glob.contexts + global_eps
    o_hat = banks.ood.contexts + ood_eps
    losses, _ = banks_loss_and_grad(X, y, banks, enc, tau, rho, g_hat, o_hat, need_grad=False)
    f = losses - cfg.tau1 * mean_cost(global_eps) - cfg.tau2 * mean_cost(ood_eps)
    scale = cfg.tau2 * cfg.mu
    value = robust_loss(f, scale)
    if not need_grad:
        return f, value, None
    _, grads = banks_loss_and_grad(X, y, banks, enc, tau, rho, g_hat, o_hat,
                                   weights=robust_weights(f, scale))
    return f, value, grads


def plain_step(X, y, banks: Banks, enc: FrozenEncoder, tau: float, rho: float,
               lr: float) -> StepResult:
    losses, (gl, gg, go) = banks_loss_and_grad(X, y, banks, enc, tau, rho)
    new = Banks(banks.local.with_contexts(banks.local.contexts - lr * gl),
                banks.glob.with_contexts(banks.glob.contexts - lr * gg),
                banks.ood.with_contexts(banks.ood.contexts - lr * go))
    zeros_g = np.zeros_like(banks.glob.contexts)
    zeros_o = np.zeros_like(banks.ood.contexts)
    return StepResult(new, float(losses.mean()), zeros_g, zeros_o)


def bdro_step(X, y, banks: Banks, enc: FrozenEncoder, cfg: BdroConfig,
              tau: float, rho: float, rng: np.random.Generator,
              enable_bos: bool = True) -> StepResult:
    """One client update; returns the new banks and the loss before the step."""
    if not enable_bos:
        return plain_step(X, y, banks, enc, tau, rho, cfg.outer_lr)

    def global_eval(ctx):
        losses, grads = banks_loss_and_grad(X, y, banks, enc, tau, rho, global_ctx=ctx)
        return float(losses.mean()), grads[1]

    g_state = perturb_bank(banks.glob, global_eval, cfg.tau1, cfg, rng)
    g_hat = g_state.apply(banks.glob)

    def ood_eval(ctx):
        losses, grads = banks_loss_and_grad(X, y, banks, enc, tau, rho,
                                            global_ctx=g_hat, ood_ctx=ctx)
        return float(losses.mean()), grads[2]

    o_state = perturb_bank(banks.ood, ood_eval, cfg.tau2, cfg, rng)
    _, value, (gl, gg, go) = composite_terms(X, y, banks, enc, tau, rho, cfg,
                                             g_state.epsilons, o_state.epsilons)
    lr = cfg.outer_lr
    new = Banks(banks.local.with_contexts(banks.local.contexts - lr * gl),
                banks.glob.with_contexts(banks.glob.contexts - lr * gg),
                banks.ood.with_contexts(banks.ood.contexts - lr * go))
    return StepResult(new, value, g_state.epsilons, o_state.epsilons)
