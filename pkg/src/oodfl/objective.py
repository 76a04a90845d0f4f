"""Class-level and distribution-level separation losses with closed-form gradients.

For a sample ``x`` with label ``y`` the loss is

    -log p(y | x) - log p(ID | x)

where both probabilities share one normaliser over the C fused ID prompts
and the U OOD prompts. With ``z = cos / tau`` this simplifies to
``-z_y + 2 * lse(z_id, z_ood) - lse(z_id)``, which is what the batched code
evaluates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import logsumexp, softmax

from .core import PromptBank, PromptContext
from .encoder import FrozenEncoder, encode_prompt, similarity_score


class Banks(NamedTuple):
    local: PromptBank
    glob: PromptBank
    ood: PromptBank


@dataclass(frozen=True)
class ScoreSlate:
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.id_scores, dtype=np.float64).ravel()
        ood = np.asarray(self.ood_scores, dtype=np.float64).ravel()
        if ids.size == 0:
            raise ValueError("need at least one ID score")
        for arr in (ids, ood):
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                raise ValueError("scores must be finite and positive")
        object.__setattr__(self, "id_scores", ids)
        object.__setattr__(self, "ood_scores", ood)

    @property
    def total(self) -> float:
        return float(self.id_scores.sum() + self.ood_scores.sum())


@dataclass(frozen=True)
class LossGradient:
    local: np.ndarray
    glob: np.ndarray
    ood: np.ndarray

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(g), initial=0.0))
                   for g in (self.local, self.glob, self.ood))


def fuse_prompts(t_l: PromptContext, t_g: PromptContext, rho: float) -> PromptContext:
    if t_l.class_id != t_g.class_id:
        raise ValueError(f"class mismatch: {t_l.class_id} vs {t_g.class_id}")
    if not 0 <= rho <= 1:
        raise ValueError("fusion weight out of [0,1]")
    if rho == 0:
        return t_l
    if rho == 1:
        return t_g
    return t_l.with_context((1 - rho) * t_l.context + rho * t_g.context)


def fused_contexts(local_ctx, global_ctx, rho: float) -> np.ndarray:
    if rho == 0:
        return np.asarray(local_ctx)
    if rho == 1:
        return np.asarray(global_ctx)
    return (1 - rho) * local_ctx + rho * global_ctx


def class_probabilities(s: ScoreSlate) -> np.ndarray:
    return s.id_scores / s.total


def id_probability(s: ScoreSlate) -> float:
    if s.ood_scores.size == 0:
        return 1.0
    return float(s.id_scores.sum() / s.total)


def score_slate(x, banks: Banks, enc: FrozenEncoder, tau: float, rho: float,
                use_global=None, use_ood=None) -> ScoreSlate:
    """Scores of ``x`` against every fused ID prompt and every OOD prompt.

    ``use_global`` / ``use_ood`` optionally substitute context arrays (for
    instance perturbed ones) for the banks' own.
    """
    g_ctx = banks.glob.contexts if use_global is None else use_global
    o_ctx = banks.ood.contexts if use_ood is None else use_ood
    fused = fused_contexts(banks.local.contexts, g_ctx, rho)
    id_scores = [
        similarity_score(x, encode_prompt(enc, PromptContext(c, n, "local", i)), tau)
        for i, (c, n) in enumerate(zip(fused, banks.local.names))
    ]
    ood_scores = [
        similarity_score(x, encode_prompt(enc, PromptContext(c, n, "ood")), tau)
        for c, n in zip(o_ctx, banks.ood.names)
    ]
    return ScoreSlate(np.array(id_scores), np.array(ood_scores))


def slate_loss(s: ScoreSlate, label: int) -> float:
    """``-log p(label) - log p(ID)`` evaluated from raw scores."""
    if not 0 <= label < s.id_scores.size:
        raise ValueError(f"label {label} out of range")
    return float(-np.log(class_probabilities(s)[label]) - np.log(id_probability(s)))


def separation_loss(x, label: int, banks: Banks, enc: FrozenEncoder,
                    tau: float, rho: float) -> float:
    return slate_loss(score_slate(x, banks, enc, tau, rho), label)


# -- batched evaluation ----------------------------------------------------

def _unit_rows(M):
    n = np.linalg.norm(M, axis=1)
    if np.any(n == 0):
        raise ValueError("zero-norm embedding")
    return M / n[:, None], n


def batch_loss_and_grad(X, y, local_ctx, global_ctx, ood_ctx, id_names, ood_names,
                        enc: FrozenEncoder, tau: float, rho: float,
                        weights: Optional[np.ndarray] = None, need_grad: bool = True):
    """Per-sample losses and the weighted gradient w.r.t. every context array.

    ``weights`` defaults to ``1/B`` (batch mean). Returns ``(losses, grads)``
    with ``grads = (d_local, d_global, d_ood)`` or ``None``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    B = X.shape[0]
    C = local_ctx.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if np.any(y < 0) or np.any(y >= C):
        raise ValueError("label out of range")
    A = enc.context_block
    Nb = enc.name_block

    H, _ = _unit_rows(X)
    fused = fused_contexts(local_ctx, global_ctx, rho)
    E_id = fused @ A.T + id_names @ Nb.T
    U_hat_id, n_id = _unit_rows(E_id)
    cos_id = H @ U_hat_id.T
    has_ood = ood_ctx.shape[0] > 0
    if has_ood:
        E_ood = ood_ctx @ A.T + ood_names @ Nb.T
        U_hat_ood, n_ood = _unit_rows(E_ood)
        cos_ood = H @ U_hat_ood.T
        z = np.concatenate([cos_id, cos_ood], axis=1) / tau
    else:
        z = cos_id / tau
    z_id = z[:, :C]
    rows = np.arange(B)
    losses = -z_id[rows, y] + 2 * logsumexp(z, axis=1) - logsumexp(z_id, axis=1)
    if not need_grad:
        return losses, None

    w = np.full(B, 1.0 / B) if weights is None else np.asarray(weights, dtype=np.float64)
    p_all = softmax(z, axis=1)
    dz_id = 2 * p_all[:, :C] - softmax(z_id, axis=1)
    dz_id[rows, y] -= 1.0
    G_id = (w / tau)[:, None] * dz_id
    gE_id = (G_id.T @ H - np.sum(G_id * cos_id, axis=0)[:, None] * U_hat_id) / n_id[:, None]
    g_fused = gE_id @ A
    g_local = (1 - rho) * g_fused
    g_global = rho * g_fused
    if has_ood:
        G_ood = (w / tau)[:, None] * (2 * p_all[:, C:])
        gE_ood = (G_ood.T @ H - np.sum(G_ood * cos_ood, axis=0)[:, None] * U_hat_ood) / n_ood[:, None]
        g_ood = gE_ood @ A
    else:
        g_ood = np.zeros_like(ood_ctx, dtype=np.float64)
    return losses, (g_local, g_global, g_ood)


def banks_loss_and_grad(X, y, banks: Banks, enc: FrozenEncoder, tau: float, rho: float,
                        global_ctx=None, ood_ctx=None, weights=None, need_grad=True):
    g = banks.glob.contexts if global_ctx is None else global_ctx
    o = banks.ood.contexts if ood_ctx is None else ood_ctx
    return batch_loss_and_grad(X, y, banks.local.contexts, g, o, banks.local.names,
                               banks.ood.names, enc, tau, rho, weights, need_grad)


def loss_gradient(X, y, banks: Banks, enc: FrozenEncoder, tau: float, rho: float) -> LossGradient:
    """Batch-mean gradient of the separation loss for all three banks."""
    _, (gl, gg, go) = banks_loss_and_grad(X, y, banks, enc, tau, rho)
    return LossGradient(gl, gg, go)


def mean_separation_loss(X, y, banks: Banks, enc: FrozenEncoder, tau: float, rho: float) -> float:
    losses, _ = banks_loss_and_grad(X, y, banks, enc, tau, rho, need_grad=False)
    return float(losses.mean())
