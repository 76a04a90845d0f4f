"""Frozen linear text-encoder surrogate and similarity scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PromptBank, PromptContext


@dataclass(frozen=True, eq=False)
class FrozenEncoder:
    """Fixed map ``(context ++ class_name) -> embedding``, weight ``d x 2*d_ctx``."""

    weight: np.ndarray

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64, copy=True)
        if w.ndim != 2 or w.shape[1] % 2:
            raise ValueError(f"weight must be d x (2*d_ctx), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite encoder weight")
        w.setflags(write=False)
        object.__setattr__(self, "weight", w)

    @classmethod
    def random(cls, embedding_dim: int, context_dim: int, rng) -> "FrozenEncoder":
        w = rng.standard_normal((embedding_dim, 2 * context_dim)) / np.sqrt(context_dim)
        return cls(w)

    @property
    def embedding_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def context_dim(self) -> int:
        return self.weight.shape[1] // 2

    @property
    def context_block(self) -> np.ndarray:
        return self.weight[:, :self.context_dim]

    @property
    def name_block(self) -> np.ndarray:
        return self.weight[:, self.context_dim:]

    def encode(self, contexts, names) -> np.ndarray:
        """Row-wise encoding of stacked ``(n, d_ctx)`` contexts and names."""
        contexts = np.atleast_2d(contexts)
        names = np.atleast_2d(names)
        if contexts.shape[-1] != self.context_dim or names.shape[-1] != self.context_dim:
            raise ValueError("prompt dimension does not match encoder")
        return contexts @ self.context_block.T + names @ self.name_block.T

    def encode_bank(self, bank: PromptBank) -> np.ndarray:
        return self.encode(bank.contexts, bank.names)

    def names_from_embeddings(self, embeddings) -> np.ndarray:
        """Least-squares class-name vectors whose name-block image is ``embeddings``."""
        emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        sol, *_ = np.linalg.lstsq(self.name_block, emb.T, rcond=None)
        return sol.T


def encode_prompt(enc: FrozenEncoder, p: PromptContext) -> np.ndarray:
    x = np.concatenate([p.context, p.class_name])
    if x.shape[0] != enc.weight.shape[1]:
        raise ValueError(f"prompt of size {x.shape[0]} vs encoder input {enc.weight.shape[1]}")
    return enc.weight @ x


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarity_score(x, e, tau: float) -> float:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return float(np.exp(cosine_similarity(x, e) / tau))


def cosine_matrix(X, E) -> np.ndarray:
    """Pairwise cosines between rows of ``X`` and rows of ``E``."""
    X = np.atleast_2d(X)
    E = np.atleast_2d(E)
    nx = np.linalg.norm(X, axis=1)
    ne = np.linalg.norm(E, axis=1)
    if np.any(nx == 0) or np.any(ne == 0):
        raise ValueError("cosine similarity of a zero-norm vector")
    return (X / nx[:, None]) @ (E / ne[:, None]).T
