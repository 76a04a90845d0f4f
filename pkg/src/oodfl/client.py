"""Client-side local training, class prediction and MCM scoring."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import softmax

from .bdro import bdro_step
from .core import PromptBank, Role, RunConfig
from .encoder import FrozenEncoder, cosine_matrix
from .objective import Banks, fused_contexts


@dataclass(frozen=True, eq=False)
class ClientShard:
    """One client's samples; ``class_counts[c]`` is its number of class-``c`` samples."""

    client_id: int
    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        y = np.asarray(self.y, dtype=np.int64).ravel()
        if X.shape[0] == 0:
            raise ValueError(f"client {self.client_id} has an empty shard")
        if X.shape[0] != y.shape[0]:
            raise ValueError("sample and label counts differ")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError("label outside [0, C)")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def __len__(self):
        return self.y.shape[0]


@dataclass
class ClientState:
    """Persistent local bank plus the global/OOD banks staged by the server."""

    local_bank: PromptBank
    global_bank: Optional[PromptBank] = None
    ood_bank: Optional[PromptBank] = None

    def stage(self, global_bank: PromptBank, ood_bank: PromptBank) -> None:
        self.global_bank = global_bank
        self.ood_bank = ood_bank

    @property
    def banks(self) -> Banks:
        if self.global_bank is None or self.ood_bank is None:
            raise ValueError("no banks staged")
        return Banks(self.local_bank, self.global_bank, self.ood_bank)


@dataclass(frozen=True)
class TrainStats:
    mean_loss: float
    steps: int


def batches(n: int, batch_size: int, rng) -> list:
    """Shuffled index batches covering ``range(n)`` once; the last one may be short."""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def local_train(state: ClientState, shard: ClientShard, enc: FrozenEncoder,
                cfg: RunConfig, rng) -> tuple:
    """Run ``cfg.local_epochs`` epochs of client updates.

    The local bank is updated in ``state``; the returned global and OOD banks
    are what the client uploads. Returns ``(global_bank, ood_bank, stats)``.
    """
    banks = state.banks
    losses = []
    for _ in range(cfg.local_epochs):
        for idx in batches(len(shard), cfg.batch_size, rng):
            res = bdro_step(shard.X[idx], shard.y[idx], banks, enc, cfg.bdro,
                            cfg.temperature, cfg.fusion, rng, cfg.enable_bos)
            banks = res.banks
            losses.append(res.loss)
    state.local_bank = banks.local
    state.stage(banks.glob, banks.ood)
    mean = float(np.mean(losses)) if losses else float("nan")
    return banks.glob, banks.ood, TrainStats(mean, len(losses))


def id_embeddings(state: ClientState, enc: FrozenEncoder, rho: float) -> np.ndarray:
    fused = fused_contexts(state.local_bank.contexts, state.banks.glob.contexts, rho)
    return enc.encode(fused, state.local_bank.names)


def predict(X, state: ClientState, enc: FrozenEncoder, tau: float, rho: float) -> np.ndarray:
    """Class of highest similarity to the fused prompts; ties go to the lowest id.

    The score ``exp(cos / tau)`` is increasing in the cosine, so the argmax
    is taken on cosines directly.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    X = np.atleast_2d(X)
    return np.argmax(cosine_matrix(X, id_embeddings(state, enc, rho)), axis=1)


def mcm_score(X, global_bank: PromptBank, enc: FrozenEncoder, tau: float) -> np.ndarray:
    """Maximum softmax probability over the ID classes (OOD prompts excluded)."""
    if global_bank.role is Role.OOD:
        raise ValueError("MCM needs an ID bank")
    X = np.atleast_2d(X)
    z = cosine_matrix(X, enc.encode_bank(global_bank)) / tau
    return softmax(z, axis=1).max(axis=1)
