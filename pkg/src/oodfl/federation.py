"""Round orchestration: participation, local training, server step, evaluation."""

from __future__ import annotations

import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .client import ClientShard, ClientState, local_train, mcm_score, predict
from .core import PromptBank, Role, RunConfig, derive_rng, validate_config
from .data import (EmbeddingDataset, init_ood_prompts, partition_dirichlet,
                   partition_pathological, split_by_class_share)
from .encoder import FrozenEncoder
from .metrics import auroc, fpr_at_tpr
from .server import server_round

INIT_SCALE = 0.02
OOD_PERCENTILE = 1.0


@dataclass(frozen=True)
class RoundReport:
    round: int
    participants: tuple
    train_loss: float
    acc: Optional[float] = None
    cacc: Optional[float] = None
    auroc: Optional[float] = None
    fpr95: Optional[float] = None
    seconds: float = 0.0

    def __post_init__(self):
        for name in ("acc", "cacc", "auroc", "fpr95"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 1:
                raise ValueError(f"{name}={v} outside [0, 1]")

    @property
    def evaluated(self) -> bool:
        return self.acc is not None


@dataclass
class RunResult:
    history: List[RoundReport]
    global_bank: PromptBank
    ood_bank: PromptBank
    states: List[ClientState]
    shards: List[ClientShard]
    encoder: FrozenEncoder
    missing_classes: list = field(default_factory=list)

    @property
    def final(self) -> Optional[RoundReport]:
        done = [r for r in self.history if r.evaluated]
        return done[-1] if done else None


def sample_participants(K: int, fraction: float, rng) -> list:
    """``ceil(fraction * K)`` distinct client ids, sorted."""
    if not 0 < fraction <= 1:
        raise ValueError("participation fraction out of (0, 1]")
    n = min(K, math.ceil(fraction * K - 1e-12))
    if n == K:
        return list(range(K))
    return sorted(int(i) for i in rng.choice(K, size=n, replace=False))


def make_shards(cfg: RunConfig, dataset: EmbeddingDataset) -> List[ClientShard]:
    rng = derive_rng(cfg.seed, "partition")
    y = dataset.id_train_y
    if cfg.partition == "dirichlet":
        parts = partition_dirichlet(y, cfg.num_clients, cfg.dirichlet_alpha, rng)
    else:
        parts = partition_pathological(y, cfg.num_clients, cfg.classes_per_client,
                                       cfg.overlap, rng, dataset.num_classes)
    shards = []
    for k, idx in enumerate(parts):
        if len(idx) == 0:
            raise ValueError(f"partition left client {k} without samples")
        shards.append(ClientShard(k, dataset.id_train_x[idx], y[idx], dataset.num_classes))
    return shards


def init_banks(cfg: RunConfig, dataset: EmbeddingDataset, enc: FrozenEncoder):
    """Random global bank, ID-distant OOD bank, one random local bank per client."""
    C, d_ctx = cfg.num_classes, cfg.context_dim
    id_names = enc.names_from_embeddings(dataset.class_name_embeddings)
    rng = derive_rng(cfg.seed, "init")
    glob = PromptBank(Role.GLOBAL_ID, INIT_SCALE * rng.standard_normal((C, d_ctx)), id_names)
    pool = dataset.candidate_pool
    ood = init_ood_prompts(pool, dataset.class_name_embeddings, OOD_PERCENTILE,
                           cfg.num_ood_prompts, INIT_SCALE * rng.standard_normal(d_ctx),
                           names=enc.names_from_embeddings(pool))
    locals_ = []
    for k in range(cfg.num_clients):
        r = derive_rng(cfg.seed, f"client/{k}/init")
        locals_.append(PromptBank(Role.LOCAL, INIT_SCALE * r.standard_normal((C, d_ctx)), id_names))
    return glob, ood, locals_


def _check_dataset(cfg: RunConfig, dataset: EmbeddingDataset):
    if dataset.num_classes != cfg.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, config {cfg.num_classes}")
    if dataset.dim != cfg.embedding_dim:
        raise ValueError(f"dataset dim {dataset.dim} != run.embedding_dim {cfg.embedding_dim}")
    if len(dataset.candidate_pool) < cfg.num_ood_prompts:
        raise ValueError("candidate pool smaller than run.num_ood_prompts")
    if len(dataset.id_train_y) == 0 or len(dataset.id_test_y) == 0:
        raise ValueError("empty ID train or test split")


def evaluate(states, shards, global_bank, cfg: RunConfig, dataset: EmbeddingDataset,
             enc: FrozenEncoder) -> dict:
    """Count-weighted client accuracy on ID and ID-C; MCM AUROC / FPR95 of the global bank.

    Each client is tested on a slice of the test split whose class mix
    follows its own training counts.
    """
    counts = np.stack([s.class_counts for s in shards])
    tau, rho = cfg.temperature, cfg.fusion
    correct = correct_c = total = 0
    for split_x, split_y, key in ((dataset.id_test_x, dataset.id_test_y, "id"),
                                  (dataset.idc_test_x, dataset.idc_test_y, "idc")):
        parts = split_by_class_share(split_y, counts)
        for state, idx in zip(states, parts):
            if len(idx) == 0:
                continue
            hits = int(np.sum(predict(split_x[idx], state, enc, tau, rho) == split_y[idx]))
            if key == "id":
                correct += hits
                total += len(idx)
            else:
                correct_c += hits
    out = {"acc": correct / total if total else 0.0,
           "cacc": correct_c / total if total else 0.0}
    s_id = mcm_score(dataset.id_test_x, global_bank, enc, tau)
    if len(dataset.ood_test_x):
        s_ood = mcm_score(dataset.ood_test_x, global_bank, enc, tau)
        out["auroc"] = auroc(s_id, s_ood)
        out["fpr95"] = fpr_at_tpr(s_id, s_ood, 0.95)
    else:
        out["auroc"] = out["fpr95"] = None
    return out


def _local_job(args):
    k, t, state, shard, enc, cfg = args
    rng = derive_rng(cfg.seed, f"client/{k}/round/{t}")
    return local_train(state, shard, enc, cfg, rng)


def run(cfg: RunConfig, dataset: EmbeddingDataset, enc: Optional[FrozenEncoder] = None,
        threads: int = 1, on_round: Optional[Callable[[RoundReport], None]] = None) -> RunResult:
    """Train for ``cfg.rounds`` rounds and return the history and final banks."""
    validate_config(cfg)
    _check_dataset(cfg, dataset)
    if enc is None:
        enc = FrozenEncoder.random(cfg.embedding_dim, cfg.context_dim,
                                   derive_rng(cfg.seed, "encoder"))
    shards = make_shards(cfg, dataset)
    glob, ood, local_banks = init_banks(cfg, dataset, enc)
    # local banks are handed out once, before the first round
    states = [ClientState(b) for b in local_banks]
    history: List[RoundReport] = []
    missing_log = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for t in range(cfg.rounds):
            start = time.perf_counter()
            ids = sample_participants(cfg.num_clients, cfg.participation_fraction,
                                      derive_rng(cfg.seed, f"round/{t}/participants"))
            for k in ids:
                states[k].stage(glob, ood)
            jobs = [(k, t, states[k], shards[k], enc, cfg) for k in ids]
            results = list(pool.map(_local_job, jobs)) if pool else [_local_job(j) for j in jobs]
            outcome = server_round([r[0] for r in results], [r[1] for r in results],
                                   np.stack([shards[k].class_counts for k in ids]), glob, cfg)
            glob, ood = outcome.new_global, outcome.new_ood
            if outcome.missing_classes:
                missing_log.append((t, outcome.missing_classes))
            loss = float(np.mean([r[2].mean_loss for r in results]))
            metrics = {}
            if (t + 1) % cfg.eval_stride == 0 or t == cfg.rounds - 1:
                # clients see the new global bank when predicting
                eval_states = [ClientState(s.local_bank, glob, ood) for s in states]
                metrics = evaluate(eval_states, shards, glob, cfg, dataset, enc)
            report = RoundReport(t, tuple(ids), loss, seconds=time.perf_counter() - start,
                                 **metrics)
            history.append(report)
            if on_round:
                on_round(report)
    finally:
        if pool:
            pool.shutdown()
    return RunResult(history, glob, ood, states, shards, enc, missing_log)


def print_report(r: RoundReport, stream=None) -> None:
    stream = stream or sys.stdout
    if r.evaluated:
        stream.write(f"round {r.round}: acc={r.acc:.4f} cacc={r.cacc:.4f} "
                     f"auroc={r.auroc:.4f} fpr95={r.fpr95:.4f}\n")
    else:
        stream.write(f"round {r.round}: loss={r.train_loss:.4f}\n")
    stream.flush()
