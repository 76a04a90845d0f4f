"""Synthetic embedding benchmarks, non-IID partitions, OOD-prompt initialisation and EMBDS I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .core import PromptBank, Role

SPLITS = ("train", "test", "idc", "ood", "name", "cand")


@dataclass(eq=False)
class EmbeddingDataset:
    """Labelled embedding splits; OOD samples carry label -1."""

    id_train_x: np.ndarray
    id_train_y: np.ndarray
    id_test_x: np.ndarray
    id_test_y: np.ndarray
    idc_test_x: np.ndarray
    idc_test_y: np.ndarray
    ood_test_x: np.ndarray
    class_name_embeddings: np.ndarray
    candidate_pool: np.ndarray
    num_ood_classes: int = 0

    def __post_init__(self):
        d = self.class_name_embeddings.shape[1]
        C = self.num_classes
        for name in ("id_train_x", "id_test_x", "idc_test_x", "ood_test_x", "candidate_pool"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1, d)
            setattr(self, name, arr)
        for name in ("id_train_y", "id_test_y", "idc_test_y"):
            arr = np.asarray(getattr(self, name), dtype=np.int64).ravel()
            if arr.size and (arr.min() < 0 or arr.max() >= C):
                raise ValueError(f"{name} labels outside [0, {C})")
            setattr(self, name, arr)
        if len(self.id_train_x) != len(self.id_train_y) or len(self.id_test_x) != len(self.id_test_y) \
                or len(self.idc_test_x) != len(self.idc_test_y):
            raise ValueError("sample/label counts differ")

    @property
    def num_classes(self) -> int:
        return self.class_name_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.class_name_embeddings.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingDataset):
            return NotImplemented
        names = ("id_train_x", "id_train_y", "id_test_x", "id_test_y", "idc_test_x",
                 "idc_test_y", "ood_test_x", "class_name_embeddings", "candidate_pool")
        return self.num_ood_classes == other.num_ood_classes and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in names)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _draw_centers(n, d, rng, existing, max_cos, budget):
    centers = list(existing)
    out = []
    draws = 0
    while len(out) < n:
        if draws >= budget:
            raise RuntimeError(f"could not place {n} centers with pairwise cosine < {max_cos}")
        draws += 1
        c = _unit(rng.standard_normal(d))
        if all(c @ o < max_cos for o in centers):
            centers.append(c)
            out.append(c)
    return np.array(out).reshape(n, d)


def gen_synthetic(num_classes: int, num_ood_classes: int, dim: int, rng,
                  train_per_class: int = 40, test_per_class: int = 20,
                  ood_per_class: int = 40, shift_magnitude: float = 0.5,
                  noise: float = 0.1, name_noise: float = 0.3,
                  pool_size: int = 40, max_cos: float = 0.9) -> EmbeddingDataset:
    """Gaussian clusters on the unit sphere standing in for frozen image features.

    Class-name embeddings are noisy copies of the class centres; the
    candidate pool holds the OOD classes' name vectors plus random
    distractors, shuffled.
    """
    if min(num_classes, dim, train_per_class, test_per_class) < 1 or num_ood_classes < 0:
        raise ValueError("sizes must be positive")
    if pool_size < num_ood_classes:
        raise ValueError("pool_size must cover the OOD classes")
    budget = 10 * num_classes * max(pool_size, 1)
    id_centers = _draw_centers(num_classes, dim, rng, [], max_cos, budget)
    ood_centers = _draw_centers(num_ood_classes, dim, rng, list(id_centers), max_cos, budget)

    def cloud(centers, per):
        labels = np.repeat(np.arange(len(centers)), per)
        x = centers[labels] + noise * rng.standard_normal((len(labels), dim))
        return _unit(x), labels

    train_x, train_y = cloud(id_centers, train_per_class)
    test_x, test_y = cloud(id_centers, test_per_class)
    if shift_magnitude > 0:
        kick = _unit(rng.standard_normal(test_x.shape)) * shift_magnitude
        idc_x = _unit(test_x + kick)
    else:
        idc_x = test_x.copy()
    if num_ood_classes:
        ood_x, _ = cloud(ood_centers, ood_per_class)
    else:
        ood_x = np.empty((0, dim))

    names = _unit(id_centers + name_noise * rng.standard_normal(id_centers.shape))
    ood_names = _unit(ood_centers + name_noise * rng.standard_normal(ood_centers.shape)) \
        if num_ood_classes else np.empty((0, dim))
    distractors = _unit(rng.standard_normal((pool_size - num_ood_classes, dim)))
    pool = np.concatenate([ood_names, distractors])[rng.permutation(pool_size)]
    return EmbeddingDataset(train_x, train_y, test_x, test_y, idc_x, test_y.copy(),
                            ood_x, names, pool, num_ood_classes)


# -- partitions -------------------------------------------------------------

def _repair_empty(parts: List[list]) -> List[list]:
    while True:
        empty = [k for k, p in enumerate(parts) if not p]
        if not empty:
            return parts
        largest = max(range(len(parts)), key=lambda k: (len(parts[k]), -k))
        if len(parts[largest]) <= 1:
            return parts
        parts[empty[0]].append(parts[largest].pop())


def partition_dirichlet(labels, num_clients: int, alpha: float, rng) -> List[np.ndarray]:
    """Per-class Dirichlet(alpha) shares; empty clients take one sample from the largest."""
    if alpha <= 0 or num_clients < 1:
        raise ValueError("need alpha > 0 and num_clients >= 1")
    labels = np.asarray(labels)
    parts: List[list] = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        props = rng.dirichlet(np.full(num_clients, alpha))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
        for k, chunk in enumerate(np.split(idx, cuts)):
            parts[k].extend(chunk.tolist())
    parts = _repair_empty(parts)
    return [np.sort(np.array(p, dtype=np.int64)) for p in parts]


def partition_pathological(labels, num_clients: int, classes_per_client: int,
                           overlap: bool, rng, num_classes: Optional[int] = None
                           ) -> List[np.ndarray]:
    """Each client owns a fixed class subset; a class's samples are split evenly among owners.

    Disjoint mode deals a shuffled class list out in blocks; classes left
    over when ``K * cpc < C`` go round-robin so every sample is still
    assigned. Overlap mode draws each client's set independently; classes
    nobody drew go to client ``c mod K``.
    """
    labels = np.asarray(labels)
    C = int(num_classes if num_classes is not None else labels.max() + 1)
    K, cpc = num_clients, classes_per_client
    if cpc < 1 or K < 1:
        raise ValueError("need classes_per_client >= 1 and num_clients >= 1")
    owners: List[List[int]] = [[] for _ in range(C)]
    if not overlap:
        if K * cpc > C:
            raise ValueError(f"non-overlap needs K*cpc <= C ({K}*{cpc} > {C})")
        order = rng.permutation(C)
        for pos, c in enumerate(order):
            k = pos // cpc if pos < K * cpc else (pos - K * cpc) % K
            owners[c].append(k)
    else:
        if cpc > C:
            raise ValueError("classes_per_client exceeds number of classes")
        for k in range(K):
            for c in rng.choice(C, size=cpc, replace=False):
                owners[c].append(k)
        for c in range(C):
            if not owners[c]:
                owners[c].append(c % K)
    parts: List[list] = [[] for _ in range(K)]
    for c in range(C):
        idx = rng.permutation(np.flatnonzero(labels == c))
        ks = sorted(owners[c])
        for k, chunk in zip(ks, np.array_split(idx, len(ks))):
            parts[k].extend(chunk.tolist())
    return [np.sort(np.array(p, dtype=np.int64)) for p in parts]


def client_class_sets(labels, parts) -> List[set]:
    labels = np.asarray(labels)
    return [set(np.unique(labels[p]).tolist()) for p in parts]


def label_entropy(labels, parts, num_classes: int) -> float:
    """Mean Shannon entropy (nats) of the per-client label distributions."""
    labels = np.asarray(labels)
    out = []
    for p in parts:
        if len(p) == 0:
            continue
        q = np.bincount(labels[p], minlength=num_classes) / len(p)
        q = q[q > 0]
        out.append(float(-(q * np.log(q)).sum()))
    return float(np.mean(out))


def split_by_class_share(labels, counts: np.ndarray) -> List[np.ndarray]:
    """Deal each class's indices to clients in proportion to ``counts[k, c]``.

    Used to give every client a test set shaped like its training labels.
    Classes nobody trained on are dropped.
    """
    labels = np.asarray(labels)
    K = counts.shape[0]
    parts: List[list] = [[] for _ in range(K)]
    for c in range(counts.shape[1]):
        total = counts[:, c].sum()
        if total == 0:
            continue
        idx = np.flatnonzero(labels == c)
        bounds = np.rint(np.cumsum(counts[:, c]) / total * len(idx)).astype(int)
        start = 0
        for k in range(K):
            parts[k].extend(idx[start:bounds[k]].tolist())
            start = bounds[k]
    return [np.array(sorted(p), dtype=np.int64) for p in parts]


# -- OOD prompt initialisation -----------------------------------------------

def ood_candidate_distances(candidate_pool, id_embeddings, eta: float) -> np.ndarray:
    """eta-percentile (linear interpolation) of negative cosines to the ID classes."""
    if not 0 <= eta <= 1:
        raise ValueError("percentile must be in [0, 1]")
    cand = _unit(np.atleast_2d(np.asarray(candidate_pool, dtype=np.float64)))
    ids = _unit(np.atleast_2d(np.asarray(id_embeddings, dtype=np.float64)))
    neg_cos = -(cand @ ids.T)
    return np.quantile(neg_cos, eta, axis=1, method="linear")


def select_ood_candidates(candidate_pool, id_embeddings, eta: float, n_prompts: int) -> np.ndarray:
    """Indices of the ``n_prompts`` largest distances; ties go to the lower index."""
    d = ood_candidate_distances(candidate_pool, id_embeddings, eta)
    if n_prompts > d.size:
        raise ValueError(f"candidate pool of {d.size} is smaller than {n_prompts}")
    order = np.lexsort((np.arange(d.size), -d))
    return order[:n_prompts]


def init_ood_prompts(candidate_pool, id_embeddings, eta: float, n_prompts: int,
                     base_context, names=None) -> PromptBank:
    """OOD bank from the most ID-distant candidates.

    ``names`` optionally gives the class-name vectors to store for each
    candidate (for instance after mapping to context space); it defaults to
    the candidates themselves. ``base_context`` is one context vector or one
    per selected prompt.
    """
    pool = np.atleast_2d(np.asarray(candidate_pool, dtype=np.float64))
    idx = select_ood_candidates(pool, id_embeddings, eta, n_prompts)
    name_vecs = pool if names is None else np.atleast_2d(names)
    chosen = name_vecs[idx]
    ctx = np.broadcast_to(np.asarray(base_context, dtype=np.float64), chosen.shape)
    return PromptBank(Role.OOD, ctx, chosen)


# -- EMBDS text format ---------------------------------------------------------

class DatasetFormatError(ValueError):
    pass


def _fmt(v) -> str:
    return ",".join(format(float(x), ".17g") for x in v)


def write_dataset(ds: EmbeddingDataset, path) -> None:
    lines = ["EMBDS v1", f"dims {ds.num_classes} {ds.num_ood_classes} {ds.dim}"]
    rows = [("train", ds.id_train_x, ds.id_train_y), ("test", ds.id_test_x, ds.id_test_y),
            ("idc", ds.idc_test_x, ds.idc_test_y),
            ("ood", ds.ood_test_x, np.full(len(ds.ood_test_x), -1)),
            ("name", ds.class_name_embeddings, np.arange(ds.num_classes)),
            ("cand", ds.candidate_pool, np.full(len(ds.candidate_pool), -1))]
    for split, X, y in rows:
        lines.extend(f"{split} {int(label)} {_fmt(x)}" for x, label in zip(X, y))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path) -> EmbeddingDataset:
    text = Path(path).read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].strip() != "EMBDS v1":
        raise DatasetFormatError("line 1: missing 'EMBDS v1' header")
    if len(lines) < 2:
        raise DatasetFormatError("line 2: missing dims line")
    head = lines[1].split()
    try:
        if len(head) != 4 or head[0] != "dims":
            raise ValueError
        C, U, d = (int(t) for t in head[1:])
    except ValueError:
        raise DatasetFormatError("line 2: expected 'dims C U_ood d'") from None
    buckets = {s: ([], []) for s in SPLITS}
    for lineno, line in enumerate(lines[2:], 3):
        parts = line.split()
        if len(parts) != 3 or parts[0] not in buckets:
            raise DatasetFormatError(f"line {lineno}: malformed record")
        try:
            label = int(parts[1])
            vec = [float(t) for t in parts[2].split(",")]
        except ValueError:
            raise DatasetFormatError(f"line {lineno}: malformed number") from None
        if len(vec) != d:
            raise DatasetFormatError(f"line {lineno}: expected {d} values, got {len(vec)}")
        if not all(math.isfinite(v) for v in vec):
            raise DatasetFormatError(f"line {lineno}: non-finite value")
        buckets[parts[0]][0].append(vec)
        buckets[parts[0]][1].append(label)

    def arr(split):
        xs = buckets[split][0]
        return np.array(xs, dtype=np.float64).reshape(len(xs), d)

    names_y = buckets["name"][1]
    if len(names_y) != C or sorted(names_y) != list(range(C)):
        raise DatasetFormatError(f"expected {C} name records labelled 0..{C - 1}")
    names = arr("name")[np.argsort(names_y, kind="stable")]
    if any(l != -1 for l in buckets["ood"][1]):
        raise DatasetFormatError("ood records must carry label -1")
    try:
        return EmbeddingDataset(arr("train"), buckets["train"][1], arr("test"), buckets["test"][1],
                                arr("idc"), buckets["idc"][1], arr("ood"), names, arr("cand"), U)
    except ValueError as exc:
        raise DatasetFormatError(str(exc)) from None
