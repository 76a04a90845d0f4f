"""Domain types, run configuration and seeded random streams."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

RNG_ALGORITHM = "Philox4x64-10 keyed by SHA-256(seed/label)"


class ConfigError(ValueError):
    """Raised when a configuration value violates its documented range."""


class Role(str, enum.Enum):
    GLOBAL_ID = "global"
    LOCAL = "local"
    OOD = "ood"


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PromptContext:
    """One tunable context vector paired with a (fixed) class-name vector."""

    context: np.ndarray
    class_name: np.ndarray
    role: Role
    class_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "context", _frozen(self.context, 1))
        object.__setattr__(self, "class_name", _frozen(self.class_name, 1))
        object.__setattr__(self, "role", Role(self.role))
        if self.context.shape != self.class_name.shape:
            raise ValueError("context and class_name dimensions differ")
        if self.role is Role.OOD:
            if self.class_id is not None:
                raise ValueError("OOD prompts carry no class id")
        elif self.class_id is None:
            raise ValueError(f"{self.role.value} prompt requires a class id")

    def with_context(self, context) -> "PromptContext":
        return dataclasses.replace(self, context=context)

    def __eq__(self, other):
        if not isinstance(other, PromptContext):
            return NotImplemented
        return (self.role is other.role and self.class_id == other.class_id
                and np.array_equal(self.context, other.context)
                and np.array_equal(self.class_name, other.class_name))


@dataclass(frozen=True, eq=False)
class PromptBank:
    """A role-tagged set of prompts stored as stacked arrays.

    ``contexts`` and ``names`` are ``(n, d_ctx)``. ID banks (global/local) are
    indexed by class id, so ``class_ids`` is always ``0..C-1`` for them.
    """

    role: Role
    contexts: np.ndarray
    names: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "contexts", _frozen(self.contexts, 2))
        object.__setattr__(self, "names", _frozen(self.names, 2))
        if self.contexts.shape != self.names.shape:
            raise ValueError(
                f"contexts {self.contexts.shape} and names {self.names.shape} differ")

    @classmethod
    def from_prompts(cls, role, prompts: Sequence[PromptContext]) -> "PromptBank":
        role = Role(role)
        prompts = list(prompts)
        if any(p.role is not role for p in prompts):
            raise ValueError("mixed prompt roles in one bank")
        if role is not Role.OOD:
            prompts.sort(key=lambda p: p.class_id)
            ids = [p.class_id for p in prompts]
            if ids != list(range(len(prompts))):
                raise ValueError(f"ID bank needs one prompt per class 0..C-1, got {ids}")
        if not prompts:
            raise ValueError("empty bank; pass arrays of shape (0, d_ctx) instead")
        return cls(role, np.stack([p.context for p in prompts]),
                   np.stack([p.class_name for p in prompts]))

    @property
    def size(self) -> int:
        return self.contexts.shape[0]

    @property
    def context_dim(self) -> int:
        return self.contexts.shape[1]

    @property
    def class_ids(self) -> Optional[tuple]:
        return None if self.role is Role.OOD else tuple(range(self.size))

    @property
    def prompts(self) -> tuple:
        ids = self.class_ids or (None,) * self.size
        return tuple(PromptContext(c, n, self.role, i)
                     for c, n, i in zip(self.contexts, self.names, ids))

    def with_contexts(self, contexts) -> "PromptBank":
        return PromptBank(self.role, contexts, self.names)

    def __eq__(self, other):
        if not isinstance(other, PromptBank):
            return NotImplemented
        return (self.role is other.role
                and np.array_equal(self.contexts, other.contexts)
                and np.array_equal(self.names, other.names))


def validate_bank(bank: PromptBank, expected_size: int) -> PromptBank:
    """Check a bank's cardinality and per-prompt invariants by walking it."""
    if bank.size != expected_size:
        raise ValueError(f"{bank.role.value} bank has {bank.size} prompts, "
                         f"expected {expected_size}")
    for i, p in enumerate(bank.prompts):
        if p.role is not Role.OOD and p.class_id != i:
            raise ValueError(f"prompt {i} has class id {p.class_id}")
    return bank


@dataclass(frozen=True)
class BdroConfig:
    sigma: float = 0.01
    gamma: float = 0.0
    tau1: float = 1.0
    tau2: float = 1.0
    mu: float = 1.0
    steps_global: int = 1
    steps_ood: int = 1
    inner_lr: float = 0.5
    outer_lr: float = 0.5


@dataclass(frozen=True)
class SemiUotConfig:
    lam: float = 1.0
    max_iters: int = 2000
    convergence_tol: float = 1e-12
    # "pairwise", "linesearch" or "fixed" (beta = 1/(i+2), no safeguard)
    step_rule: str = "pairwise"


@dataclass(frozen=True)
class ServerConfig:
    alpha: float = 0.5
    top_m: int = 0  # 0 means ceil(0.1 * J)
    percentile: float = 1.0
    candidate_pool_size: int = 40


@dataclass(frozen=True)
class RunConfig:
    num_clients: int = 5
    participation_fraction: float = 1.0
    rounds: int = 15
    local_epochs: int = 2
    batch_size: int = 16
    num_classes: int = 10
    num_ood_prompts: int = 10
    embedding_dim: int = 32
    context_dim: int = 16
    temperature: float = 0.07
    fusion: float = 0.5
    seed: int = 42
    enable_bos: bool = True
    enable_goc: bool = True
    partition: str = "pathological"
    classes_per_client: int = 2
    overlap: bool = False
    dirichlet_alpha: float = 0.5
    eval_stride: int = 1
    bdro: BdroConfig = field(default_factory=BdroConfig)
    semiuot: SemiUotConfig = field(default_factory=SemiUotConfig)
    server: ServerConfig = field(default_factory=ServerConfig)


def _check(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def validate_config(cfg: RunConfig) -> RunConfig:
    """Return ``cfg`` unchanged, or raise :class:`ConfigError` on the first bad field."""
    _check(cfg.num_clients >= 1, "run.num_clients must be >= 1")
    _check(0 < cfg.participation_fraction <= 1,
           "run.participation_fraction out of (0,1]")
    for name in ("rounds", "local_epochs", "batch_size", "num_classes",
                 "num_ood_prompts", "embedding_dim", "context_dim"):
        # rounds and local_epochs may be 0 for dry runs
        lo = 0 if name in ("rounds", "local_epochs") else 1
        _check(getattr(cfg, name) >= lo, f"run.{name} must be >= {lo}")
    _check(cfg.temperature > 0, "run.temperature must be > 0")
    _check(0 <= cfg.fusion <= 1, "fusion out of [0,1]")
    _check(0 <= cfg.seed < 2 ** 64, "run.seed must be a 64-bit unsigned integer")
    _check(cfg.partition in ("pathological", "dirichlet"),
           "run.partition must be 'pathological' or 'dirichlet'")
    _check(cfg.classes_per_client >= 1, "run.classes_per_client must be >= 1")
    _check(cfg.dirichlet_alpha > 0, "run.dirichlet_alpha must be > 0")
    _check(cfg.eval_stride >= 1, "run.eval_stride must be >= 1")

    b = cfg.bdro
    _check(b.sigma >= 0, "bdro.sigma must be >= 0")
    _check(b.gamma >= 0, "bdro.gamma must be >= 0")
    for name in ("tau1", "tau2", "mu", "inner_lr", "outer_lr"):
        _check(getattr(b, name) > 0, f"bdro.{name} must be > 0")
    _check(b.steps_global >= 0 and b.steps_ood >= 0, "bdro steps must be >= 0")

    s = cfg.semiuot
    _check(s.lam >= 0, "semiuot.lam must be >= 0")
    _check(s.max_iters >= 1, "semiuot.max_iters must be >= 1")
    _check(s.convergence_tol > 0, "semiuot.convergence_tol must be > 0")
    _check(s.step_rule in ("pairwise", "linesearch", "fixed"),
           "semiuot.step_rule must be pairwise, linesearch or fixed")

    v = cfg.server
    _check(0 <= v.alpha <= 1, "server.alpha out of [0,1]")
    n_ood = cfg.num_clients * cfg.num_ood_prompts
    _check(0 <= v.top_m <= n_ood, f"server.top_m out of [0, K*U={n_ood}]")
    _check(0 <= v.percentile <= 1, "server.percentile out of [0,1]")
    _check(v.candidate_pool_size >= cfg.num_ood_prompts,
           "server.candidate_pool_size must be >= run.num_ood_prompts")
    return cfg


# -- flat "section.key = value" text form ----------------------------------

_SECTIONS = {"bdro": BdroConfig, "semiuot": SemiUotConfig, "server": ServerConfig}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw: str, typ):
    if typ in (bool, "bool"):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        if f.name in _SECTIONS:
            continue
        lines.append(f"run.{f.name} = {_format_value(getattr(cfg, f.name))}")
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in fields(sub):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Parse ``section.key = value`` lines on top of ``base`` (defaults if None)."""
    base = base or RunConfig()
    top = {f.name: f.type for f in fields(RunConfig) if f.name not in _SECTIONS}
    updates: dict = {}
    sub_updates: dict = {s: {} for s in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        section, _, name = key.partition(".")
        try:
            if section == "run" and name in top:
                updates[name] = _parse_value(raw, top[name])
            elif section in _SECTIONS:
                types = {f.name: f.type for f in fields(_SECTIONS[section])}
                if name not in types:
                    raise ConfigError(f"line {lineno}: unknown key {key!r}")
                sub_updates[section][name] = _parse_value(raw, types[name])
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    for section, vals in sub_updates.items():
        updates[section] = dataclasses.replace(getattr(base, section), **vals)
    return dataclasses.replace(base, **updates)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


# -- randomness -------------------------------------------------------------

def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Independent generator for ``(seed, label)``.

    The label is hashed together with the seed into a 128-bit Philox key, so
    streams for different labels share no state and are reproducible on any
    platform.
    """
    if not label:
        raise ValueError("label must be nonempty")
    digest = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))
