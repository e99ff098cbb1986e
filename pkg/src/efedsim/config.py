"""Experiment configuration: line-oriented `section.key = value` text.

The format stays dependency-free and diff-friendly on purpose: one
assignment per line, `#` comments, no nesting. Every key has a documented
default (the desk-scale model), unknown keys are rejected by name, and
syntax errors carry their line number.

`canonical_dump` renders the effective configuration with all keys in
sorted order; its hash is the reproducibility digest stamped on every
report. The digest deliberately skips `verify.n_workers`: worker count is
a parallelism knob whose bit-exact result invariance is a tested contract,
so it cannot determine an outcome.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .federation import CompressionSpec, ServerBehavior
from .softmax_verify import BaseBConfig
from .transformer import ModelConfig, PartitionPlan
from .trust import VerifierConfig

__all__ = [
    "ConfigError",
    "TopologyConfig",
    "ExperimentConfig",
    "parse_config",
    "parse_config_text",
    "canonical_dump",
    "config_digest",
]


class ConfigError(ValueError):
    """Unreadable, unparsable, or invalid configuration."""


@dataclass(frozen=True)
class TopologyConfig:
    n_servers: int = 2
    split: tuple | None = None  # explicit layer counts, else even split
    behaviors: tuple = (ServerBehavior(),)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = ModelConfig(d_model=32, n_heads=4, n_layers=4, d_ff=64,
                                     vocab_size=101, max_seq_len=64)
    topology: TopologyConfig = TopologyConfig()
    trust: VerifierConfig = VerifierConfig()
    compression: CompressionSpec | None = None
    verify: BaseBConfig = BaseBConfig()
    n_workers: int = 1
    seed: int = 0

    def plan(self) -> PartitionPlan:
        if self.topology.split is not None:
            return PartitionPlan.from_counts(self.topology.split)
        return PartitionPlan.even(self.model.n_layers, self.topology.n_servers)

    def behaviors(self) -> list:
        b = self.topology.behaviors
        if len(b) == 1:
            return [b[0]] * self.topology.n_servers
        return list(b)


_DEFAULTS = ExperimentConfig()

_KNOWN_KEYS = {
    "model.d_model", "model.n_heads", "model.n_layers", "model.d_ff",
    "model.vocab", "model.seq_len",
    "topology.n_servers", "topology.split", "topology.behaviors",
    "trust.theta", "trust.tau", "trust.probe_count", "trust.w",
    "compression.mode", "compression.value",
    "verify.b", "verify.k", "verify.f", "verify.n_workers",
    "seed",
}


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc


def _parse_behavior(key: str, raw: str) -> ServerBehavior:
    raw = raw.strip()
    if raw.startswith("noisy"):
        if ":" not in raw:
            raise ConfigError(f"{key}: noisy behavior needs a scale, e.g. noisy:0.5")
        _, sig = raw.split(":", 1)
        try:
            return ServerBehavior(mode="noisy", sigma=_parse_float(key, sig))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    try:
        return ServerBehavior(mode=raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate configuration text; omitted keys take defaults."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        if not raw:
            raise ConfigError(f"{source}:{lineno}: empty value for {key!r}")
        values[key] = raw

    def take_int(key, default):
        return _parse_int(key, values[key]) if key in values else default

    def take_float(key, default):
        return _parse_float(key, values[key]) if key in values else default

    d = _DEFAULTS
    try:
        model = ModelConfig(
            d_model=take_int("model.d_model", d.model.d_model),
            n_heads=take_int("model.n_heads", d.model.n_heads),
            n_layers=take_int("model.n_layers", d.model.n_layers),
            d_ff=take_int("model.d_ff", d.model.d_ff),
            vocab_size=take_int("model.vocab", d.model.vocab_size),
            max_seq_len=take_int("model.seq_len", d.model.max_seq_len),
        )
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc

    n_servers = take_int("topology.n_servers", d.topology.n_servers)
    if n_servers < 1:
        raise ConfigError(f"topology.n_servers: must be >= 1, got {n_servers}")
    if n_servers > model.n_layers:
        raise ConfigError(
            f"topology.n_servers: {n_servers} servers cannot split "
            f"{model.n_layers} layers"
        )
    split = None
    if "topology.split" in values:
        split = tuple(
            _parse_int("topology.split", part)
            for part in values["topology.split"].split(",")
        )
        if len(split) != n_servers:
            raise ConfigError(
                f"topology.split: {len(split)} counts for {n_servers} servers"
            )
        if any(c < 1 for c in split):
            raise ConfigError("topology.split: every count must be >= 1")
        if sum(split) != model.n_layers:
            raise ConfigError(
                f"topology.split: counts sum to {sum(split)}, model has "
                f"{model.n_layers} layers"
            )
    behaviors = d.topology.behaviors
    if "topology.behaviors" in values:
        behaviors = tuple(
            _parse_behavior("topology.behaviors", part)
            for part in values["topology.behaviors"].split(",")
        )
        if len(behaviors) not in (1, n_servers):
            raise ConfigError(
                f"topology.behaviors: need 1 or {n_servers} entries, "
                f"got {len(behaviors)}"
            )
    topology = TopologyConfig(n_servers=n_servers, split=split, behaviors=behaviors)

    theta = take_float("trust.theta", d.trust.theta)
    if not 0.0 <= theta <= 1.0:
        raise ConfigError(f"trust.theta: must lie in [0, 1], got {theta}")
    tau = take_float("trust.tau", d.trust.tau)
    if tau <= 0:
        raise ConfigError(f"trust.tau: must be positive, got {tau}")
    probe_count = take_int("trust.probe_count", d.trust.probe_count)
    if probe_count < 1:
        raise ConfigError(f"trust.probe_count: must be >= 1, got {probe_count}")
    weight = take_float("trust.w", d.trust.weight)
    if not 0.0 < weight <= 1.0:
        raise ConfigError(f"trust.w: must lie in (0, 1], got {weight}")
    trust = VerifierConfig(theta=theta, probe_count=probe_count, tau=tau,
                           weight=weight)

    mode = values.get("compression.mode", "none")
    if mode == "none":
        compression = None
        if "compression.value" in values:
            raise ConfigError(
                "compression.value: set compression.mode to energy or ratio first"
            )
    elif mode in ("energy", "ratio"):
        if "compression.value" not in values:
            raise ConfigError(f"compression.value: required for mode {mode!r}")
        value = _parse_float("compression.value", values["compression.value"])
        if not 0.0 < value <= 1.0:
            raise ConfigError(f"compression.value: must lie in (0, 1], got {value}")
        compression = CompressionSpec(mode=mode, value=value)
    else:
        raise ConfigError(
            f"compression.mode: expected none, energy, or ratio, got {mode!r}"
        )

    b = take_int("verify.b", d.verify.base)
    k = take_int("verify.k", d.verify.n_digits)
    f = take_int("verify.f", d.verify.frac_bits)
    try:
        verify = BaseBConfig(base=b, n_digits=k, frac_bits=f)
    except ValueError as exc:
        raise ConfigError(f"verify: {exc}") from exc
    n_workers = take_int("verify.n_workers", d.n_workers)
    if n_workers < 1:
        raise ConfigError(f"verify.n_workers: must be >= 1, got {n_workers}")

    seed = take_int("seed", d.seed)

    cfg = ExperimentConfig(model=model, topology=topology, trust=trust,
                           compression=compression, verify=verify,
                           n_workers=n_workers, seed=seed)
    cfg.plan()  # validates split coverage
    return cfg


def parse_config(path) -> ExperimentConfig:
    """Read and parse a config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))


def canonical_dump(cfg: ExperimentConfig) -> str:
    """Effective configuration, every key present, sorted, one per line."""
    behaviors = ",".join(str(b) for b in cfg.behaviors())
    split = ",".join(str(c) for c in cfg.plan().layer_counts())
    comp_mode = cfg.compression.mode if cfg.compression else "none"
    comp_value = cfg.compression.value if cfg.compression else 0.0
    pairs = {
        "compression.mode": comp_mode,
        "compression.value": f"{comp_value:g}",
        "model.d_ff": cfg.model.d_ff,
        "model.d_model": cfg.model.d_model,
        "model.n_heads": cfg.model.n_heads,
        "model.n_layers": cfg.model.n_layers,
        "model.seq_len": cfg.model.max_seq_len,
        "model.vocab": cfg.model.vocab_size,
        "seed": cfg.seed,
        "topology.behaviors": behaviors,
        "topology.n_servers": cfg.topology.n_servers,
        "topology.split": split,
        "trust.probe_count": cfg.trust.probe_count,
        "trust.tau": f"{cfg.trust.tau:g}",
        "trust.theta": f"{cfg.trust.theta:g}",
        "trust.w": f"{cfg.trust.weight:g}",
        "verify.b": cfg.verify.base,
        "verify.f": cfg.verify.frac_bits,
        "verify.k": cfg.verify.n_digits,
        "verify.n_workers": cfg.n_workers,
    }
    return "\n".join(f"{key} = {pairs[key]}" for key in sorted(pairs)) + "\n"


def config_digest(cfg: ExperimentConfig) -> str:
    """sha256 of the canonical dump, minus result-invariant parallelism keys."""
    lines = [
        line for line in canonical_dump(cfg).splitlines()
        if not line.startswith("verify.n_workers")
    ]
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()
