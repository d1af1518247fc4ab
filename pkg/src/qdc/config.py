"""Run configuration and the single-root-seed derivation scheme.

Every random draw in the package flows from config.seed through
seed_chain(root, *tags), so one knob reproduces a full run.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .datagen import StreamSpec
from .encoder import DEFAULT_DIM, DEFAULT_TAU, DEFAULT_VOCAB, fnv1a64
from .errors import ConfigError

METHODS = (
    "FT",
    "FT+KD",
    "FT+QDC",
    "FT+KD+QDC",
    "FT+REINDEX",
    "FT+KD+REINDEX",
)


def parse_method(method: str) -> tuple[bool, str]:
    """Split a method name into (kd flag, retrieval strategy)."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    kd = "+KD" in method
    if method.endswith("+QDC"):
        return kd, "qdc"
    if method.endswith("+REINDEX"):
        return kd, "reindex"
    return kd, "plain"


def seed_chain(root: int, *tags) -> list[int]:
    """Fold a root seed and purpose tags into a seed-sequence entropy list."""
    if root < 0:
        raise ConfigError("seed must be non-negative")
    parts = [int(root)]
    for tag in tags:
        if isinstance(tag, str):
            parts.append(fnv1a64(tag.encode("utf-8")))
        else:
            parts.append(int(tag))
    return parts


def derive_rng(root: int, *tags) -> np.random.Generator:
    return np.random.default_rng(seed_chain(root, *tags))


def derive_seed(root: int, *tags) -> int:
    """A single integer seed for components that take one (e.g. k-means)."""
    state = np.random.SeedSequence(seed_chain(root, *tags)).generate_state(
        1, np.uint64
    )
    return int(state[0])


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    dim: int = DEFAULT_DIM
    vocab_size: int = DEFAULT_VOCAB
    temperature: float = DEFAULT_TAU
    lr: float = 0.5
    wd: float = 0.01
    batch_size: int = 128
    epochs: int = 1
    hard_negatives: int = 7
    k: int = 10
    multi_k: int = 1
    method: str = "FT+QDC"
    drift_query_cap: int = 10000
    out_dir: str = "out"
    run_id: str | None = None
    stream: StreamSpec = field(default_factory=StreamSpec)
    datasets: tuple[dict, ...] | None = None

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.dim < 1 or self.vocab_size < 1:
            raise ConfigError("dim and vocab_size must be >= 1")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.lr < 0 or self.wd < 0:
            raise ConfigError("lr and wd must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.hard_negatives < 0:
            raise ConfigError("hard_negatives must be >= 0")
        if self.k < 1 or self.multi_k < 1:
            raise ConfigError("k and multi_k must be >= 1")
        if self.drift_query_cap < 1:
            raise ConfigError("drift_query_cap must be >= 1")


def config_to_dict(config: RunConfig) -> dict:
    payload = asdict(config)
    payload["stream"] = asdict(config.stream)
    payload["stream"]["doc_len_range"] = list(config.stream.doc_len_range)
    payload["stream"]["query_len_range"] = list(config.stream.query_len_range)
    if config.datasets is not None:
        payload["datasets"] = [dict(d) for d in config.datasets]
    return payload


def config_from_dict(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config must be a JSON object")
    payload = dict(payload)
    stream_payload = payload.pop("stream", None)
    datasets = payload.pop("datasets", None)

    known = {f.name for f in fields(RunConfig)} - {"stream", "datasets"}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    stream = StreamSpec()
    if stream_payload is not None:
        if not isinstance(stream_payload, dict):
            raise ConfigError("stream must be a JSON object")
        stream_known = {f.name for f in fields(StreamSpec)}
        stream_unknown = set(stream_payload) - stream_known
        if stream_unknown:
            raise ConfigError(f"unknown stream keys: {sorted(stream_unknown)}")
        stream_payload = dict(stream_payload)
        for key in ("doc_len_range", "query_len_range"):
            if key in stream_payload:
                lo, hi = stream_payload[key]
                stream_payload[key] = (int(lo), int(hi))
        stream = StreamSpec(**stream_payload)

    if datasets is not None:
        if not isinstance(datasets, list):
            raise ConfigError("datasets must be a list of path objects")
        datasets = tuple(dict(d) for d in datasets)

    try:
        config = RunConfig(stream=stream, datasets=datasets, **payload)
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}") from exc
    config.validate()
    return config


def load_config(path) -> RunConfig:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {path}") from exc
    return config_from_dict(payload)


def save_config(config: RunConfig, path) -> None:
    text = json.dumps(config_to_dict(config), sort_keys=True, indent=2)
    Path(path).write_text(text + "\n", encoding="utf-8")


def apply_overrides(config: RunConfig, **overrides) -> RunConfig:
    """CLI flag overrides; None values mean 'keep the config value'."""
    updates = {k: v for k, v in overrides.items() if v is not None}
    if not updates:
        return config
    out = replace(config, **updates)
    out.validate()
    return out
