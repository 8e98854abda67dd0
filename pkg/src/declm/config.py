"""Flat key=value run configuration with exact round-tripping.

Unknown keys are rejected; missing keys fall back to the documented
defaults; `dump` emits every field so configs diff cleanly across
experiment grids. '#' starts a comment line.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .data import SplitSizes, SyntheticTaskSpec
from .errors import ConfigError


@dataclass
class RunConfig:
    data_dir: str = "."
    seed: int = 1
    arch: str = "A2"
    strategy: str = "none"
    alpha: float = 0.0
    enc_units: int = 24
    enc_layers: int = 2
    emb_dim: int = 16
    dec_units: int = 48
    att_dim: int = 24
    att_filters: int = 4
    att_kernel: int = 5
    batch_size: int = 16
    text_batch_size: int = 96
    sort_window: int = 128
    rho: float = 0.95
    eps: float = 1e-6
    clip_norm: float = 5.0
    epochs: int = 15
    patience: int = 3
    beam: int = 8
    beta: float = 0.3
    max_len_ratio: float = 2.0
    length_norm: bool = False
    coverage_penalty: float = 0.0
    lm_emb_dim: int = 16
    lm_units: int = 48
    lm_epochs: int = 10
    lm_batch_size: int = 96

    def validate(self) -> None:
        if self.arch not in ("A1", "A2"):
            raise ConfigError(f"arch must be A1 or A2, got {self.arch!r}")
        if self.strategy not in ("none", "1", "2"):
            raise ConfigError(f"strategy must be none, 1 or 2, got {self.strategy!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("enc_units", "enc_layers", "emb_dim", "dec_units", "att_dim",
                     "att_filters", "batch_size", "text_batch_size", "sort_window",
                     "beam", "lm_emb_dim", "lm_units", "lm_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.att_kernel % 2 == 0:
            raise ConfigError(f"att_kernel must be odd, got {self.att_kernel}")
        if self.beta < 0.0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.epochs < 0 or self.lm_epochs < 0 or self.patience < 0:
            raise ConfigError("epochs and patience must be >= 0")


def _parse_value(key: str, raw: str, target_type) -> object:
    try:
        if target_type is bool:
            if raw not in ("true", "false"):
                raise ValueError(raw)
            return raw == "true"
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_kv(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, value = stripped.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def _fill_dataclass(cls, pairs: dict[str, str], consumed: set[str]):
    kwargs = {}
    types = {f.name: f.type for f in fields(cls)}
    defaults = cls()
    for name in types:
        if name in pairs:
            consumed.add(name)
            kwargs[name] = _parse_value(name, pairs[name],
                                        type(getattr(defaults, name)))
    return cls(**kwargs)


def parse_run_config(text: str) -> RunConfig:
    pairs = parse_kv(text)
    consumed: set[str] = set()
    cfg = _fill_dataclass(RunConfig, pairs, consumed)
    unknown = set(pairs) - consumed
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg.validate()
    return cfg


def dump_run_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in asdict(cfg).items())


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_run_config(fh.read())


def parse_task_spec(text: str) -> tuple[SyntheticTaskSpec, SplitSizes]:
    pairs = parse_kv(text)
    consumed: set[str] = set()
    size_keys = {"p_size": "p", "t_size": "t", "val_size": "val", "test_size": "test"}
    size_kwargs = {}
    for key, attr in size_keys.items():
        if key in pairs:
            consumed.add(key)
            size_kwargs[attr] = _parse_value(key, pairs[key], int)
    spec = _fill_dataclass(SyntheticTaskSpec, pairs, consumed)
    unknown = set(pairs) - consumed
    if unknown:
        raise ConfigError(f"unknown task spec keys: {', '.join(sorted(unknown))}")
    sizes = SplitSizes(**size_kwargs)
    spec.validate()
    sizes.validate()
    return spec, sizes


def dump_task_spec(spec: SyntheticTaskSpec, sizes: SplitSizes) -> str:
    parts = [f"{k} = {_format_value(v)}\n" for k, v in asdict(spec).items()]
    parts += [f"{k}_size = {getattr(sizes, a)}\n"
              for k, a in (("p", "p"), ("t", "t"), ("val", "val"), ("test", "test"))]
    return "".join(parts)


def load_task_spec(path) -> tuple[SyntheticTaskSpec, SplitSizes]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_task_spec(fh.read())
