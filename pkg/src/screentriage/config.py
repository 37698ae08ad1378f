"""Experiment configuration.

One flat key = value text file controls a whole run. Values use literal
syntax (ints, floats, true/false, none, quoted or bare strings, bracketed
lists); unknown keys and malformed values raise ConfigError. Every command
echoes the fully resolved configuration into the output directory so a run
can be reproduced from its artifacts alone.
"""

import dataclasses
import os
import re
from dataclasses import dataclass, field

from .imaging import AugmentSpec
from .losses import FocalParams
from .mtlnet import TrainSchedule

__all__ = [
    "THREADS_ENV",
    "ConfigError",
    "ExperimentConfig",
    "parse_value",
    "parse_config_text",
    "load_config",
]

THREADS_ENV = "SCREENTRIAGE_THREADS"


class ConfigError(ValueError):
    """Bad key, bad value, or a violated invariant."""


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from e
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


@dataclass
class ExperimentConfig:
    """All knobs of one end-to-end run, flat so they map 1:1 to file keys."""

    out: str = "run"
    seed: int = 0
    threads: int = field(default_factory=_default_threads)

    # cohort + partition
    cohort_n: int = 8162
    cohort_seed: int = 0
    holdout: int = 1000
    split_fractions: tuple = (0.60, 0.15, 0.15, 0.10)
    split_seed: int = 0

    # per-view multi-task model
    mtl_hidden: tuple = (128, 64)
    mtl_dropout: float = 0.2
    mtl_batch: int = 16
    mtl_stages: tuple = ((0.01, 5), (0.001, 20))
    train_augment: bool = True

    # fusion classifier
    fusion_hidden: tuple = (128, 64, 32, 16)
    fusion_dropout: float = 0.2
    fusion_batch: int = 4
    fusion_stages: tuple = ((0.01, 5), (0.001, 20))

    focal_alpha: float = 2.0
    focal_gamma: float = 2.0
    tta_n: int = 8

    # triage search
    triage_delta: float = 0.25
    triage_b_max: float = 2.0
    triage_lr: float = 0.5
    triage_epochs: int = 150
    triage_hidden: tuple = (64, 32)
    fnr_limit: float | None = None
    fpr_limit: float | None = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not self.out:
            raise ConfigError("out must be a non-empty path")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.cohort_n < 8:
            raise ConfigError("cohort_n too small")
        if not 0 <= self.holdout < self.cohort_n:
            raise ConfigError("holdout must be in [0, cohort_n)")
        if (
            len(self.split_fractions) != 4
            or any(f < 0 for f in self.split_fractions)
            or abs(sum(self.split_fractions) - 1.0) > 1e-9
        ):
            raise ConfigError("split_fractions must be four nonnegative values summing to 1")
        for name in ("mtl_hidden", "fusion_hidden", "triage_hidden"):
            sizes = getattr(self, name)
            if not sizes or any(int(s) != s or s < 1 for s in sizes):
                raise ConfigError(f"{name} must be positive layer sizes")
        for name in ("mtl_dropout", "fusion_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        for name in ("mtl_batch", "fusion_batch", "tta_n", "triage_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("mtl_stages", "fusion_stages"):
            stages = getattr(self, name)
            ok = bool(stages) and all(
                isinstance(s, tuple) and len(s) == 2 and s[0] > 0 and s[1] >= 1 for s in stages
            )
            if not ok:
                raise ConfigError(f"{name} must be (learning rate, epochs) pairs")
        if self.triage_delta <= 0 or self.triage_b_max < 0:
            raise ConfigError("triage grid must have delta > 0 and b_max >= 0")
        if self.triage_lr <= 0:
            raise ConfigError("triage_lr must be > 0")
        if self.focal_alpha <= 0 or self.focal_gamma < 0:
            raise ConfigError("focal parameters out of range")
        for name in ("fnr_limit", "fpr_limit"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1] or none")

    # -- domain-object views -------------------------------------------------

    def mtl_schedule(self) -> TrainSchedule:
        stages = tuple((float(lr), int(ep)) for lr, ep in self.mtl_stages)
        return TrainSchedule(stages=stages, batch_size=self.mtl_batch, seed=self.seed)

    def fusion_schedule(self) -> TrainSchedule:
        stages = tuple((float(lr), int(ep)) for lr, ep in self.fusion_stages)
        return TrainSchedule(stages=stages, batch_size=self.fusion_batch, seed=self.seed)

    def focal(self) -> FocalParams:
        return FocalParams(alpha=self.focal_alpha, gamma=self.focal_gamma)

    def augmenter(self) -> AugmentSpec:
        return AugmentSpec()

    # -- serialization ---------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


_FIELD_NAMES = {f.name for f in dataclasses.fields(ExperimentConfig)}
_INT_RE = re.compile(r"[+-]?\d+$")


def parse_value(text: str):
    """Literal parser for config values; lists become tuples."""
    s = text.strip()
    if not s:
        raise ConfigError("empty value")
    if s.startswith("[") and s.endswith("]"):
        return tuple(parse_value(p) for p in _split_items(s[1:-1]))
    low = s.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    if low == "none":
        return None
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "'\"":
        return s[1:-1]
    if _INT_RE.match(s):
        return int(s)
    try:
        return float(s)
    except ValueError:
        return s  # bare string


def _split_items(body: str) -> list[str]:
    # comma split that respects nested brackets
    items, depth, cur = [], 0, []
    for ch in body:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
            if depth < 0:
                raise ConfigError("unbalanced brackets")
        if ch == "," and depth == 0:
            items.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if depth != 0:
        raise ConfigError("unbalanced brackets")
    if cur or items:
        items.append("".join(cur))
    return [i for i in items if i.strip()]


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return "[" + ", ".join(format_value(p) for p in v) + "]"
    if isinstance(v, str):
        return f'"{v}"'
    return repr(v)


def parse_config_text(text: str) -> dict:
    """key = value lines; '#' starts a comment; keys must be known fields."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELD_NAMES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = parse_value(value)
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the file, then overrides; validates the result."""
    values: dict = {}
    if path is not None:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        values.update(parse_config_text(text))
    if overrides:
        for key, v in overrides.items():
            if key not in _FIELD_NAMES:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = v
    try:
        return ExperimentConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e
