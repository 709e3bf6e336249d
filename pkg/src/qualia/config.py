"""Run configuration: a flat ``key.path = value`` document.

Every knob of every stage lives in one namespace so that a run is fully
described by its effective config. Unknown keys are rejected; defaults
are always materialized so the echoed config is complete.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}

# key -> (type, default). Types are int, float, bool or str.
SCHEMA: dict[str, tuple[type, Any]] = {
    "seed": (int, 1234),
    "jobs": (int, 1),
    "paths.workdir": (str, "qualia_work"),
    # prompt bank
    "prompts.path": (str, ""),
    "prompts.kinds": (str, "objective,subjective"),
    "prompts.template": (str, "<d>"),
    # vision-language encoder
    "encoder.backend": (str, "mock"),
    "encoder.mock_seed": (int, 0),
    "encoder.mock_dim": (int, 64),
    "encoder.logit_scale": (float, 100.0),
    "encoder.image_model": (str, ""),
    "encoder.text_model": (str, ""),
    "encoder.vocab": (str, ""),
    # semantic branch
    "sfe.enabled": (bool, True),
    "sfe.grid": (str, "3x3"),
    "sfe.frames": (str, "all"),
    "sfe.t_fix": (int, 32),
    "sfe.hidden": (int, 64),
    # spatial branch
    "spatial.enabled": (bool, True),
    "spatial.grid_f": (int, 7),
    "spatial.patch": (int, 32),
    "spatial.frames": (int, 16),
    "spatial.backbone": (str, "tiny"),
    "spatial.weights_path": (str, ""),
    # training
    "train.alpha": (float, 1.0),
    "train.beta": (float, 1.0),
    "train.lr_backbone": (float, 0.000075),
    "train.lr_other": (float, 0.00075),
    "train.batch": (int, 12),
    "train.epochs": (int, 30),
    "train.weight_decay": (float, 0.05),
    "train.head_hidden": (int, 64),
    # evaluation protocol
    "eval.splits": (int, 10),
    "eval.train_frac": (float, 0.8),
    # distortion probe
    "probe.levels": (str, "-1,-0.5,0,0.5,1"),
}

_ENUMS = {
    "encoder.backend": {"pretrained", "mock"},
    "spatial.backbone": {"stub", "tiny", "external"},
}


def _coerce(key: str, raw: Any) -> Any:
    typ, _ = SCHEMA[key]
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {text!r} as {typ.__name__}") from None


class RunConfig:
    """Immutable-ish mapping of fully resolved config values."""

    def __init__(self, values: dict[str, Any] | None = None):
        self._values = {k: default for k, (_, default) in SCHEMA.items()}
        if values:
            for key, raw in values.items():
                self.set(key, raw)

    def set(self, key: str, raw: Any) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self._values[key] = _coerce(key, raw)

    def get(self, key: str) -> Any:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def __getitem__(self, key: str) -> Any:
        return self.get(key)

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)

    def lines(self) -> list[str]:
        """Effective config, one `key = value` line per key, sorted."""
        out = []
        for key in sorted(self._values):
            val = self._values[key]
            if isinstance(val, bool):
                val = "true" if val else "false"
            out.append(f"{key} = {val}")
        return out

    def grid_mn(self) -> tuple[int, int]:
        raw = self.get("sfe.grid")
        parts = raw.lower().split("x")
        if len(parts) != 2:
            raise ConfigError(f"sfe.grid must look like 'MxN', got {raw!r}")
        try:
            m, n = int(parts[0]), int(parts[1])
        except ValueError:
            raise ConfigError(f"sfe.grid must look like 'MxN', got {raw!r}") from None
        if m < 1 or n < 1:
            raise ConfigError("sfe.grid counts must be >= 1")
        return m, n

    def frame_mode(self) -> str | int:
        """'all' or a uniform frame count for the semantic branch."""
        raw = self.get("sfe.frames").strip().lower()
        if raw == "all":
            return "all"
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"sfe.frames must be 'all' or an integer, got {raw!r}") from None
        if n < 1:
            raise ConfigError("sfe.frames must be >= 1")
        return n

    def probe_levels(self) -> list[float]:
        raw = self.get("probe.levels")
        try:
            levels = [float(tok) for tok in raw.split(",") if tok.strip() != ""]
        except ValueError:
            raise ConfigError(f"probe.levels must be comma-separated reals, got {raw!r}") from None
        if not levels:
            raise ConfigError("probe.levels is empty")
        return levels

    def validate(self) -> None:
        for key, allowed in _ENUMS.items():
            if self.get(key) not in allowed:
                raise ConfigError(f"{key} must be one of {sorted(allowed)}, got {self.get(key)!r}")
        if self.get("train.alpha") < 0 or self.get("train.beta") < 0:
            raise ConfigError("train.alpha and train.beta must be >= 0")
        if self.get("train.alpha") + self.get("train.beta") <= 0:
            raise ConfigError("train.alpha + train.beta must be > 0")
        # zero rates are allowed so a no-op training step stays expressible
        if self.get("train.lr_backbone") < 0 or self.get("train.lr_other") < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.get("train.batch") < 1 or self.get("train.epochs") < 0:
            raise ConfigError("train.batch must be >= 1 and train.epochs >= 0")
        if self.get("train.weight_decay") < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        if self.get("spatial.grid_f") < 1 or self.get("spatial.patch") < 1:
            raise ConfigError("spatial.grid_f and spatial.patch must be >= 1")
        if self.get("spatial.frames") < 1:
            raise ConfigError("spatial.frames must be >= 1")
        if self.get("sfe.t_fix") < 1 or self.get("sfe.hidden") < 1:
            raise ConfigError("sfe.t_fix and sfe.hidden must be >= 1")
        if not self.get("sfe.enabled") and not self.get("spatial.enabled"):
            raise ConfigError("at least one of sfe.enabled / spatial.enabled must be true")
        if self.get("encoder.logit_scale") <= 0:
            raise ConfigError("encoder.logit_scale must be > 0")
        if self.get("encoder.mock_dim") < 2:
            raise ConfigError("encoder.mock_dim must be >= 2")
        if not 0 < self.get("eval.train_frac") <= 1:
            raise ConfigError("eval.train_frac must be in (0, 1]")
        if self.get("eval.splits") < 1:
            raise ConfigError("eval.splits must be >= 1")
        if self.get("jobs") < 1:
            raise ConfigError("jobs must be >= 1")
        self.grid_mn()
        self.frame_mode()
        self.probe_levels()


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment; blank lines ignored."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = raw
    return values


def load_config(path: str | Path | None = None,
                overrides: Iterable[tuple[str, str]] | dict[str, Any] | None = None) -> RunConfig:
    """Build the effective config: defaults <- file <- overrides."""
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        for key, raw in parse_config_text(p.read_text(encoding="utf-8"), source=str(p)).items():
            cfg.set(key, raw)
    if overrides:
        items = overrides.items() if isinstance(overrides, dict) else overrides
        for key, raw in items:
            cfg.set(key, raw)
    cfg.validate()
    return cfg
