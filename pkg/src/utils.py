from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, TextIO, Tuple

import numpy as np
import yaml
from dotenv import load_dotenv

from src.errors import ConfigError, InvalidArgumentError

DEFAULT_CONFIG_PATH = Path("config/config.yaml")
CONFIG_ENV_VAR = "SMILE_CNN_CONFIG"

EventCallback = Callable[[str, Dict[str, Any]], None]


def load_config(path: Optional[str | Path] = None) -> dict:
    """Read the YAML config.

    Resolution order: explicit ``path``, then ``$SMILE_CNN_CONFIG`` (after
    loading ``.env``), then ``config/config.yaml``.
    """
    load_dotenv()
    cfg_path = Path(path or os.getenv(CONFIG_ENV_VAR) or DEFAULT_CONFIG_PATH)
    if not cfg_path.exists():
        raise ConfigError(f"missing config file {cfg_path}")
    try:
        cfg = yaml.safe_load(cfg_path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {cfg_path}: {e}") from e
    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"{cfg_path} must contain a mapping at top level")
    return cfg


def resolve_data_path(explicit: Optional[str], default_path: Optional[str], env_var: str) -> Optional[str]:
    """Flag beats environment beats config default."""
    if explicit:
        return explicit
    from_env = os.getenv(env_var)
    if from_env:
        return from_env
    return default_path


def parse_shape(text: str) -> Tuple[int, int]:
    """``"28x23"`` -> (28, 23)."""
    parts = text.lower().replace("×", "x").split("x")
    if len(parts) != 2:
        raise InvalidArgumentError(f"expected HxW, got {text!r}")
    try:
        h, w = int(parts[0]), int(parts[1])
    except ValueError as e:
        raise InvalidArgumentError(f"expected HxW, got {text!r}") from e
    if h < 1 or w < 1:
        raise InvalidArgumentError(f"dimensions must be >= 1, got {text!r}")
    return h, w


def lower_median(values: Sequence[float]) -> float:
    """Median that takes the lower middle element for even counts."""
    if len(values) == 0:
        raise InvalidArgumentError("median of an empty sequence")
    ordered = sorted(float(v) for v in values)
    return ordered[(len(ordered) - 1) // 2]


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    return value


@dataclass
class TraceLogger:
    """Append-only JSONL event log, one object per event."""

    path: Path
    _file: Optional[TextIO] = field(default=None, repr=False)
    events: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def open(cls, logs_dir: str | Path) -> "TraceLogger":
        logs = Path(logs_dir)
        logs.mkdir(parents=True, exist_ok=True)
        stamp = datetime.now().strftime("%Y%m%d_%H%M%S_%f")
        path = logs / f"trace_{stamp}.jsonl"
        return cls(path=path, _file=open(path, "w", encoding="utf-8"))

    def log(self, event_type: str, data: Dict[str, Any]) -> None:
        entry = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "event_type": event_type,
            "data": _jsonable(data),
        }
        # selection workers log from several threads
        with self._lock:
            if self._file is None:
                return
            self._file.write(json.dumps(entry) + "\n")
            self._file.flush()
            self.events += 1

    def __call__(self, event_type: str, data: Dict[str, Any]) -> None:
        self.log(event_type, data)

    def close(self) -> None:
        with self._lock:
            if self._file is not None:
                self._file.close()
                self._file = None

    def __enter__(self) -> "TraceLogger":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def emit(on_event: Optional[EventCallback], event_type: str, **data: Any) -> None:
    if on_event is not None:
        on_event(event_type, data)
