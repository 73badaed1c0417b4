"""Flat ``key=value`` configs, counter-based RNG streams, run manifests and CSV output.

Config format
-------------
One ``key = value`` per line, UTF-8. ``#`` starts a comment. Lists are
comma-separated (``k_values = 1,2,3``). Nested specs use dotted keys
(``oracle.lambda = 0.5``). ``lambda`` is accepted as an alias of ``lam``.
Unknown keys are an error; missing keys take the dataclass defaults, and the
full resolved mapping is echoed into the run manifest.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigError, PhantomGradError

__version__ = "0.1.0"

ALIASES = {"lambda": "lam"}
REVERSE_ALIASES = {v: k for k, v in ALIASES.items()}


# -- parsing ----------------------------------------------------------------

def _split_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", line=lineno)
        yield lineno, key, value


def _coerce(value: str, tp, lineno: int, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    try:
        if origin is typing.Union:
            inner = [a for a in args if a is not type(None)]
            if value.lower() in ("none", ""):
                return None
            return _coerce(value, inner[0], lineno, key)
        if origin in (list, tuple):
            item = args[0] if args else str
            parts = [p.strip() for p in value.split(",") if p.strip()]
            out = [_coerce(p, item, lineno, key) for p in parts]
            return tuple(out) if origin is tuple else out
        if tp is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return value
    except ValueError as exc:
        raise ConfigError(str(exc), line=lineno, key=key) from None
    raise ConfigError(f"unsupported field type {tp!r}", line=lineno, key=key)


def _field_default(f):
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return f.default


def _build(cls, pairs: dict, prefix: str = "", base=None):
    # nested overrides start from the parent's default for that field, not the bare class
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            sub = {k[len(f.name) + 1:]: v for k, v in pairs.items() if k.startswith(f.name + ".")}
            if sub:
                start = getattr(base, f.name) if base is not None else _field_default(f)
                kwargs[f.name] = _build(tp, sub, prefix + f.name + ".", start)
            continue
        if f.name in pairs:
            lineno, value = pairs[f.name]
            kwargs[f.name] = _coerce(value, tp, lineno, prefix + REVERSE_ALIASES.get(f.name, f.name))
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except PhantomGradError as exc:
        raise ConfigError(str(exc)) from None


def _known_keys(cls, prefix: str = "") -> set:
    hints = typing.get_type_hints(cls)
    keys = set()
    for f in dataclasses.fields(cls):
        if dataclasses.is_dataclass(hints[f.name]):
            keys |= _known_keys(hints[f.name], prefix + f.name + ".")
        else:
            keys.add(prefix + f.name)
    return keys


def _canonical(key: str) -> str:
    parts = key.split(".")
    parts[-1] = ALIASES.get(parts[-1], parts[-1])
    return ".".join(parts)


def _display(key: str) -> str:
    parts = key.split(".")
    parts[-1] = REVERSE_ALIASES.get(parts[-1], parts[-1])
    return ".".join(parts)


def parse_config(text: str, cls):
    """Parse ``key=value`` text into an instance of dataclass ``cls``."""
    known = _known_keys(cls)
    pairs = {}
    for lineno, key, value in _split_lines(text):
        ck = _canonical(key)
        if ck not in known:
            valid = sorted(_display(k) for k in known)
            raise ConfigError(f"unknown key; valid keys are {valid}", line=lineno, key=key)
        if ck in pairs:
            raise ConfigError("duplicate key", line=lineno, key=key)
        pairs[ck] = (lineno, value)
    return _build(cls, pairs)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return format_float(v)
    if v is None:
        return "none"
    return str(v)


def config_echo(obj, prefix: str = "") -> dict:
    """Flat ``{key: text}`` of every field (defaults included), round-trippable
    through :func:`parse_config`."""
    out = {}
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        if dataclasses.is_dataclass(val):
            out.update(config_echo(val, prefix + f.name + "."))
        else:
            out[prefix + REVERSE_ALIASES.get(f.name, f.name)] = _format_value(val)
    return out


def dumps_config(obj) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config_echo(obj).items())


def config_hash(obj) -> str:
    blob = json.dumps(config_echo(obj), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# -- rng --------------------------------------------------------------------

def _key(master_seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(master_seed)}/{label}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def rng_stream(master_seed: int, label: str) -> np.random.Generator:
    """Philox generator keyed by ``(master_seed, label)``.

    Streams for different labels are independent and do not depend on the
    order in which they are created, so per-instance randomness is the same
    under any worker schedule.
    """
    return np.random.Generator(np.random.Philox(key=_key(master_seed, label)))


def derived_seed(master_seed: int, label: str) -> int:
    return _key(master_seed, label) >> 65


# -- manifest / csv -----------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = __version__
    started: str = ""
    finished: str = ""
    defaults: dict = field(default_factory=dict)
    config_hash: str = ""
    status: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        data = json.loads(text)
        return cls(**data)

    def config_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.config.items())


def format_float(x: float) -> str:
    """Shortest round-trip decimal; ``nan``/``inf``/``-inf`` spelled out."""
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def format_cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format_float(float(v))
    return str(v)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
        w.writerow(columns)
        for row in rows:
            w.writerow([format_cell(row.get(c)) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
