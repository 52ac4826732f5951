"""Line-oriented ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Sizes accept the suffixes
``K``/``KB``/``KiB`` (1024), ``M``, ``G`` and so on; ``32K`` is 32768 bytes.
Example::

    cluster_size       = 32K
    cache.per_stream   = 45
    cache.total        = 1G
    ds.small_threshold = 32K
    chain.limit        = 9
    phases.known_groups   = 243
    phases.unknown_groups = 96
    strategies         = C1,EM,PART,S,FL,TAG,CH,SR

``experiment = 2`` selects one of the three strategy sets instead of listing
names. ``ds.enabled`` adds or removes DS from whatever set was chosen.
"""
from __future__ import annotations

import re
from dataclasses import replace
from pathlib import Path
from typing import Callable, Union

from .indexer import BuildConfig
from .streams import EXPERIMENT_SETS

_UNITS = {"": 1, "b": 1, "k": 1 << 10, "m": 1 << 20, "g": 1 << 30, "t": 1 << 40}
_SIZE_RE = re.compile(r"^\s*(\d+)\s*([kmgt]?)(i?b)?\s*$", re.IGNORECASE)


class ConfigError(ValueError):
    pass


def parse_size(text: str) -> int:
    m = _SIZE_RE.match(text)
    if not m:
        raise ConfigError(f"not a size: {text!r}")
    return int(m.group(1)) * _UNITS[m.group(2).lower()]


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def parse_int(text: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ConfigError(f"not an integer: {text!r}") from None


def _optional_size(text: str):
    return None if text.strip().lower() in ("", "auto", "none") else parse_size(text)


def _optional_int(text: str):
    return None if text.strip().lower() in ("", "auto", "none") else parse_int(text)


def _range(text: str):
    if text.strip().lower() in ("", "none", "off"):
        return None
    m = re.match(r"^\s*(\d+)\s*(?:\.\.|-)\s*(\d+)\s*$", text)
    if not m:
        raise ConfigError(f"expected a range lo..hi: {text!r}")
    return int(m.group(1)), int(m.group(2))


def _divisions(text: str):
    return tuple(parse_int(x) for x in text.split(",") if x.strip())


# key -> (section, field, parser); sections: store, cache, strategies, engine, build
KEYS: dict[str, tuple[str, str, Callable]] = {
    "cluster_size": ("store", "cluster_size", parse_size),
    "max_segment_len": ("store", "max_segment_len", parse_int),
    "fl_area_clusters": ("store", "fl_area_clusters", parse_int),
    "part_divisions": ("store", "part_divisions", _divisions),
    "cache.per_stream": ("cache", "per_stream", parse_int),
    "cache.total": ("cache", "total_bytes", parse_size),
    "ds.small_threshold": ("engine", "ds_small_threshold", parse_size),
    "ds.pack_capacity": ("engine", "ds_pack_capacity", parse_size),
    "em.threshold": ("strategies", "em_threshold", parse_size),
    "chain.limit": ("strategies", "chain_limit", parse_int),
    "chain.limit_jitter": ("strategies", "chain_limit_jitter", _range),
    "tag.stream_max": ("strategies", "tag_stream_max_bytes", _optional_size),
    "tag.entry_max": ("strategies", "tag_entry_max_bytes", _optional_size),
    "sr.block_size": ("strategies", "sr_block_size", parse_size),
    "sr.budget": ("strategies", "sr_memory_budget", parse_size),
    "phases.known_groups": ("build", "known_groups", _optional_int),
    "phases.unknown_groups": ("build", "unknown_groups", _optional_int),
    "max_distance": ("build", "max_distance", parse_int),
    "stop_seq_max_len": ("build", "stop_seq_max_len", parse_int),
    "part_size": ("build", "part_size_bytes", parse_size),
    "reread_source": ("build", "reread_source", parse_bool),
}
SPECIAL_KEYS = ("strategies", "experiment", "ds.enabled")


def parse_config(text: str, base: BuildConfig | None = None) -> BuildConfig:
    """Apply the settings in ``text`` on top of ``base`` (defaults when None)."""
    base = base or BuildConfig()
    values = {"store": {}, "cache": {}, "strategies": {}, "engine": {}, "build": {}}
    names = None
    ds_enabled = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        key = key.lower()
        try:
            if key == "strategies":
                names = {n.strip().upper() for n in re.split(r"[,+\s]+", value) if n.strip()}
            elif key == "experiment":
                n = parse_int(value)
                if n not in EXPERIMENT_SETS:
                    raise ConfigError(f"experiment must be one of {sorted(EXPERIMENT_SETS)}")
                names = set(EXPERIMENT_SETS[n])
            elif key == "ds.enabled":
                ds_enabled = parse_bool(value)
            elif key in KEYS:
                section, fname, parse = KEYS[key]
                values[section][fname] = parse(value)
            else:
                raise ConfigError(f"unknown key {key!r}")
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    eng = base.engine
    if names is None:
        names = set(eng.strategies.enabled)
    if ds_enabled is not None:
        names = names | {"DS"} if ds_enabled else names - {"DS"}
    try:
        store = replace(eng.store, **values["store"])
        cache = replace(eng.cache, **values["cache"])
        strategies = replace(eng.strategies, enabled=frozenset(names), **values["strategies"])
        engine = replace(eng, store=store, cache=cache, strategies=strategies, **values["engine"])
        return replace(base, engine=engine, **values["build"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: Union[str, Path, None], base: BuildConfig | None = None) -> BuildConfig:
    if path is None:
        return base or BuildConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_config(text, base)


def dump_config(cfg: BuildConfig) -> str:
    """Render ``cfg`` in the file format (``parse_config(dump_config(c)) == c``)."""
    sections = {"store": cfg.engine.store, "cache": cfg.engine.cache,
                "strategies": cfg.engine.strategies, "engine": cfg.engine, "build": cfg}
    lines = [f"strategies = {cfg.engine.strategies.label() or 'none'}"]
    for key, (section, fname, _) in KEYS.items():
        v = getattr(sections[section], fname)
        if v is None:
            text = "auto" if section != "strategies" or fname.startswith("tag") else "none"
        elif isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, tuple):
            text = (f"{v[0]}..{v[1]}" if fname == "chain_limit_jitter"
                    else ",".join(map(str, v)))
        else:
            text = str(v)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
