"""Flat key=value run configuration with declared keys and CLI overrides.

Each command declares its keys with typed defaults; values come from an
optional config file, then `--set key=value` overrides, then dedicated
flags. Unknown keys are rejected so snapshots stay authoritative.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def parse_typed(key: str, raw: str, default):
    """Parse `raw` using the type of `default`."""
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from e
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from e
    if isinstance(default, tuple):
        parts = [p for p in raw.replace(";", ",").split(",") if p.strip()]
        elem = default[0] if default else ""
        return tuple(parse_typed(key, p.strip(), elem) for p in parts)
    return raw


def load_config_file(path: str | Path) -> dict[str, str]:
    text = Path(path).read_text()
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_config(
    declared: dict,
    config_path: str | Path | None = None,
    overrides: list[str] | None = None,
) -> dict:
    """Merge defaults <- file <- --set overrides, rejecting unknown keys."""
    resolved = dict(declared)
    sources: list[tuple[str, str]] = []
    if config_path is not None:
        sources += list(load_config_file(config_path).items())
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        sources.append((key.strip(), value.strip()))
    for key, raw in sources:
        if key not in declared:
            raise ConfigError(f"unknown config key {key!r} (declared: {sorted(declared)})")
        resolved[key] = parse_typed(key, raw, declared[key])
    return resolved


def write_snapshot(out_dir: str | Path, command: str, resolved: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# demixlab {command}"]
    for key in sorted(resolved):
        value = resolved[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    path = out_dir / "config_snapshot.txt"
    path.write_text("\n".join(lines) + "\n")
    return path
