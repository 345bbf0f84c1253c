"""Pipeline configuration and its ``key = value`` text form."""

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import InvariantError, ParseError


@dataclass(frozen=True)
class PipelineConfig:
    bfs_radius: float = 0.04
    overlap_threshold: float = 0.4
    small_instance_threshold: int = 200
    select_top_alpha: float = 30.0
    depth_tolerance: float = 0.05
    min_cluster_size: int = 50
    knn_k: int = 1
    background_classes: tuple = ()
    normalize_embeddings: bool = True
    # only used when the scene has no superpoint file
    angle_threshold: float = 30.0
    knn_normals: int = 16
    min_superpoint_size: int = 30
    # Number of self-training rounds. Kept for completeness; nothing here trains.
    self_train_iterations: int = 3

    def __post_init__(self):
        object.__setattr__(self, "background_classes", tuple(self.background_classes))
        problems = []
        if not self.bfs_radius > 0:
            problems.append(f"bfs_radius must be > 0, got {self.bfs_radius}")
        if not 0.0 <= self.overlap_threshold <= 1.0:
            problems.append(f"overlap_threshold must be in [0, 1], got {self.overlap_threshold}")
        if self.small_instance_threshold < 0:
            problems.append("small_instance_threshold must be >= 0")
        if not 0.0 < self.select_top_alpha <= 100.0:
            problems.append(f"select_top_alpha must be in (0, 100], got {self.select_top_alpha}")
        if not self.depth_tolerance > 0:
            problems.append("depth_tolerance must be > 0")
        if self.min_cluster_size < 0:
            problems.append("min_cluster_size must be >= 0")
        if self.knn_k < 1:
            problems.append("knn_k must be >= 1")
        if self.knn_normals < 3:
            problems.append("knn_normals must be >= 3")
        if problems:
            raise InvariantError(problems)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _coerce(name, ftype, raw):
    raw = raw.strip()
    if ftype is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if ftype is tuple:
        return tuple(tok.strip() for tok in raw.split(",") if tok.strip())
    return ftype(raw)


_FIELD_TYPES = {
    "bfs_radius": float,
    "overlap_threshold": float,
    "small_instance_threshold": int,
    "select_top_alpha": float,
    "depth_tolerance": float,
    "min_cluster_size": int,
    "knn_k": int,
    "background_classes": tuple,
    "normalize_embeddings": bool,
    "angle_threshold": float,
    "knn_normals": int,
    "min_superpoint_size": int,
    "self_train_iterations": int,
}


def parse_overrides(pairs, source="<overrides>"):
    """Turn ``key=value`` strings into typed keyword arguments."""
    out = {}
    for lineno, line in enumerate(pairs, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(source, f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ParseError(source, f"line {lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, _FIELD_TYPES[key], value)
        except ValueError as exc:
            raise ParseError(source, f"line {lineno}: {key}: {exc}") from exc
    return out


def load_config(path=None, overrides=()):
    """Build a config from an optional file plus ``key=value`` overrides.

    Overrides win over file values.
    """
    values = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ParseError(path, f"cannot read: {exc.strerror}") from exc
        values.update(parse_overrides(text.splitlines(), source=path))
    values.update(parse_overrides(overrides))
    return PipelineConfig(**values)


def dump_config(config):
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
