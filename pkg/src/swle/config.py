"""Scenario configuration: JSON schema, defaults and loading."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import jsonschema

FAULT_KINDS = ("byzantine", "crash")
STRATEGIES = ("silent_leader", "reputation_builder", "mute")

# four regions; group 0 has the lowest average delay to everybody else
DEFAULT_GROUP_LATENCY_MS = [
    [0.25, 1.0, 1.5, 2.0],
    [1.0, 0.25, 2.0, 2.5],
    [1.5, 2.0, 0.25, 3.0],
    [2.0, 2.5, 3.0, 0.25],
]

_FAULT_SCHEMA = {
    "type": "object",
    "properties": {
        "replica": {"type": "integer", "minimum": 0},
        "kind": {"enum": list(FAULT_KINDS)},
        "strategy": {"enum": list(STRATEGIES)},
        "from_view": {"type": "integer", "minimum": 0},
    },
    "required": ["replica", "kind"],
    "additionalProperties": False,
}

SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "n": {"type": "integer", "minimum": 1},
        "f": {"type": "integer", "minimum": 0},
        "views": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "gst_ms": {"type": "number", "minimum": 0},
        "delta_ms": {"type": "number", "exclusiveMinimum": 0},
        "timeout_ms": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "payload_bytes": {"type": "integer", "minimum": 0},
        "mechanism": {"enum": ["swle", "roundrobin"]},
        "faults": {"type": "array", "items": _FAULT_SCHEMA},
        "latency_matrix": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "number", "minimum": 0}},
        },
        "latency_groups": {
            "type": "object",
            "properties": {
                "delays_ms": {
                    "type": "array",
                    "items": {"type": "array", "items": {"type": "number", "minimum": 0}},
                },
                "members": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
            },
            "required": ["delays_ms"],
            "additionalProperties": False,
        },
        "jitter_ms": {"type": "number", "minimum": 0},
        "processing_us": {"type": "integer", "minimum": 0},
        "bandwidth_gbps": {"type": "number", "exclusiveMinimum": 0},
        "outstanding_ops": {"type": "integer", "minimum": 1},
        "pre_gst": {
            "type": "object",
            "properties": {
                "policy": {"enum": ["random", "targeted"]},
                "max_ms": {"type": "number", "minimum": 0},
                "victims": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "delay_ms": {"type": "number", "minimum": 0},
            },
            "required": ["policy"],
            "additionalProperties": False,
        },
        "theta_override": {"type": "integer", "minimum": 1},
        "t_f": {"type": "integer", "minimum": 1},
        "window_views": {"type": "integer", "minimum": 1},
        "out": {"type": "string"},
    },
    "required": ["n"],
    "additionalProperties": False,
    "not": {"required": ["latency_matrix", "latency_groups"]},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FaultSpec:
    replica: int
    kind: str = "byzantine"
    strategy: Optional[str] = None
    from_view: int = 0


@dataclass
class Config:
    n: int
    f: Optional[int] = None
    views: int = 2000
    seed: int = 0
    gst_ms: float = 0.0
    delta_ms: float = 50.0
    timeout_ms: float = 1500.0
    batch_size: int = 400
    payload_bytes: int = 128
    mechanism: str = "swle"
    faults: list[FaultSpec] = field(default_factory=list)
    latency_matrix: Optional[list[list[float]]] = None
    latency_groups: Optional[dict] = None
    jitter_ms: float = 0.1
    processing_us: int = 100
    bandwidth_gbps: float = 5.0
    outstanding_ops: Optional[int] = None
    pre_gst: Optional[dict] = None
    theta_override: Optional[int] = None
    t_f: Optional[int] = None
    window_views: int = 50
    name: str = ""
    out: Optional[str] = None

    def __post_init__(self):
        if self.f is None:
            self.f = (self.n - 1) // 3
        if self.n != 3 * self.f + 1:
            raise ConfigError(f"n must equal 3f+1 (n={self.n}, f={self.f})")
        ids = [ft.replica for ft in self.faults]
        if len(set(ids)) != len(ids):
            raise ConfigError("a replica appears twice in faults")
        if any(not 0 <= i < self.n for i in ids):
            raise ConfigError("fault replica id out of range")
        if len(ids) > self.f:
            raise ConfigError(f"{len(ids)} faulty replicas exceed f={self.f}")
        for ft in self.faults:
            if ft.kind == "byzantine" and ft.strategy is None:
                raise ConfigError(f"byzantine replica {ft.replica} needs a strategy")
        if self.delta_ms >= self.timeout_ms:
            raise ConfigError("delta_ms must be below timeout_ms")
        if self.latency_matrix is not None:
            m = self.latency_matrix
            if len(m) != self.n or any(len(row) != self.n for row in m):
                raise ConfigError("latency_matrix must be n x n")
        if self.latency_groups is not None:
            d = self.latency_groups["delays_ms"]
            if any(len(row) != len(d) for row in d):
                raise ConfigError("latency_groups.delays_ms must be square")
            members = self.latency_groups.get("members")
            if members is not None:
                flat = sorted(i for g in members for i in g)
                if flat != list(range(self.n)) or len(members) != len(d):
                    raise ConfigError("latency_groups.members must partition the replicas, one list per group")
        if self.pre_gst is not None and self.pre_gst["policy"] == "targeted":
            if any(not 0 <= v < self.n for v in self.pre_gst.get("victims", [])):
                raise ConfigError("pre_gst victim id out of range")

    @property
    def faulty(self) -> set[int]:
        return {ft.replica for ft in self.faults}

    def to_dict(self) -> dict[str, Any]:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["faults"] = [
            {k: v for k, v in vars(ft).items() if v is not None} for ft in self.faults
        ]
        return {k: v for k, v in d.items() if v is not None}

    def replace(self, **changes) -> "Config":
        d = self.to_dict()
        d.update(changes)
        return from_dict(d)


def from_dict(data: dict[str, Any]) -> Config:
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {exc.message}") from None
    data = dict(data)
    data["faults"] = [FaultSpec(**ft) for ft in data.get("faults", [])]
    return Config(**data)


def load(source: Union[str, Path, dict]) -> Config:
    if isinstance(source, dict):
        return from_dict(source)
    path = Path(source)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(data)


def preset_path(name: str) -> Path:
    from importlib import resources

    return Path(str(resources.files("swle") / "presets" / f"{name}.json"))


def preset(name: str, **overrides) -> Config:
    data = json.loads(preset_path(name).read_text())
    data.update(overrides)
    return from_dict(data)
