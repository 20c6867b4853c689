"""Gateway configuration file.

Line-oriented ``key = value`` pairs. Top-level keys come first; then an
``[actions]`` section mapping action names to ``id[, args template]`` and any
number of ``[bindings.<robot_id>]`` sections mapping class names to action
names. ``[bindings.*]`` applies to every robot unless overridden::

    classes = ball, cup, bottle, person
    conf_threshold = 0.5
    cooldown_s = 2

    [actions]
    kick = 1, foot=right target={label}

    [bindings.*]
    ball = kick
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

DEFAULT_CLASSES = ("ball", "cup", "bottle", "person")
_TOP = "gateway"
_KNOWN_KEYS = {
    "listen", "detector", "model", "classes", "conf_threshold", "nms_threshold",
    "cooldown_s", "service_time_ms", "stats_interval", "oracle_jitter_px",
    "oracle_fp_rate", "seed",
}  # fmt: skip


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ActionDef:
    action_id: int
    name: str
    args_template: str = ""

    def render(self, **fields) -> str:
        try:
            return self.args_template.format(**fields)
        except (KeyError, IndexError, ValueError):
            return self.args_template


@dataclass
class ActionRegistry:
    actions: dict[int, ActionDef] = field(default_factory=dict)
    # robot_id (or "*") -> {label_id: action_id}
    bindings: dict[str, dict[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        for robot, table in self.bindings.items():
            for label, aid in table.items():
                if aid not in self.actions:
                    raise ConfigError(f"binding {robot}:{label} -> unknown action {aid}")

    def bindings_for(self, robot_id: str) -> dict[int, int]:
        merged = dict(self.bindings.get("*", {}))
        merged.update(self.bindings.get(robot_id, {}))
        return merged


@dataclass
class GatewayConfig:
    listen: str = "127.0.0.1:7700"
    detector: str = "oracle"
    model: str | None = None
    classes: tuple[str, ...] = DEFAULT_CLASSES
    conf_threshold: float = 0.5
    nms_threshold: float = 0.45
    cooldown_s: float = 2.0
    service_time_ms: float = 0.0
    stats_interval: float = 0.0
    oracle_jitter_px: float = 0.0
    oracle_fp_rate: float = 0.0
    seed: int = 0
    registry: ActionRegistry = field(default_factory=ActionRegistry)

    @property
    def host_port(self) -> tuple[str, int]:
        return parse_addr(self.listen)


def parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        raise ConfigError(f"address {addr!r} lacks a port")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ConfigError(f"bad port in {addr!r}") from None


def _number(key, value, kind=float):
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None


def parse_config(text: str) -> GatewayConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_TOP}]\n{text}")
    except configparser.Error as e:
        raise ConfigError(str(e)) from None

    cfg = GatewayConfig()
    top = parser[_TOP]
    for key, value in top.items():
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"unknown key {key!r}")
        if key == "classes":
            names = tuple(c.strip() for c in value.split(",") if c.strip())
            if not names or len(set(names)) != len(names):
                raise ConfigError("classes must be a non-empty list of distinct names")
            cfg.classes = names
        elif key in ("listen", "detector", "model"):
            setattr(cfg, key, value.strip())
        elif key == "seed":
            cfg.seed = _number(key, value, int)
        else:
            setattr(cfg, key, _number(key, value))
    if cfg.detector not in ("micro-cnn", "oracle"):
        raise ConfigError(f"detector must be micro-cnn or oracle, got {cfg.detector!r}")
    if not 0 <= cfg.conf_threshold <= 1 or not 0 < cfg.nms_threshold <= 1:
        raise ConfigError("thresholds out of range")
    parse_addr(cfg.listen)

    actions: dict[int, ActionDef] = {}
    by_name: dict[str, int] = {}
    if parser.has_section("actions"):
        for name, value in parser["actions"].items():
            aid_text, _, args = value.partition(",")
            aid = _number(f"actions.{name}", aid_text.strip(), int)
            if not 0 <= aid <= 0xFFFF or aid in actions:
                raise ConfigError(f"action {name}: id {aid} invalid or reused")
            actions[aid] = ActionDef(aid, name, args.strip())
            by_name[name] = aid

    label_ids = {name: i for i, name in enumerate(cfg.classes)}
    bindings: dict[str, dict[int, int]] = {}
    for section in parser.sections():
        if section in (_TOP, "actions"):
            continue
        if not section.startswith("bindings."):
            raise ConfigError(f"unknown section [{section}]")
        robot = section[len("bindings.") :]
        table = {}
        for label, action in parser[section].items():
            if label not in label_ids:
                raise ConfigError(f"[{section}]: unknown class {label!r}")
            if action.strip() not in by_name:
                raise ConfigError(f"[{section}]: unknown action {action.strip()!r}")
            table[label_ids[label]] = by_name[action.strip()]
        bindings[robot] = table
    cfg.registry = ActionRegistry(actions, bindings)
    return cfg


def load_config(path: str | Path) -> GatewayConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    return parse_config(text)
