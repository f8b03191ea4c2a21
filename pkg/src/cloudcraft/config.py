"""YAML configuration with bundled defaults and ``CLOUDCRAFT_`` environment overrides."""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from cloudcraft.costmodel import EnergyTariff, FixedCosts, RoundingMode, ShareWeights
from cloudcraft.domain.models import PrinterProfile
from cloudcraft.domain.money import Money
from cloudcraft.errors import BadConfig

ENV_PREFIX = "CLOUDCRAFT_"


def _line_map(text: str) -> dict[tuple[str, ...], int]:
    """Map each key path in a YAML document to its 1-based line."""
    lines: dict[tuple[str, ...], int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                sub = path + (str(key_node.value),)
                lines[sub] = key_node.start_mark.line + 1
                walk(value_node, sub)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                sub = path + (str(i),)
                lines[sub] = item.start_mark.line + 1
                walk(item, sub)

    walk(yaml.compose(text), ())
    return lines


def _parse_yaml(text: str, source: str) -> tuple[dict, dict]:
    try:
        data = yaml.safe_load(text) or {}
        lines = _line_map(text) if data else {}
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise BadConfig(f"{source}: {exc.problem or exc}", mark.line + 1 if mark else None) from None
    except yaml.YAMLError as exc:
        raise BadConfig(f"{source}: {exc}") from None
    if not isinstance(data, dict):
        raise BadConfig(f"{source}: top level must be a mapping", 1)
    return data, lines


def _merge(base: dict, override: Mapping) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _env_overrides(env: Mapping[str, str]) -> dict:
    tree: dict = {}
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in name[len(ENV_PREFIX):].split("__") if p]
        if not path:
            continue
        node = tree
        for part in path[:-1]:
            node = node.setdefault(part, {})
        try:
            node[path[-1]] = yaml.safe_load(raw)
        except yaml.YAMLError:
            node[path[-1]] = raw
    return tree


def default_text() -> str:
    return resources.files("cloudcraft").joinpath("data/defaults.yaml").read_text(encoding="utf-8")


@dataclass
class Config:
    data: dict
    lines: dict[tuple[str, ...], int] = field(default_factory=dict)
    source: str = "<defaults>"

    def get(self, *path: str, default: Any = None) -> Any:
        node: Any = self.data
        for part in path:
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def fail(self, message: str, *path: str):
        raise BadConfig(f"{'.'.join(path)}: {message}", self.lines.get(tuple(path)))

    def number(self, *path: str, positive: bool = False, integer: bool = False, allow_zero: bool = True) -> float:
        value = self.get(*path)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(f"expected a number, got {value!r}", *path)
        if integer and not float(value).is_integer():
            self.fail(f"expected an integer, got {value!r}", *path)
        if positive and (value < 0 or (value == 0 and not allow_zero)):
            self.fail(f"must be {'positive' if not allow_zero else 'non-negative'}, got {value!r}", *path)
        return int(value) if integer else float(value)

    def money(self, *path: str) -> Money:
        try:
            return Money.eur(str(self.get(*path)))
        except (ValueError, TypeError):
            self.fail(f"not a euro amount: {self.get(*path)!r}", *path)

    # Typed views -------------------------------------------------------

    @property
    def mode(self) -> RoundingMode:
        try:
            return RoundingMode(self.get("costs", "mode"))
        except ValueError:
            self.fail("mode must be 'paper' or 'exact'", "costs", "mode")

    @property
    def tariff(self) -> EnergyTariff:
        return EnergyTariff(self.money("costs", "tariff_eur_per_kwh"))

    @property
    def fixed_costs(self) -> FixedCosts:
        return FixedCosts(
            webshop_monthly=self.money("costs", "webshop_monthly"),
            cloud_monthly=self.money("costs", "cloud_monthly"),
            monthly_volume=int(self.number("costs", "monthly_volume", positive=True, integer=True, allow_zero=False)),
            transaction_fee_rate=str(self.get("costs", "transaction_fee_rate")),
            transaction_fee_enabled=bool(self.get("costs", "transaction_fee_enabled")),
        )

    @property
    def weights(self) -> ShareWeights:
        w = self.get("weights") or {}
        try:
            return ShareWeights(**{k: str(v) for k, v in w.items()})
        except (TypeError, ValueError, ArithmeticError) as exc:
            self.fail(str(exc), "weights")

    @property
    def sale_price(self) -> Money:
        return self.money("costs", "sale_price")

    def profiles(self) -> dict[str, PrinterProfile]:
        out = {}
        for name, doc in (self.get("printers") or {}).items():
            try:
                out[name] = PrinterProfile.from_doc(doc, printer_id=name)
            except (KeyError, TypeError, ValueError) as exc:
                self.fail(f"bad printer profile: {exc}", "printers", name)
        return out

    def validate(self) -> Config:
        for section in ("api_gateway", "cloud_gateway"):
            port = self.number(section, "port", positive=True, integer=True)
            if port > 65535:
                self.fail("port out of range", section, "port")
        self.number("discovery", "ttl_s", positive=True, allow_zero=False)
        self.number("cloud_gateway", "agent_ttl_s", positive=True, allow_zero=False)
        self.number("auth", "token_lifetime_s", positive=True, allow_zero=False)
        self.number("services", "instances", positive=True, integer=True, allow_zero=False)
        self.mode, self.tariff, self.fixed_costs, self.weights, self.sale_price
        self.profiles()
        return self


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None) -> Config:
    data, _ = _parse_yaml(default_text(), "<defaults>")
    lines: dict = {}
    source = "<defaults>"
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise BadConfig(f"cannot read {path}: {exc}") from None
        user, lines = _parse_yaml(text, str(path))
        data = _merge(data, user)
        source = str(path)
    data = _merge(data, _env_overrides(os.environ if env is None else env))
    return Config(data, lines, source).validate()


def load_profile_file(path: str | Path) -> dict[str, PrinterProfile]:
    """Printer profiles from a file holding either ``printers:`` or one bare profile."""
    text = Path(path).read_text(encoding="utf-8")
    data, lines = _parse_yaml(text, str(path))
    if "printers" in data:
        return Config(data, lines, str(path)).profiles()
    try:
        profile = PrinterProfile.from_doc(data, printer_id=Path(path).stem)
    except (KeyError, TypeError, ValueError) as exc:
        raise BadConfig(f"{path}: bad printer profile: {exc}") from None
    return {profile.printer_id: profile}
