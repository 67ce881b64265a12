"""Run configuration: defaults, file parsing and dotted-key overrides.

File format is INI-like text.  Keys before any ``[section]`` header are
top level; ``#`` and ``;`` start comments::

    seed = 3

    [composer]
    r = 16
    targets = QV        # or Q,V

    [bench]
    seeds = 0,1,2

Overrides use dotted keys, e.g. ``composer.r=16``, and are applied after the
file.  Unknown keys, unparsable values and out-of-range values raise a
:class:`ConfigError` naming the offending key.
"""

from __future__ import annotations

import configparser
import copy
import json
from pathlib import Path
from typing import Any, Callable, Iterable, Optional

from .errors import ConfigError

# key -> (default, kind, constraint or None)
_SPEC: dict[str, tuple[Any, str, Optional[Callable[[Any], bool]]]] = {
    "seed": (0, "int", lambda v: v >= 0),
    "dataset.N": (2048, "int", lambda v: v >= 2),
    "dataset.C": (10, "int", lambda v: v >= 2),
    "backbone.image_size": (16, "int", lambda v: v >= 1),
    "backbone.patch_size": (4, "int", lambda v: v >= 1),
    "backbone.d": (64, "int", lambda v: v >= 1),
    "backbone.layers": (4, "int", lambda v: v >= 1),
    "backbone.heads": (4, "int", lambda v: v >= 1),
    "backbone.T": (100, "int", lambda v: v >= 1),
    "composer.r": (8, "int", lambda v: v >= 1),
    "composer.d_model": (64, "int", lambda v: v >= 1),
    "composer.L": (2, "int", lambda v: v >= 1),
    "composer.heads": (4, "int", lambda v: v >= 1),
    "composer.m": (1, "int", lambda v: v >= 1),
    "composer.targets": (("Q", "V"), "targets", lambda v: len(v) > 0),
    "composer.attention": ("global_local", "str", lambda v: v in ("global_local", "global_local_wide", "standard")),
    "composer.arch": ("transformer", "str", lambda v: v in ("transformer", "mlp")),
    "composer.token_init": ("projected", "str", lambda v: v in ("projected", "constant")),
    "train.epochs": (8, "int", lambda v: v >= 1),
    "train.lr": (1e-4, "float", lambda v: v > 0),
    "train.weight_decay": (0.05, "float", lambda v: v >= 0),
    "train.batch": (16, "int", lambda v: v >= 1),
    "train.alpha": (0.75, "float", lambda v: 0.0 <= v <= 1.0),
    "train.pipeline": (
        "context_class",
        "str",
        lambda v: v in ("vanilla", "full_class", "context_class", "context_similarity"),
    ),
    "quant.enabled": (False, "bool", None),
    "quant.w_bits": (4, "int", lambda v: v in (2, 4, 8)),
    "quant.a_bits": (8, "int", lambda v: v == 8),
    "bench.steps": (50, "int", lambda v: v >= 1),
    "bench.samples_per_class": (12, "int", lambda v: v >= 1),
    "bench.seeds": ((0, 1, 2), "ints", lambda v: len(v) > 0),
    "pretrain.epochs": (30, "int", lambda v: v >= 1),
    "pretrain.lr": (2e-3, "float", lambda v: v > 0),
    "pretrain.batch": (32, "int", lambda v: v >= 1),
}

KEYS = tuple(_SPEC)


def _parse(key: str, raw: Any) -> Any:
    kind = _SPEC[key][1]
    try:
        if not isinstance(raw, str):
            value = raw
            if kind == "targets":
                value = tuple(str(x).upper() for x in raw)
            elif kind == "ints":
                value = tuple(int(x) for x in raw)
            elif kind == "int" and not isinstance(raw, bool):
                if int(raw) != raw:
                    raise ValueError
                value = int(raw)
            elif kind == "float":
                value = float(raw)
        else:
            s = raw.strip()
            if kind == "int":
                value = int(s)
            elif kind == "float":
                value = float(s)
            elif kind == "bool":
                low = s.lower()
                if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                    raise ValueError
                value = low in ("true", "1", "yes", "on")
            elif kind == "targets":
                parts = [p for p in s.replace(",", " ").split()] if ("," in s or " " in s) else list(s)
                value = tuple(p.strip().upper() for p in parts if p.strip())
                if any(p not in ("Q", "K", "V", "O") for p in value) or len(set(value)) != len(value):
                    raise ValueError
                value = tuple(k for k in "QKVO" if k in value)
            elif kind == "ints":
                value = tuple(int(p) for p in s.replace(",", " ").split())
            else:
                value = s
    except (TypeError, ValueError):
        raise ConfigError(f"config key '{key}': cannot parse {raw!r} as {kind}") from None
    if kind == "int" and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"config key '{key}': expected int, got {raw!r}")
    check = _SPEC[key][2]
    if check is not None and not check(value):
        raise ConfigError(f"config key '{key}': value {value!r} violates its constraint")
    return value


class RunConfig:
    """Validated mapping from canonical dotted keys to values."""

    def __init__(self, values: Optional[dict[str, Any]] = None):
        self._v = {k: copy.deepcopy(spec[0]) for k, spec in _SPEC.items()}
        for k, v in (values or {}).items():
            self.set(k, v)
        self.validate()

    def set(self, key: str, raw: Any) -> None:
        if key not in _SPEC:
            raise ConfigError(f"unknown config key '{key}'")
        self._v[key] = _parse(key, raw)

    def __getitem__(self, key: str) -> Any:
        if key not in _SPEC:
            raise ConfigError(f"unknown config key '{key}'")
        return self._v[key]

    def validate(self) -> None:
        v = self._v
        if v["backbone.image_size"] % v["backbone.patch_size"]:
            raise ConfigError("config key 'backbone.patch_size': must divide backbone.image_size")
        if v["backbone.d"] % v["backbone.heads"]:
            raise ConfigError("config key 'backbone.heads': must divide backbone.d")
        if v["composer.d_model"] % v["composer.heads"]:
            raise ConfigError("config key 'composer.heads': must divide composer.d_model")
        if v["dataset.N"] < v["dataset.C"]:
            raise ConfigError("config key 'dataset.N': must be >= dataset.C")

    def with_overrides(self, overrides: Iterable[str]) -> "RunConfig":
        out = RunConfig(dict(self._v))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            out.set(key.strip(), raw)
        out.validate()
        return out

    def replace(self, **dotted) -> "RunConfig":
        """Copy with keys given as ``section__key=value`` keyword arguments."""
        vals = dict(self._v)
        for k, v in dotted.items():
            vals[k.replace("__", ".")] = v
        return RunConfig(vals)

    def as_dict(self) -> dict[str, Any]:
        """Nested, JSON-serializable form."""
        out: dict[str, Any] = {}
        for k, v in self._v.items():
            node = out
            parts = k.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = list(v) if isinstance(v, tuple) else v
        return out

    def flat(self) -> dict[str, Any]:
        return dict(self._v)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._v == other._v

    # -- typed views -----------------------------------------------------------------
    def backbone_config(self):
        from .backbone import DenoiserConfig

        v = self._v
        return DenoiserConfig(
            image_size=v["backbone.image_size"],
            patch_size=v["backbone.patch_size"],
            d=v["backbone.d"],
            num_layers=v["backbone.layers"],
            num_heads=v["backbone.heads"],
            num_classes=v["dataset.C"],
            num_timesteps=v["backbone.T"],
        )

    def composer_config(self, quant: bool = False):
        from .composer import ComposerConfig

        v = self._v
        return ComposerConfig(
            r=v["composer.r"],
            d_model=v["composer.d_model"],
            L=v["composer.L"],
            heads=v["composer.heads"],
            m=v["composer.m"],
            targets=v["composer.targets"],
            attention=v["composer.attention"],
            arch=v["composer.arch"],
            token_init=v["composer.token_init"],
            quant=quant,
        )

    def train_config(self, seed: Optional[int] = None):
        from .training import TrainConfig

        v = self._v
        return TrainConfig(
            epochs=v["train.epochs"],
            lr=v["train.lr"],
            weight_decay=v["train.weight_decay"],
            batch=v["train.batch"],
            alpha=v["train.alpha"],
            pipeline=v["train.pipeline"],
            seed=v["seed"] if seed is None else seed,
        )

    def pretrain_config(self):
        from .training import PretrainConfig

        v = self._v
        return PretrainConfig(epochs=v["pretrain.epochs"], lr=v["pretrain.lr"], batch=v["pretrain.batch"], seed=v["seed"])

    def quant_config(self):
        from .quant import QuantConfig

        return QuantConfig(self._v["quant.w_bits"], self._v["quant.a_bits"])


def _read_text(text: str, origin: str) -> dict[str, str]:
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";"), comment_prefixes=("#", ";"), strict=True
    )
    parser.optionxform = str  # keep key case (dataset.N)
    try:
        parser.read_string("[__top__]\n" + text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {origin}: {exc}") from None
    flat: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section, raw=True):
            dotted = key if section == "__top__" else f"{section}.{key}"
            flat[dotted] = value
    return flat


def parse_config(path: Optional[str], overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file at ``path`` (``None``/``"default"`` skips it), then overrides."""
    values: dict[str, str] = {}
    if path not in (None, "", "default"):
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        values = _read_text(p.read_text(), str(p))
    for key in values:
        if key not in _SPEC:
            raise ConfigError(f"unknown config key '{key}'")
    return RunConfig(values).with_overrides(overrides)


def default_config() -> RunConfig:
    return RunConfig()
