"""Plain-text ``key = value`` configuration files.

Keys are field names of `EnrichConfig`, `LossConfig` and `FitConfig`
(a key shared by several configs sets all of them), or ``label.<id>`` to
map a source label id to a canonical class name. ``label_preset`` picks a
shipped mapping from `LABEL_PRESETS`, which ``label.<id>`` entries extend.
Lines starting with ``#`` and blank lines are ignored.

"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
import enum
import logging
import os
import typing as tp

from .enrich import EnrichConfig
from .losses import LossConfig
from .optim import FitConfig
from .volume_common import TAVR_CLASS_MAP, TavrClass, UnknownClassError

_logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "ConfigBundle",
    "read_config",
    "parse_config",
    "load_config",
    "from_mapping",
    "LABEL_PRESETS",
    "DEFAULT_LABEL_PRESET",
]


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    """Split config text into raw string values, last assignment winning."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError("%s:%d: expected 'key = value', got %r" % (source, lineno, line))
        values[key.strip()] = value.split("#", 1)[0].strip()
    return values


def read_config(path: tp.Union[str, os.PathLike]) -> dict[str, str]:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read(), str(path))


def _coerce(value: str, hint) -> tp.Any:
    origin = tp.get_origin(hint)
    args = tp.get_args(hint)
    if origin is tp.Union:
        inner = [a for a in args if a is not type(None)]
        if value.lower() == "none":
            return None
        return _coerce(value, inner[0])
    if origin is tuple:
        return tuple(_coerce(v.strip(), args[0]) for v in value.split(",") if v.strip())
    if hint is bool:
        if value.lower() in _TRUE:
            return True
        if value.lower() in _FALSE:
            return False
        raise ValueError("not a boolean: %r" % value)
    if hint is TavrClass:
        return TavrClass.from_name(value)
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        return hint(value)
    if hint in (int, float, str):
        return hint(value)
    raise ValueError("unsupported field type %r" % hint)


T = tp.TypeVar("T")


def from_mapping(cls: tp.Type[T], values: dict[str, str], base: tp.Optional[T] = None) -> T:
    """Build `cls` from raw string values, coercing each by its field type.

    Keys that are not fields of `cls` are ignored.

    """
    hints = tp.get_type_hints(cls)
    kwargs = {}
    for f in fields(cls):
        if f.name not in values:
            continue
        try:
            kwargs[f.name] = _coerce(values[f.name], hints[f.name])
        except (ValueError, UnknownClassError) as e:
            raise ConfigError("Invalid value for %s: %s" % (f.name, e)) from e
    try:
        return replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (ValueError, KeyError) as e:
        raise ConfigError("Invalid %s: %s" % (cls.__name__, e)) from e


#: Source label id -> canonical class id, by preset name. ``canonical``
#: reads ids as stored (the enriched release layout).
LABEL_PRESETS: dict[str, tp.Optional[dict[int, int]]] = {
    "canonical": None,
    # combined "total" task label ids of TotalSegmentator v1
    "totalsegmentator_v1": {
        7: TavrClass.AORTA,
        46: TavrClass.LEFT_VENTRICLE,
        51: TavrClass.ILIAC_ARTERY_LEFT,
        52: TavrClass.ILIAC_ARTERY_RIGHT,
    },
}

DEFAULT_LABEL_PRESET = "canonical"


def _label_mapping(values: dict[str, str], preset: str) -> tp.Optional[dict[int, int]]:
    try:
        base = LABEL_PRESETS[preset]
    except KeyError:
        raise ConfigError(
            "Unknown label preset %r (choose from %s)"
            % (preset, ", ".join(sorted(LABEL_PRESETS)))
        ) from None
    mapping = {k: int(v) for k, v in (base or {}).items()}
    for key, value in values.items():
        if not key.startswith("label."):
            continue
        try:
            source_id = int(key[len("label.") :])
            class_id = int(value) if value.isdigit() else TAVR_CLASS_MAP.id_of(value)
        except (ValueError, UnknownClassError) as e:
            raise ConfigError("Invalid label mapping %s = %s: %s" % (key, value, e)) from e
        if class_id not in TAVR_CLASS_MAP:
            raise ConfigError("Label mapping %s targets unknown class %d" % (key, class_id))
        mapping[source_id] = class_id
    return mapping or None


@dataclass
class ConfigBundle:
    enrich: EnrichConfig = field(default_factory=EnrichConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    label_mapping: tp.Optional[dict[int, int]] = None
    label_preset: str = DEFAULT_LABEL_PRESET

    def to_dict(self) -> dict:
        def plain(obj):
            out = {}
            for f in fields(obj):
                v = getattr(obj, f.name)
                if isinstance(v, tuple):
                    v = [getattr(x, "label_name", x) for x in v]
                elif isinstance(v, enum.Enum):
                    v = v.value
                elif hasattr(v, "__dataclass_fields__"):
                    v = plain(v)
                out[f.name] = v
            return out

        return {
            "enrich": plain(self.enrich),
            "loss": plain(self.loss),
            "fit": plain(self.fit),
            "label_mapping": (
                {str(k): v for k, v in self.label_mapping.items()}
                if self.label_mapping
                else None
            ),
            "label_preset": self.label_preset,
        }


def load_config(
    path: tp.Optional[tp.Union[str, os.PathLike]] = None,
    values: tp.Optional[dict[str, str]] = None,
    label_preset: tp.Optional[str] = None,
) -> ConfigBundle:
    """Load a config file (or raw values) into the three domain configs.

    `label_preset` overrides the file's ``label_preset`` key.

    """
    if values is None:
        values = read_config(path) if path is not None else {}
    known = {f.name for cls in (EnrichConfig, LossConfig, FitConfig) for f in fields(cls)}
    known.add("label_preset")
    unknown = [k for k in values if k not in known and not k.startswith("label.")]
    if unknown:
        raise ConfigError("Unknown config keys: %s" % ", ".join(sorted(unknown)))

    preset = label_preset or values.get("label_preset", DEFAULT_LABEL_PRESET)
    loss = from_mapping(LossConfig, values)
    fit = from_mapping(FitConfig, values, base=FitConfig(loss=loss))
    bundle = ConfigBundle(
        enrich=from_mapping(EnrichConfig, values),
        loss=loss,
        fit=fit,
        label_mapping=_label_mapping(values, preset),
        label_preset=preset,
    )
    _logger.debug("Loaded config %s", bundle.to_dict())
    return bundle
