"""
Small helpers for reading scenario sections with JSON-path diagnostics.

Every section parser (topology, channel model, scheduler, netsim, FL,
routing) goes through these so a bad value is always reported together with
the place it came from.
"""

import math
from enum import Enum
from typing import Any, Dict, Iterable, Optional, Type, TypeVar

from .exceptions import ConfigError

E = TypeVar("E", bound=Enum)

_MISSING = object()


def expect_mapping(value: Any, path: str) -> Dict[str, Any]:
    """Ensure a value is a JSON object."""
    if not isinstance(value, dict):
        raise ConfigError(f"expected an object, got {type(value).__name__}", path)
    return value


def reject_unknown(data: Dict[str, Any], allowed: Iterable[str], path: str) -> None:
    """Raise on the first key that is not part of the schema."""
    allowed = set(allowed)
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown field '{key}'", f"{path}.{key}")


def get_field(data: Dict[str, Any], key: str, path: str, default: Any = _MISSING) -> Any:
    """Fetch a field, raising when it is required and missing."""
    if key in data:
        return data[key]
    if default is _MISSING:
        raise ConfigError(f"missing required field '{key}'", path)
    return default


def get_str(data: Dict[str, Any], key: str, path: str, default: Any = _MISSING) -> Optional[str]:
    value = get_field(data, key, path, default)
    if value is None and default is None:
        return None
    if not isinstance(value, str) or not value:
        raise ConfigError("expected a non-empty string", f"{path}.{key}")
    return value


def get_number(data: Dict[str, Any], key: str, path: str, default: Any = _MISSING,
               minimum: Optional[float] = None, maximum: Optional[float] = None,
               allow_none: bool = False) -> Optional[float]:
    """
    Fetch a finite real number, optionally bounded (inclusive).

    Args:
        data: Section being read
        key: Field name
        path: JSON path of the section
        default: Value used when the field is absent
        minimum: Inclusive lower bound
        maximum: Inclusive upper bound
        allow_none: Accept an explicit null

    Returns:
        The value as float (or None)
    """
    value = get_field(data, key, path, default)
    if value is None and (allow_none or default is None):
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", f"{path}.{key}")
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError("value must be finite", f"{path}.{key}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"value {value} is below {minimum}", f"{path}.{key}")
    if maximum is not None and value > maximum:
        raise ConfigError(f"value {value} is above {maximum}", f"{path}.{key}")
    return value


def get_int(data: Dict[str, Any], key: str, path: str, default: Any = _MISSING,
            minimum: Optional[int] = None, allow_none: bool = False) -> Optional[int]:
    value = get_field(data, key, path, default)
    if value is None and (allow_none or default is None):
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}", f"{path}.{key}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"value {value} is below {minimum}", f"{path}.{key}")
    return value


def get_bool(data: Dict[str, Any], key: str, path: str, default: Any = _MISSING) -> bool:
    value = get_field(data, key, path, default)
    if not isinstance(value, bool):
        raise ConfigError(f"expected true or false, got {value!r}", f"{path}.{key}")
    return value


def get_enum(data: Dict[str, Any], key: str, path: str, enum_type: Type[E],
             default: Any = _MISSING) -> E:
    """Fetch a field and convert it to an enum member by value."""
    value = get_field(data, key, path, default)
    if isinstance(value, enum_type):
        return value
    try:
        return enum_type(value)
    except ValueError:
        choices = ", ".join(repr(m.value) for m in enum_type)
        raise ConfigError(f"invalid value {value!r}; expected one of {choices}", f"{path}.{key}") from None
