"""Configurable modules, the class registry and config-file instantiation.

Every processing module derives from :class:`Configurable`. Its parameters
live in a :class:`~mcslam.properties.PropertyContainer` (``self.params``)
next to its sub-module slots, so the whole module tree serializes with the
same JSON-lines codec as any other container. A config file is exactly that
serialization; :func:`instantiate` rebuilds the tree from it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, ClassVar, Iterable, Optional, Union

from .properties import (
    DanglingReference,
    Kind,
    PropertyContainer,
    PropertyError,
    SerializedObject,
    UnknownClass,
    decode_field,
    parse_records,
    root_record,
    serialize_objects,
)


class ConfigError(Exception):
    pass


class DuplicateClass(ConfigError):
    pass


class MissingRequiredSlot(ConfigError):
    pass


class CycleDetected(ConfigError):
    pass


class ParamKindMismatch(ConfigError):
    pass


class UnknownParam(ConfigError):
    pass


@dataclass(frozen=True)
class Slot:
    """A sub-module reference. ``many`` slots hold a named set of modules."""

    base: type = object
    optional: bool = False
    many: bool = False


class Configurable:
    """Base class for modules that expose their parameters as properties.

    Subclasses declare ``PARAMS`` (name -> (kind, default)) and ``SLOTS``
    (name -> :class:`Slot`) and may override :meth:`configure` to cache
    parameter values after they change.
    """

    class_name: ClassVar[str] = "Configurable"
    PARAMS: ClassVar[dict[str, tuple[Kind, Any]]] = {}
    SLOTS: ClassVar[dict[str, Slot]] = {}

    def __init__(self, **kwargs: Any) -> None:
        self.params = PropertyContainer()
        for name, (kind, value) in self.PARAMS.items():
            self.params.put(name, kind, value)
        for name, slot in self.SLOTS.items():
            if slot.many:
                self.params.put(name, Kind.CONTAINER, PropertyContainer())
            else:
                self.params.put(name, Kind.CONFIG_REFERENCE, None)
        for name, value in kwargs.items():
            self._assign(name, value)
        self.configure()

    def configure(self) -> None:
        """Hook run after parameters change."""

    def _assign(self, name: str, value: Any) -> None:
        if name in self.SLOTS:
            slot = self.SLOTS[name]
            if slot.many:
                if isinstance(value, PropertyContainer):
                    members = {p.name: p.value for p in value}
                else:
                    members = dict(value)
                c = PropertyContainer()
                for key, mod in members.items():
                    if not isinstance(mod, slot.base):
                        raise ParamKindMismatch(
                            f"{self.class_name}.{name}[{key}] expects {slot.base.__name__}, got {type(mod).__name__}"
                        )
                    c.put(key, Kind.CONFIG_REFERENCE, mod)
                self.params.put(name, Kind.CONTAINER, c)
            else:
                if value is not None and not isinstance(value, slot.base):
                    raise ParamKindMismatch(
                        f"{self.class_name}.{name} expects {slot.base.__name__}, got {type(value).__name__}"
                    )
                self.params.put(name, Kind.CONFIG_REFERENCE, value)
        elif name in self.PARAMS:
            try:
                self.params.put(name, self.PARAMS[name][0], value)
            except PropertyError as exc:
                raise ParamKindMismatch(f"{self.class_name}.{name}: {exc}") from exc
        else:
            raise UnknownParam(f"{self.class_name} has no parameter or slot {name!r}")

    def set(self, **kwargs: Any) -> "Configurable":
        for name, value in kwargs.items():
            self._assign(name, value)
        self.configure()
        return self

    def param(self, name: str) -> Any:
        return self.params.get(name)

    def slot(self, name: str) -> Any:
        value = self.params.get(name)
        if self.SLOTS[name].many:
            return {p.name: p.value for p in value}
        return value

    def check_slots(self) -> None:
        for name, slot in self.SLOTS.items():
            value = self.params.get(name)
            empty = len(value) == 0 if slot.many else value is None
            if empty and not slot.optional:
                raise MissingRequiredSlot(f"{self.class_name}.{name} is required")

    def __repr__(self) -> str:
        return f"<{self.class_name}>"


@dataclass
class ConfigurableSpec:
    class_name: str
    factory: type
    params: PropertyContainer
    slots: dict[str, Slot] = field(default_factory=dict)


class Registry:
    """Maps class names to constructible configurable classes."""

    def __init__(self) -> None:
        self._specs: dict[str, ConfigurableSpec] = {}

    def register(self, cls: type, class_name: Optional[str] = None) -> "Registry":
        name = class_name or cls.class_name
        if name in self._specs or name == PropertyContainer.class_name:
            raise DuplicateClass(name)
        defaults = PropertyContainer()
        for pname, (kind, value) in cls.PARAMS.items():
            defaults.put(pname, kind, value)
        self._specs[name] = ConfigurableSpec(name, cls, defaults, dict(cls.SLOTS))
        return self

    def spec(self, class_name: str) -> ConfigurableSpec:
        try:
            return self._specs[class_name]
        except KeyError:
            raise UnknownClass(class_name) from None

    def create(self, class_name: str, **kwargs: Any) -> Configurable:
        return self.spec(class_name).factory(**kwargs)

    def classes(self) -> list[str]:
        return list(self._specs)

    def __contains__(self, class_name: str) -> bool:
        return class_name in self._specs

    def __len__(self) -> int:
        return len(self._specs)


def register(registry: Registry, cls: type, class_name: Optional[str] = None) -> Registry:
    return registry.register(cls, class_name)


def write_config(root: Configurable) -> str:
    """Serialize a module tree; referenced modules precede their referrers."""
    return serialize_objects(root)


def _build(records: list[SerializedObject], registry: Registry) -> Any:
    by_id = {r.id: r for r in records}
    built: dict[int, Any] = {}
    state: dict[int, str] = {}

    def refs_of(rec: SerializedObject) -> Iterable[int]:
        for raw in rec.fields.values():
            if isinstance(raw, dict) and set(raw) == {"$ref"}:
                yield raw["$ref"]

    def build(oid: int) -> Any:
        if oid in built:
            return built[oid]
        if oid not in by_id:
            raise DanglingReference(f"id {oid} is never defined")
        if state.get(oid) == "visiting":
            raise CycleDetected(f"reference cycle through id {oid}")
        state[oid] = "visiting"
        rec = by_id[oid]
        for child in refs_of(rec):
            if not isinstance(child, int):
                raise DanglingReference(f"bad reference {child!r}")
            build(child)
        state[oid] = "done"
        built[oid] = _make(rec, built, registry)
        return built[oid]

    return build(root_record(records).id)


def _make(rec: SerializedObject, built: dict[int, Any], registry: Registry) -> Any:
    resolve = built.__getitem__
    if rec.class_name == PropertyContainer.class_name:
        c = PropertyContainer()
        for name, raw in rec.fields.items():
            kind, value = decode_field(raw, resolve)
            c.put(name, kind, value)
        return c
    spec = registry.spec(rec.class_name)
    obj = spec.factory()
    for name, raw in rec.fields.items():
        kind, value = decode_field(raw, resolve)
        if name in spec.slots:
            slot = spec.slots[name]
            expected = Kind.CONTAINER if slot.many else Kind.CONFIG_REFERENCE
            if kind is not expected:
                raise ParamKindMismatch(f"{rec.class_name}.{name}: expected {expected.value}, got {kind.value}")
            obj._assign(name, value)
        elif name in spec.params:
            declared = spec.params.kind_of(name)
            if kind is not declared and not (kind is Kind.INT and declared is Kind.FLOAT):
                raise ParamKindMismatch(f"{rec.class_name}.{name}: expected {declared.value}, got {kind.value}")
            obj._assign(name, value)
        else:
            raise UnknownParam(f"{rec.class_name} has no parameter or slot {name!r}")
    obj.check_slots()
    obj.configure()
    return obj


def instantiate(config: Union[str, list[SerializedObject]], registry: Registry) -> Configurable:
    """Build the module tree described by a config file."""
    records = parse_records(config) if isinstance(config, str) else config
    return _build(records, registry)
