"""Named, typed property cells, dynamic containers and the JSON-lines codec.

A :class:`PropertyContainer` holds :class:`Property` cells keyed by name in
insertion order. Containers carry measurements (one cue per entry), local-map
scenes, and the parameters of configurable modules.

Serialized form: one JSON object per line,

    {"class": <name>, "id": <int>, "fields": {...}}

where nested containers and configurables are emitted as their own lines
before the object referring to them, and referenced as ``{"$ref": id}``.
The outermost object carries ``"root": true``. Composite scalar kinds are
tagged: ``{"$pose2": [x, y, theta]}`` and
``{"$cloud": {"points": [[x, y], ...], "normals": [[nx, ny] | null, ...] | null}}``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterator, Mapping, Optional

import numpy as np

from .geometry import PointCloud2, Pose2


class Kind(str, Enum):
    BOOL = "bool"
    INT = "int"
    FLOAT = "float"
    STRING = "string"
    FLOAT_VECTOR = "float-vector"
    POSE2 = "pose2"
    POINT_CLOUD_2 = "point-cloud-2"
    CONFIG_REFERENCE = "config-reference"
    CONTAINER = "container"


class PropertyError(Exception):
    pass


class NotFound(PropertyError, KeyError):
    pass


class KindMismatch(PropertyError, TypeError):
    pass


class DuplicateKindMismatch(KindMismatch):
    pass


class ParseError(PropertyError, ValueError):
    pass


class UnknownClass(PropertyError):
    pass


class DanglingReference(PropertyError):
    pass


def _check_value(kind: Kind, value: Any) -> Any:
    """Validate ``value`` against ``kind`` and return its stored form."""
    if kind is Kind.BOOL:
        if isinstance(value, (bool, np.bool_)):
            return bool(value)
    elif kind is Kind.INT:
        if isinstance(value, (int, np.integer)) and not isinstance(value, (bool, np.bool_)):
            return int(value)
    elif kind is Kind.FLOAT:
        # an integer literal is an exact float value, bools are not
        if isinstance(value, (int, float, np.integer, np.floating)) and not isinstance(value, (bool, np.bool_)):
            return float(value)
    elif kind is Kind.STRING:
        if isinstance(value, str):
            return value
    elif kind is Kind.FLOAT_VECTOR:
        if isinstance(value, (list, tuple, np.ndarray)):
            try:
                vec = tuple(float(v) for v in np.asarray(value, dtype=float).ravel())
            except (TypeError, ValueError):
                vec = None
            if vec is not None and not any(isinstance(v, bool) for v in value):
                return vec
    elif kind is Kind.POSE2:
        if isinstance(value, Pose2):
            return value
    elif kind is Kind.POINT_CLOUD_2:
        if isinstance(value, PointCloud2):
            return value
    elif kind is Kind.CONTAINER:
        if isinstance(value, PropertyContainer):
            return value
    elif kind is Kind.CONFIG_REFERENCE:
        if value is None or hasattr(value, "class_name"):
            return value
    raise KindMismatch(f"value {value!r} is not of kind {kind.value}")


@dataclass
class Property:
    name: str
    kind: Kind
    value: Any

    def __post_init__(self) -> None:
        if not isinstance(self.name, str) or not self.name:
            raise PropertyError("property name must be a non-empty string")
        self.kind = Kind(self.kind)
        self.value = _check_value(self.kind, self.value)


class PropertyContainer:
    """Ordered, name-unique collection of properties."""

    class_name = "PropertyContainer"

    def __init__(self, entries: Optional[Mapping[str, tuple]] = None):
        self._entries: dict[str, Property] = {}
        if entries:
            for name, (kind, value) in entries.items():
                self.put(name, kind, value)

    def put(self, name: str, kind, value) -> "PropertyContainer":
        kind = Kind(kind)
        prev = self._entries.get(name)
        if prev is not None and prev.kind is not kind:
            raise DuplicateKindMismatch(
                f"{name!r} already holds kind {prev.kind.value}, cannot store {kind.value}"
            )
        if prev is not None:
            prev.value = _check_value(kind, value)
        else:
            self._entries[name] = Property(name, kind, value)
        return self

    def get(self, name: str, kind=None) -> Any:
        try:
            prop = self._entries[name]
        except KeyError:
            raise NotFound(name) from None
        if kind is not None and prop.kind is not Kind(kind):
            raise KindMismatch(f"{name!r} has kind {prop.kind.value}, requested {Kind(kind).value}")
        return prop.value

    def property(self, name: str) -> Property:
        try:
            return self._entries[name]
        except KeyError:
            raise NotFound(name) from None

    def kind_of(self, name: str) -> Kind:
        return self.property(name).kind

    def remove(self, name: str) -> None:
        try:
            del self._entries[name]
        except KeyError:
            raise NotFound(name) from None

    def names(self) -> list[str]:
        return list(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[Property]:
        return iter(list(self._entries.values()))

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PropertyContainer):
            return NotImplemented
        if self.names() != other.names():
            return False
        for a, b in zip(self, other):
            if a.kind is not b.kind:
                return False
            if a.kind is Kind.CONFIG_REFERENCE:
                if (a.value is None) != (b.value is None):
                    return False
                if a.value is not None and a.value.class_name != b.value.class_name:
                    return False
            elif a.value != b.value:
                return False
        return True

    def __repr__(self) -> str:
        inner = ", ".join(f"{p.name}:{p.kind.value}" for p in self)
        return f"PropertyContainer({inner})"

    def copy(self) -> "PropertyContainer":
        """Shallow copy: new cells, shared values."""
        out = PropertyContainer()
        for p in self:
            out._entries[p.name] = Property(p.name, p.kind, p.value)
        return out


def put(container: PropertyContainer, name: str, kind, value) -> PropertyContainer:
    return container.put(name, kind, value)


def get(container: PropertyContainer, name: str, kind=None) -> Any:
    return container.get(name, kind)


# -- codec -----------------------------------------------------------------


@dataclass
class SerializedObject:
    class_name: str
    id: int
    fields: dict[str, Any]
    root: bool = False

    def to_line(self) -> str:
        obj: dict[str, Any] = {"class": self.class_name, "id": self.id, "fields": self.fields}
        if self.root:
            obj["root"] = True
        return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def encode_cloud(cloud: PointCloud2) -> dict:
    normals = None
    if cloud.normals is not None:
        normals = [None if math.isnan(n[0]) else n for n in cloud.normals.tolist()]
    return {"points": cloud.points.tolist(), "normals": normals}


def decode_cloud(obj: Any) -> PointCloud2:
    if not isinstance(obj, dict) or "points" not in obj:
        raise ParseError("malformed point cloud")
    pts = obj["points"]
    nrm = obj.get("normals")
    if nrm is not None:
        nrm = [[math.nan, math.nan] if n is None else n for n in nrm]
    try:
        return PointCloud2(np.asarray(pts, dtype=float).reshape(-1, 2),
                           None if nrm is None else np.asarray(nrm, dtype=float).reshape(-1, 2))
    except ValueError as exc:
        raise ParseError(str(exc)) from exc


def encode_scalar(kind: Kind, value: Any) -> Any:
    if kind in (Kind.BOOL, Kind.INT, Kind.STRING):
        return value
    if kind is Kind.FLOAT:
        if not math.isfinite(value):
            raise PropertyError("non-finite floats are not serializable")
        return value
    if kind is Kind.FLOAT_VECTOR:
        return list(value)
    if kind is Kind.POSE2:
        return {"$pose2": [value.x, value.y, value.theta]}
    if kind is Kind.POINT_CLOUD_2:
        return {"$cloud": encode_cloud(value)}
    raise PropertyError(f"kind {kind.value} is not a scalar kind")


class _Writer:
    def __init__(self) -> None:
        self.lines: list[str] = []
        self._ids: dict[int, int] = {}

    def emit(self, obj: Any, root: bool = False) -> int:
        key = id(obj)
        if key in self._ids:
            return self._ids[key]
        if isinstance(obj, PropertyContainer):
            container, class_name = obj, PropertyContainer.class_name
        else:
            container, class_name = obj.params, obj.class_name
        fields: dict[str, Any] = {}
        for prop in container:
            if prop.kind in (Kind.CONTAINER, Kind.CONFIG_REFERENCE):
                fields[prop.name] = None if prop.value is None else {"$ref": self.emit(prop.value)}
            else:
                fields[prop.name] = encode_scalar(prop.kind, prop.value)
        oid = len(self._ids)
        self._ids[key] = oid
        self.lines.append(SerializedObject(class_name, oid, fields, root).to_line())
        return oid


def serialize_objects(root: Any) -> str:
    """Serialize a container or configurable tree, children first."""
    w = _Writer()
    w.emit(root, root=True)
    return "\n".join(w.lines) + "\n"


def serialize_container(container: PropertyContainer) -> str:
    return serialize_objects(container)


def parse_records(text: str) -> list[SerializedObject]:
    """Parse JSON-lines text into raw records without resolving references."""
    records: list[SerializedObject] = []
    seen: set[int] = set()
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {lineno}: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise ParseError(f"line {lineno}: expected an object")
        cls, oid, fields = obj.get("class"), obj.get("id"), obj.get("fields")
        if not isinstance(cls, str) or not isinstance(fields, dict):
            raise ParseError(f"line {lineno}: missing class or fields")
        if not isinstance(oid, int) or isinstance(oid, bool) or oid < 0:
            raise ParseError(f"line {lineno}: id must be a non-negative integer")
        if oid in seen:
            raise ParseError(f"line {lineno}: duplicate id {oid}")
        seen.add(oid)
        records.append(SerializedObject(cls, oid, fields, bool(obj.get("root", False))))
    if not records:
        raise ParseError("no objects")
    return records


def root_record(records: list[SerializedObject]) -> SerializedObject:
    roots = [r for r in records if r.root]
    if len(roots) > 1:
        raise ParseError("more than one root object")
    return roots[0] if roots else records[-1]


def decode_field(raw: Any, resolve: Callable[[int], Any]) -> tuple[Kind, Any]:
    """Infer the kind of a serialized field value and decode it.

    ``resolve`` maps a reference id to the already-built object.
    """
    if isinstance(raw, bool):
        return Kind.BOOL, raw
    if isinstance(raw, int):
        return Kind.INT, raw
    if isinstance(raw, float):
        return Kind.FLOAT, raw
    if isinstance(raw, str):
        return Kind.STRING, raw
    if raw is None:
        return Kind.CONFIG_REFERENCE, None
    if isinstance(raw, list):
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
            raise ParseError("float-vector must hold numbers only")
        return Kind.FLOAT_VECTOR, tuple(float(v) for v in raw)
    if isinstance(raw, dict) and len(raw) == 1:
        (tag, payload), = raw.items()
        if tag == "$ref":
            if not isinstance(payload, int):
                raise ParseError("reference id must be an integer")
            target = resolve(payload)
            kind = Kind.CONTAINER if isinstance(target, PropertyContainer) else Kind.CONFIG_REFERENCE
            return kind, target
        if tag == "$pose2":
            if not (isinstance(payload, list) and len(payload) == 3):
                raise ParseError("pose2 needs three numbers")
            return Kind.POSE2, Pose2(*payload)
        if tag == "$cloud":
            return Kind.POINT_CLOUD_2, decode_cloud(payload)
    raise ParseError(f"cannot decode field value {raw!r}")


def deserialize_container(
    text: str,
    factories: Optional[Mapping[str, Callable[[PropertyContainer], Any]]] = None,
) -> Any:
    """Inverse of :func:`serialize_objects` for files in topological order.

    ``factories`` maps extra class names to callables building an object
    from its decoded field container; ``PropertyContainer`` is always known.
    """
    records = parse_records(text)
    built: dict[int, Any] = {}

    def resolve(ref: int) -> Any:
        if ref not in built:
            raise DanglingReference(f"id {ref} referenced before definition")
        return built[ref]

    for rec in records:
        if rec.class_name != PropertyContainer.class_name and (not factories or rec.class_name not in factories):
            raise UnknownClass(rec.class_name)
        c = PropertyContainer()
        for name, raw in rec.fields.items():
            kind, value = decode_field(raw, resolve)
            c.put(name, kind, value)
        built[rec.id] = c if rec.class_name == PropertyContainer.class_name else factories[rec.class_name](c)
    return built[root_record(records).id]
