import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcslam.geometry import PointCloud2, Pose2
from mcslam.properties import (
    DanglingReference,
    DuplicateKindMismatch,
    Kind,
    KindMismatch,
    NotFound,
    ParseError,
    PropertyContainer,
    UnknownClass,
    deserialize_container,
    get,
    put,
    serialize_container,
)

from .strategies import containers


def test_put_get_examples():
    cloud = PointCloud2([[1, 2], [3, 4]])
    c = put(PropertyContainer(), "front_scan", Kind.POINT_CLOUD_2, cloud)
    assert len(c) == 1
    assert get(c, "front_scan", Kind.POINT_CLOUD_2) is cloud

    c = PropertyContainer()
    put(c, "x", Kind.INT, 3)
    with pytest.raises(DuplicateKindMismatch):
        put(c, "x", Kind.FLOAT, 1.0)


def test_get_errors():
    c = PropertyContainer()
    with pytest.raises(NotFound):
        get(c, "missing", Kind.INT)
    put(c, "x", Kind.FLOAT, 2.5)
    assert get(c, "x", Kind.FLOAT) == 2.5
    with pytest.raises(KindMismatch):
        get(c, "x", Kind.STRING)


def test_kind_checked_on_put():
    c = PropertyContainer()
    with pytest.raises(KindMismatch):
        put(c, "flag", Kind.BOOL, 1)
    with pytest.raises(KindMismatch):
        put(c, "n", Kind.INT, True)
    with pytest.raises(KindMismatch):
        put(c, "p", Kind.POSE2, (1, 2, 3))


def test_replacement_keeps_position():
    c = PropertyContainer()
    put(c, "a", Kind.INT, 1)
    put(c, "b", Kind.INT, 2)
    put(c, "a", Kind.INT, 5)
    assert c.names() == ["a", "b"]
    assert get(c, "a") == 5


def test_serialize_empty():
    text = serialize_container(PropertyContainer())
    lines = text.splitlines()
    assert len(lines) == 1
    obj = json.loads(lines[0])
    assert obj["class"] == "PropertyContainer" and obj["fields"] == {}
    assert deserialize_container(text) == PropertyContainer()


def test_serialize_float_field():
    c = put(PropertyContainer(), "x", Kind.FLOAT, 1.5)
    obj = json.loads(serialize_container(c).splitlines()[0])
    assert obj["fields"]["x"] == 1.5


def test_nested_containers_precede_referrers():
    inner = put(PropertyContainer(), "v", Kind.INT, 1)
    outer = put(PropertyContainer(), "inner", Kind.CONTAINER, inner)
    put(outer, "pose", Kind.POSE2, Pose2(1, 2, 3))
    lines = [json.loads(l) for l in serialize_container(outer).splitlines()]
    assert [l["id"] for l in lines] == [0, 1]
    assert lines[1]["fields"]["inner"] == {"$ref": 0}
    assert lines[1]["root"] is True
    assert deserialize_container(serialize_container(outer)) == outer


def test_dangling_reference():
    text = json.dumps({"class": "PropertyContainer", "id": 0, "fields": {"c": {"$ref": 99}}})
    with pytest.raises(DanglingReference):
        deserialize_container(text)


def test_parse_errors():
    with pytest.raises(ParseError):
        deserialize_container("{not json")
    with pytest.raises(UnknownClass):
        deserialize_container(json.dumps({"class": "Nope", "id": 0, "fields": {}}))


def test_large_cloud_round_trip():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(1000, 2)) * 10
    ang = rng.uniform(-np.pi, np.pi, 1000)
    nrm = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    nrm /= np.hypot(nrm[:, 0], nrm[:, 1])[:, None]
    nrm[::7] = np.nan
    cloud = PointCloud2(pts, nrm)
    c = put(PropertyContainer(), "scan", Kind.POINT_CLOUD_2, cloud)
    back = get(deserialize_container(serialize_container(c)), "scan", Kind.POINT_CLOUD_2)
    # element-wise comparison
    assert back.points.shape == pts.shape
    for a, b in zip(back.points, pts):
        assert a[0] == b[0] and a[1] == b[1]
    np.testing.assert_array_equal(back.normals, cloud.normals)


@settings(max_examples=200, deadline=None)
@given(containers())
def test_round_trip_property(c):
    text = serialize_container(c)
    back = deserialize_container(text)
    assert back == c
    assert serialize_container(back) == text


@given(containers(), st.text(min_size=1, max_size=8), st.floats(allow_nan=False, allow_infinity=False))
def test_get_put_identity(c, name, value):
    if name in c and c.kind_of(name) is not Kind.FLOAT:
        with pytest.raises(DuplicateKindMismatch):
            put(c, name, Kind.FLOAT, value)
        return
    put(c, name, Kind.FLOAT, value)
    assert get(c, name, Kind.FLOAT) == value
    assert len(set(c.names())) == len(c.names())
