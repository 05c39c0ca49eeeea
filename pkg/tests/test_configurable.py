import pytest

from mcslam.configurable import (
    Configurable,
    CycleDetected,
    DuplicateClass,
    MissingRequiredSlot,
    ParamKindMismatch,
    Registry,
    Slot,
    UnknownParam,
    instantiate,
    write_config,
)
from mcslam.geometry import Pose2
from mcslam.pipeline import PRESETS, builtin_registry, preset
from mcslam.properties import DanglingReference, Kind, UnknownClass


class Leaf(Configurable):
    class_name = "Leaf"
    PARAMS = {"gain": (Kind.FLOAT, 1.0), "label": (Kind.STRING, "a"), "offset": (Kind.POSE2, Pose2())}


class Node(Configurable):
    class_name = "Node"
    PARAMS = {"count": (Kind.INT, 3)}
    SLOTS = {"child": Slot(Leaf), "extra": Slot(Leaf, optional=True), "many": Slot(Leaf, many=True)}


@pytest.fixture
def registry():
    return Registry().register(Leaf).register(Node)


def test_defaults_and_set():
    leaf = Leaf()
    assert leaf.param("gain") == 1.0
    leaf.set(gain=2.5)
    assert leaf.param("gain") == 2.5
    with pytest.raises(ParamKindMismatch):
        leaf.set(gain="fast")
    with pytest.raises(UnknownParam):
        leaf.set(speed=1.0)


def test_duplicate_class_name(registry):
    with pytest.raises(DuplicateClass):
        registry.register(Leaf)


def test_round_trip_preserves_params_and_sharing(registry):
    shared = Leaf(gain=0.5, label="shared", offset=Pose2(1, 2, 0.3))
    root = Node(count=7, child=shared, many={"x": shared, "y": Leaf(label="y")})
    text = write_config(root)
    back = instantiate(text, registry)
    assert back.param("count") == 7
    assert back.slot("child").param("offset") == Pose2(1, 2, 0.3)
    assert back.slot("many")["x"] is back.slot("child")
    assert back.slot("many")["y"].param("label") == "y"
    assert back.slot("extra") is None
    assert write_config(back) == text


def test_missing_required_slot(registry):
    text = write_config(Node(child=Leaf()))
    broken = text.replace('"child":{"$ref":', '"child_":{"$ref":')
    with pytest.raises(UnknownParam):
        instantiate(broken, registry)
    no_child = "\n".join(
        line.replace(',"child":{"$ref":0}', "").replace('"child":{"$ref":0},', "")
        for line in text.split("\n")
    )
    with pytest.raises(MissingRequiredSlot):
        instantiate(no_child, registry)


def test_unknown_class(registry):
    text = write_config(Node(child=Leaf())).replace('"class":"Leaf"', '"class":"Twig"')
    with pytest.raises(UnknownClass):
        instantiate(text, registry)


def test_kind_mismatch_on_load(registry):
    text = write_config(Leaf()).replace('"gain":1.0', '"gain":"high"')
    with pytest.raises(ParamKindMismatch):
        instantiate(text, registry)


def test_int_literal_accepted_for_float(registry):
    text = write_config(Leaf()).replace('"gain":1.0', '"gain":2')
    assert instantiate(text, registry).param("gain") == 2.0


def test_dangling_and_cycle(registry):
    dangling = '{"class":"Node","id":0,"fields":{"count":1,"child":{"$ref":9},"extra":null,' \
               '"many":{"$ref":5}},"root":true}\n'
    with pytest.raises(DanglingReference):
        instantiate(dangling, registry)
    cycle = (
        '{"class":"PropertyContainer","id":1,"fields":{"a":{"$ref":2}}}\n'
        '{"class":"PropertyContainer","id":2,"fields":{"b":{"$ref":1}}}\n'
        '{"class":"Node","id":3,"fields":{"many":{"$ref":1}},"root":true}\n'
    )
    with pytest.raises(CycleDetected):
        instantiate(cycle, registry)


def test_builtin_registry_size():
    assert len(builtin_registry()) >= 12


@pytest.mark.parametrize("name", PRESETS)
def test_presets_round_trip(name):
    text = write_config(preset(name))
    back = instantiate(text, builtin_registry())
    assert write_config(back) == text


def test_unknown_preset():
    with pytest.raises(ValueError):
        preset("lidar-triple")
