"""Hypothesis generators shared by the test modules."""

import numpy as np
from hypothesis import strategies as st

from mcslam.geometry import PointCloud2, Pose2
from mcslam.properties import Kind, PropertyContainer

names = st.text(min_size=1, max_size=12)
real = st.floats(allow_nan=False, allow_infinity=False, width=64)
poses = st.builds(Pose2, st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(-10, 10))


@st.composite
def clouds(draw):
    n = draw(st.integers(0, 30))
    pts = draw(st.lists(st.tuples(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4)), min_size=n, max_size=n))
    pts = np.array(pts, dtype=float).reshape(-1, 2)
    mode = draw(st.sampled_from(["none", "all", "some"]))
    if mode == "none":
        return PointCloud2(pts)
    ang = np.array(draw(st.lists(st.floats(-4, 4), min_size=n, max_size=n)))
    nrm = np.stack([np.cos(ang), np.sin(ang)], axis=1).reshape(-1, 2)
    nrm /= np.hypot(nrm[:, 0], nrm[:, 1])[:, None] if n else 1.0
    if mode == "some" and n:
        mask = np.array(draw(st.lists(st.booleans(), min_size=n, max_size=n)))
        nrm[mask] = np.nan
    return PointCloud2(pts, nrm)


scalar_values = st.one_of(
    st.tuples(st.just(Kind.BOOL), st.booleans()),
    st.tuples(st.just(Kind.INT), st.integers(-(2 ** 53), 2 ** 53)),
    st.tuples(st.just(Kind.FLOAT), real),
    st.tuples(st.just(Kind.STRING), st.text(max_size=20)),
    st.tuples(st.just(Kind.FLOAT_VECTOR), st.lists(real, max_size=6).map(tuple)),
    st.tuples(st.just(Kind.POSE2), poses),
    st.tuples(st.just(Kind.POINT_CLOUD_2), clouds()),
)


def _container_from(entries):
    c = PropertyContainer()
    for name, (kind, value) in entries:
        if name not in c:
            c.put(name, kind, value)
    return c


def containers(max_depth: int = 2):
    leaf = st.lists(st.tuples(names, scalar_values), max_size=6).map(_container_from)
    return st.recursive(
        leaf,
        lambda children: st.lists(
            st.tuples(names, st.one_of(scalar_values, children.map(lambda c: (Kind.CONTAINER, c)))),
            max_size=5,
        ).map(_container_from),
        max_leaves=12,
    )
