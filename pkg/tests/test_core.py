from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fos.core import (
    ATTRIBUTE_DIMENSIONS,
    PERSON_CARDINALITIES,
    UNSPECIFIED,
    AttributeVector,
    ForegroundInstance,
    Pattern,
    Rectangle,
    SchemaError,
    config_hash,
    cosine_similarity,
    l2_normalize,
    l2_normalize_rows,
    outer_product_flatten,
    parse_schema,
    same_pattern,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(1, 16), elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3)


def test_bundled_schema_cardinalities(schema):
    assert schema.names == ATTRIBUTE_DIMENSIONS
    for dim in schema.dimensions:
        assert len(dim.values) == PERSON_CARDINALITIES[dim.name]
        assert UNSPECIFIED not in dim.values
    assert schema.dimension("orientation").mandatory and schema.dimension("truncation").mandatory
    assert not schema.dimension("sport").mandatory


def test_schema_round_trip_and_digest(schema):
    again = parse_schema(schema.to_dict())
    assert again == schema
    assert again.digest() == schema.digest()


def test_schema_rejects_wrong_cardinality(schema):
    doc = schema.to_dict()
    doc["dimensions"]["state"]["values"] = ["static", "dynamic"]
    with pytest.raises(SchemaError):
        parse_schema(doc)


def test_schema_rejects_listed_unspecified(schema):
    doc = schema.to_dict()
    doc["dimensions"]["state"]["values"] = ["static", "dynamic", UNSPECIFIED]
    with pytest.raises(SchemaError):
        parse_schema(doc)


def test_schema_requires_mandatory_orientation(schema):
    doc = schema.to_dict()
    doc["dimensions"]["orientation"]["mandatory"] = False
    with pytest.raises(SchemaError):
        parse_schema(doc)


def test_attribute_vector_mandatory_dimensions():
    with pytest.raises(ValueError):
        AttributeVector(UNSPECIFIED, "full-body")
    with pytest.raises(ValueError):
        AttributeVector("front", UNSPECIFIED)


def test_attribute_vector_validation(schema):
    AttributeVector("front", "full-body", sport="tennis").validate(schema)
    with pytest.raises(SchemaError):
        AttributeVector("front", "full-body", sport="chess").validate(schema)


def test_pattern_key_round_trip():
    a = AttributeVector("left", "upper-body", motion="running")
    assert AttributeVector.from_key(a.key()) == a
    assert AttributeVector.from_dict(a.to_dict()) == a
    assert same_pattern(a, AttributeVector.from_key(a.key()))
    assert not same_pattern(a, AttributeVector("left", "upper-body"))


def test_foreground_pattern_id_follows_attributes():
    attrs = AttributeVector("front", "full-body")
    fg = ForegroundInstance("a", np.ones((4, 4, 3)), attrs)
    assert fg.pattern_id == attrs.key()
    with pytest.raises(ValueError):
        ForegroundInstance("b", np.ones((4, 4, 3)), attrs, pattern_id="other")
    with pytest.raises(ValueError):
        ForegroundInstance("c", np.ones((4, 5, 3)), attrs)


def test_pattern_members_unique_and_nonempty():
    attrs = AttributeVector("front", "full-body")
    with pytest.raises(ValueError):
        Pattern(attrs.key(), attrs, ())
    with pytest.raises(ValueError):
        Pattern(attrs.key(), attrs, ("a", "a"))


def test_rectangle_clamps_into_unit_square():
    r = Rectangle(0.05, 0.95, 0.3, 0.2)
    x0, y0, x1, y1 = r.corners()
    assert x0 == pytest.approx(0.0) and y1 == pytest.approx(1.0)
    with pytest.raises(ValueError):
        Rectangle(0.5, 0.5, 0.0, 0.1)
    assert Rectangle(0.5, 0.5, 2.0, 0.5).w == 1.0


@given(vectors)
def test_l2_normalize_unit_and_idempotent(v):
    n = l2_normalize(v)
    assert abs(np.linalg.norm(n) - 1.0) <= 1e-6
    np.testing.assert_allclose(l2_normalize(n), n, atol=1e-9)


def test_l2_normalize_zero_raises():
    with pytest.raises(ValueError):
        l2_normalize(np.zeros(3))
    with pytest.raises(ValueError):
        l2_normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))


@given(vectors, st.data())
def test_cosine_symmetric_bounded(v, data):
    w = data.draw(arrays(np.float64, v.shape, elements=finite).filter(lambda x: np.linalg.norm(x) > 1e-3))
    a, b = l2_normalize(v), l2_normalize(w)
    s = cosine_similarity(a, b)
    assert -1.0 <= s <= 1.0
    assert s == cosine_similarity(b, a)
    assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-9)


def test_cosine_rejects_bad_input():
    with pytest.raises(ValueError):
        cosine_similarity(np.array([1.0, 0.0]), np.array([1.0, 0.0, 0.0]))
    with pytest.raises(ValueError):
        cosine_similarity(np.array([2.0, 0.0]), np.array([1.0, 0.0]))


def test_outer_product_layout_major_order():
    layout = np.array([1.0, 2.0, 3.0, 4.0])
    v = np.array([10.0, 20.0, 30.0])
    out = outer_product_flatten(layout, v)
    assert out.shape == (12,)
    for i in range(4):
        for j in range(3):
            assert out[i * 3 + j] == layout[i] * v[j]
    with pytest.raises(ValueError):
        outer_product_flatten(np.ones(3), v)


@settings(max_examples=50)
@given(arrays(np.float64, 4, elements=finite), vectors, st.floats(-10, 10, allow_nan=False))
def test_outer_product_bilinear(layout, v, scale):
    np.testing.assert_allclose(outer_product_flatten(scale * layout, v), scale * outer_product_flatten(layout, v),
                               rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(outer_product_flatten(layout, scale * v), scale * outer_product_flatten(layout, v),
                               rtol=1e-12, atol=1e-9)


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
