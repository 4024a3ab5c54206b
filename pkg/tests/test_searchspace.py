import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsnas.errors import ConfigError, ParseError
from tsnas.searchspace import (
    FIXTURE_TASKS,
    SLOTS,
    VANILLA_BLOCK,
    ActivationKind,
    AttentionKind,
    BlockSpec,
    EncodingKind,
    SearchSpaceConfig,
    cardinality,
    enumerate_blocks,
    ffn_width,
    full_space,
    load_fixture,
    parse_spec,
    reduced_space,
    sample_spec,
    serialize_spec,
    slot_values,
    vanilla_spec,
)


def test_per_block_count_is_2500():
    assert full_space().per_block_count() == 5 * 5 * 5 * 5 * 4 == 2500
    assert sum(1 for _ in enumerate_blocks(full_space())) == 2500


def test_cardinality_macro_and_micro():
    assert cardinality(full_space(), 1) == 2500
    assert cardinality(full_space(), 3) == 15_625_000_000
    assert cardinality(reduced_space("s1"), 3) == 2500
    assert cardinality(reduced_space("s2"), 3) == 500
    assert cardinality(reduced_space("s3"), 3) == 20
    assert cardinality(reduced_space("s4"), 3) == 1


def test_cardinality_rejects_zero_blocks():
    with pytest.raises(ConfigError):
        cardinality(full_space(), 0)


def test_reduced_spaces_are_nested():
    chain = [full_space()] + [reduced_space(n) for n in ("s1", "s2", "s3", "s4")]
    for outer, inner in itertools.pairwise(chain):
        for slot in SLOTS:
            assert set(inner.allowed[slot]) <= set(outer.allowed[slot])
    s4 = reduced_space("s4")
    assert [b for b in enumerate_blocks(s4)] == [VANILLA_BLOCK]
    assert s4.contains(vanilla_spec(3))


def test_unknown_space_name():
    with pytest.raises(ConfigError):
        reduced_space("s5")


def test_empty_allowed_set_rejected():
    with pytest.raises(ConfigError):
        SearchSpaceConfig(allowed={"attn": ()})


def test_invalid_candidate_rejected():
    with pytest.raises(ValueError):
        SearchSpaceConfig(allowed={"k": (3.0,)})


def test_allowed_order_canonicalized():
    cfg = SearchSpaceConfig(allowed={"act": ("GeLU", "ReLU")})
    assert cfg.allowed["act"] == (ActivationKind.RELU, ActivationKind.GELU)


def test_space_dict_roundtrip():
    cfg = reduced_space("s2")
    assert SearchSpaceConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_micro_contains_requires_identical_blocks():
    blk = BlockSpec("Conv_1", "Skip", "EP_Attn", "ReLU", 1.0)
    spec = vanilla_spec(2)
    mixed = type(spec)((VANILLA_BLOCK, blk))
    assert full_space().contains(mixed)
    assert not reduced_space("s1").contains(mixed)


def test_ffn_width():
    assert ffn_width(256, 0.5) == 128
    assert ffn_width(256, 4.0) == 1024
    with pytest.raises(ConfigError):
        ffn_width(3, 0.5)


def test_vanilla_serialization_is_canonical():
    text = serialize_spec(vanilla_spec(1))
    assert text == ('{"blocks":[{"enc_attn":"Skip","enc_ffn":"Skip","attn":"Dot_Attn",'
                    '"act":"ReLU","k":4.0}]}')


@pytest.mark.parametrize("text, path", [
    ('{"blocks":[{"enc_attn":"Skip","enc_ffn":"Skip","attn":"Dot_Attn","act":"ReLU","k":3}]}', "$.blocks[0].k"),
    ('{"blocks":[{"enc_attn":"Skip","enc_ffn":"Skip","attn":"Dot","act":"ReLU","k":4}]}', "$.blocks[0].attn"),
    ('{"blocks":[{"enc_ffn":"Skip","attn":"Dot_Attn","act":"ReLU","k":4}]}', "$.blocks[0].enc_attn"),
    ('{"blocks":[]}', "$.blocks"),
    ('{"blocks":[{"enc_attn":"Skip","enc_ffn":"Skip","attn":"Dot_Attn","act":"ReLU","k":4,"x":1}]}',
     "$.blocks[0].x"),
    ('[1]', "$"),
    ('{"blocks":', "$"),
])
def test_parse_errors_carry_json_path(text, path):
    with pytest.raises(ParseError) as info:
        parse_spec(text)
    assert info.value.path == path


def test_parse_rejects_boolean_k():
    with pytest.raises(ParseError):
        parse_spec('{"blocks":[{"enc_attn":"Skip","enc_ffn":"Skip","attn":"Dot_Attn","act":"ReLU","k":true}]}')


def test_parse_accepts_integer_k():
    spec = parse_spec('{"blocks":[{"enc_attn":"Skip","enc_ffn":"Skip","attn":"Dot_Attn","act":"ReLU","k":4}]}')
    assert spec == vanilla_spec(1)


@pytest.mark.parametrize("task", FIXTURE_TASKS)
def test_fixtures_load_and_lie_in_full_space(task):
    spec = load_fixture(task)
    assert len(spec.blocks) == 3
    assert full_space().contains(spec)


def test_unknown_fixture():
    with pytest.raises(ConfigError):
        load_fixture("Weather")


block_strategy = st.builds(
    BlockSpec,
    enc_attn=st.sampled_from(list(EncodingKind)),
    enc_ffn=st.sampled_from(list(EncodingKind)),
    attn=st.sampled_from(list(AttentionKind)),
    act=st.sampled_from(list(ActivationKind)),
    k=st.sampled_from(slot_values("k")),
)


@settings(max_examples=1000, deadline=None)
@given(st.lists(block_strategy, min_size=1, max_size=4))
def test_serialize_parse_roundtrip(blocks):
    spec = type(vanilla_spec(1))(tuple(blocks))
    text = serialize_spec(spec)
    assert parse_spec(text) == spec
    assert serialize_spec(parse_spec(text)) == text


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["full", "s1", "s2", "s3", "s4"]), st.integers(1, 4))
def test_samples_lie_in_their_space(seed, name, n):
    cfg = reduced_space(name)
    spec = sample_spec(cfg, n, np.random.default_rng(seed))
    assert len(spec.blocks) == n
    assert cfg.contains(spec)
