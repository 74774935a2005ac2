import itertools
import math

import pytest
from hypothesis import given, settings, strategies as st

from mpnas.space import (BlockSpec, SearchSpaceSpec, SpaceError, compile_space, default_space,
                         path_count)


def singleton_block(**kw):
    base = dict(layer_choices=(1,), kernel_choices=(3,), expansion_choices=(1,), filter_choices=(8,),
                se_choices=(False,), stride=1)
    base.update(kw)
    return BlockSpec(**base)


def brute_force_count(spec):
    points = compile_space(spec)
    return sum(1 for _ in itertools.product(*[range(p.arity) for p in points]))


@st.composite
def small_specs(draw):
    n_blocks = draw(st.integers(1, 3))
    blocks = []
    for _ in range(n_blocks):
        stride = draw(st.sampled_from([1, 2]))
        layers = draw(st.lists(st.integers(1 if stride == 2 else 0, 3), min_size=1, max_size=2, unique=True))
        blocks.append(BlockSpec(
            layer_choices=tuple(layers),
            kernel_choices=tuple(draw(st.lists(st.sampled_from([1, 3, 5, 7]), min_size=1, max_size=2, unique=True))),
            expansion_choices=tuple(draw(st.lists(st.integers(1, 6), min_size=1, max_size=2, unique=True))),
            filter_choices=tuple(sorted(draw(st.lists(st.integers(1, 32), min_size=1, max_size=2, unique=True)))),
            se_choices=tuple(draw(st.lists(st.booleans(), min_size=1, max_size=2, unique=True))),
            stride=stride,
        ))
    return SearchSpaceSpec(tuple(blocks))


def test_all_singleton_choices_give_arity_one():
    points = compile_space(SearchSpaceSpec((singleton_block(),)))
    assert [p.arity for p in points] == [1] * 5
    assert path_count(SearchSpaceSpec((singleton_block(),))) == 1


def test_two_binary_blocks():
    block = BlockSpec((1, 2), (3, 5), (2, 4), (8, 16), (True, False))
    spec = SearchSpaceSpec((block, block))
    points = compile_space(spec)
    assert len(points) == 10
    assert path_count(spec) == brute_force_count(spec) == 1024


def test_arities_two_and_three():
    spec = SearchSpaceSpec((singleton_block(kernel_choices=(3, 5), expansion_choices=(1, 2, 3)),))
    assert sorted(p.arity for p in compile_space(spec)) == [1, 1, 1, 2, 3]
    assert path_count(spec) == 6


def test_default_space_count_matches_product_of_choice_list_lengths():
    spec = default_space()
    expected = 1
    for b in spec.blocks:
        for opts in (b.layer_choices, b.kernel_choices, b.expansion_choices, b.filter_choices, b.se_choices):
            expected *= len(opts)
    assert path_count(spec) == expected
    assert len(spec.blocks) == 4
    assert all(max(b.layer_choices) <= 2 for b in spec.blocks)
    assert all(len(b.filter_choices) == 2 for b in spec.blocks)


def test_path_count_is_exact_for_large_spaces():
    block = BlockSpec((1, 2, 3), (3, 5, 7), (1, 2, 3, 4, 5, 6), (8, 16, 24, 32), (False, True))
    spec = SearchSpaceSpec((block,) * 30)
    assert path_count(spec) == (3 * 3 * 6 * 4 * 2) ** 30
    assert isinstance(path_count(spec), int)


@pytest.mark.parametrize("kw,message", [
    (dict(expansion_choices=(7,)), "expansion"),
    (dict(expansion_choices=(0,)), "expansion"),
    (dict(kernel_choices=(4,)), "odd"),
    (dict(kernel_choices=()), "empty"),
    (dict(filter_choices=(16, 8)), "sorted"),
    (dict(filter_choices=(8, 8)), "duplicates"),
    (dict(layer_choices=(0,), stride=2), "layer count 0"),
    (dict(stride=3), "stride"),
])
def test_invalid_specs_are_rejected(kw, message):
    with pytest.raises(SpaceError, match=message):
        compile_space(SearchSpaceSpec((singleton_block(**kw),)))


def test_empty_space_is_rejected():
    with pytest.raises(SpaceError):
        compile_space(SearchSpaceSpec(()))


def test_layer_count_zero_allowed_at_stride_one():
    compile_space(SearchSpaceSpec((singleton_block(layer_choices=(0, 1)),)))


def test_dict_round_trip_and_digest():
    spec = default_space()
    again = SearchSpaceSpec.from_dict(spec.to_dict())
    assert again == spec
    assert again.digest() == spec.digest()


def test_from_dict_reports_missing_keys():
    with pytest.raises(SpaceError):
        SearchSpaceSpec.from_dict({"blocks": [{"kernel_choices": [3]}]})


@settings(max_examples=100, deadline=None)
@given(small_specs())
def test_compile_is_pure_and_ids_are_unique(spec):
    a, b = compile_space(spec), compile_space(spec)
    assert a == b
    assert len({p.id for p in a}) == len(a)
    assert all(p.arity >= 1 for p in a)
    assert len(a) == 5 * len(spec.blocks)


@settings(max_examples=50, deadline=None)
@given(small_specs())
def test_path_count_matches_brute_force(spec):
    assert path_count(spec) == brute_force_count(spec) == math.prod(p.arity for p in compile_space(spec))
