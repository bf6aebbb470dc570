import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import base_digits, rf_recursion
from rfcnet.autodiff import Tensor, ce_per_pixel, grad_check, softmax_channels
from rfcnet.errors import ArgumentError, ConfigError, DimensionError
from rfcnet.net import (
    PRESETS,
    ChainDescriptor,
    RfcConfig,
    build_rfc_net,
    empirical_rf_probe,
    enumerate_chains,
    isolate_strong_paths,
    receptive_field,
)
from rfcnet.training import ohem_ce


def tiny(**kw):
    base = dict(m=2, kernels=(3, 3), depth=1, width=4, stem_widths=(4, 4), num_classes=2)
    base.update(kw)
    return RfcConfig(**base)


# --- config ----------------------------------------------------------------


def test_presets_pin_m_and_kernels():
    assert PRESETS == {"a": (3, (3, 5, 7)), "b": (3, (3, 3, 3)), "c": (2, (3, 5)), "d": (2, (3, 3))}
    cfg = RfcConfig.from_preset("a")
    assert (cfg.m, cfg.kernels, cfg.depth, cfg.width, cfg.stem_widths) == (3, (3, 5, 7), 3, 16, (16, 16))


def test_config_errors_list_every_failure():
    with pytest.raises(ConfigError) as info:
        RfcConfig(m=3, kernels=(3, 4), depth=0, width=8, stem_widths=(8, 4))
    msg = str(info.value)
    for part in ("len(kernels) == m", "odd", "depth", "stem output width"):
        assert part in msg


def test_config_is_an_argument_error():
    with pytest.raises(ArgumentError):
        RfcConfig(m=1, kernels=(3,))


def test_unknown_preset():
    with pytest.raises(ConfigError):
        RfcConfig.from_preset("z")


def test_config_items_roundtrip():
    cfg = RfcConfig.from_preset("c", depth=2, width=5, merge="add", include_bias=False, seed=9)
    assert RfcConfig.from_items(dict(cfg.to_items())) == cfg


# --- construction ----------------------------------------------------------


def test_smallest_tree():
    model = build_rfc_net(tiny())
    assert len(model.tree) == 1
    assert model.group_counts() == [1, 2]


def test_group_node_count_m3_depth3():
    model = build_rfc_net(RfcConfig.from_preset("b", width=2))
    assert sum(model.group_counts()) == 40
    assert sum(len(layer.groups) for layer in model.tree) == 39


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_group_count_law(preset):
    cfg = RfcConfig.from_preset(preset, width=3, depth=2)
    model = build_rfc_net(cfg)
    x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 16, 12)))
    for level, layer in enumerate(model.tree):
        assert layer.spec.n_l == cfg.m ** level
        assert layer.spec.n_next == cfg.m ** (level + 1)
        assert layer.spec.in_group == layer.spec.out_group == cfg.width
    leaves = model.leaf_groups(x)
    assert len(leaves) == cfg.m ** cfg.depth
    assert all(g.shape == (1, cfg.width, 4, 3) for g in leaves)


def test_child_kernel_assignment():
    cfg = RfcConfig.from_preset("a", width=1, depth=2)
    model = build_rfc_net(cfg)
    for layer in model.tree:
        for i, g in enumerate(layer.groups):
            assert g.strong.k == cfg.kernels[i % cfg.m]
            assert layer.parents[i] == i // cfg.m


def test_parameter_names_are_unique_and_stable():
    model = build_rfc_net(tiny(depth=2))
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert names[0] == "stem.conv1.weight"
    assert "tree.1.g3.loose.weight" in names
    assert names[-1] == "head.bias"


def test_build_is_deterministic():
    a, b = build_rfc_net(tiny(seed=3)), build_rfc_net(tiny(seed=3))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    c = build_rfc_net(tiny(seed=4))
    assert not np.array_equal(a.head.weight.data, c.head.weight.data)


# --- forward ---------------------------------------------------------------


def test_output_shape_preset_a_224():
    model = build_rfc_net(RfcConfig.from_preset("a"))
    assert model(Tensor(np.zeros((1, 3, 224, 224), dtype=np.float32))).shape == (1, 2, 224, 224)


def test_output_shape_tiny_64():
    model = build_rfc_net(tiny(depth=2))
    out = model(Tensor(np.random.default_rng(0).random((2, 3, 64, 64))))
    assert out.shape == (2, 2, 64, 64)


def test_zero_network_gives_uniform_softmax():
    model = build_rfc_net(tiny())
    for p in model.parameters():
        p.data[...] = 0
    x = Tensor(np.random.default_rng(0).random((1, 3, 16, 16)))
    logits = model(x)
    assert np.all(logits.data == 0)
    np.testing.assert_allclose(softmax_channels(logits).data, 0.5)
    loss = ce_per_pixel(logits, np.zeros((1, 16, 16), dtype=np.int64))
    np.testing.assert_allclose(loss.data, math.log(2), rtol=1e-6)


@pytest.mark.parametrize("shape", [(1, 3, 18, 16), (1, 3, 16, 14), (1, 4, 16, 16), (3, 16, 16)])
def test_bad_input_shapes(shape):
    with pytest.raises(DimensionError):
        build_rfc_net(tiny())(Tensor(np.zeros(shape)))


def test_astype_and_state_dict():
    model = build_rfc_net(tiny())
    m64 = model.astype(np.float64)
    assert m64.dtype == np.float64 and model.dtype == np.float32
    state = model.state_dict()
    other = build_rfc_net(tiny(seed=1))
    other.load_state_dict(state)
    for name, p in other.named_parameters():
        assert np.array_equal(p.data, state[name])
    with pytest.raises(ArgumentError):
        other.load_state_dict({k: v for k, v in list(state.items())[1:]})


def test_tiny_network_gradient():
    cfg = tiny(m=3, kernels=(3, 5, 3), depth=2, width=1, stem_widths=(2, 1), num_classes=3, merge="add")
    model = build_rfc_net(cfg, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 3, 8, 8)), dtype=np.float64)
    target = rng.integers(0, 3, size=(1, 8, 8))
    err = grad_check(lambda ts: ohem_ce(model(ts[0]), target, 0.7, 4), [x] + model.parameters(),
                     max_coords=6)
    assert err <= 1e-4


# --- chains and receptive fields -------------------------------------------


def test_chains_preset_a():
    chains = enumerate_chains(RfcConfig.from_preset("a"))
    assert len(chains) == 27
    assert chains[0].kernel_sequence == (3, 3, 3)
    assert chains[26].kernel_sequence == (7, 7, 7)
    assert chains[5].kernel_sequence == (3, 5, 7)


def test_chains_preset_c_depth1():
    chains = enumerate_chains(RfcConfig.from_preset("c", depth=1))
    assert [c.kernel_sequence for c in chains] == [(3,), (5,)]


@given(m=st.integers(2, 4), depth=st.integers(1, 4), data=st.data())
def test_chain_encoding(m, depth, data):
    kernels = tuple(data.draw(st.lists(st.sampled_from([3, 5, 7, 9]), min_size=m, max_size=m)))
    cfg = RfcConfig(m=m, kernels=kernels, depth=depth, width=1, stem_widths=(1, 1))
    chains = enumerate_chains(cfg)
    assert len(chains) == m ** depth
    assert [c.leaf_index for c in chains] == list(range(m ** depth))
    for c in chains:
        assert c.kernel_sequence == tuple(kernels[d] for d in base_digits(c.leaf_index, m, depth))


def test_chain_sequences_distinct_when_kernels_distinct():
    chains = enumerate_chains(RfcConfig(m=4, kernels=(3, 5, 7, 9), depth=3, width=1, stem_widths=(1, 1)))
    assert len({c.kernel_sequence for c in chains}) == 64


@pytest.mark.parametrize("seq,rf", [((3, 3, 3), 34), ((7, 7, 7), 82), ((), 10), ((3,), 18), ((5, 3), 34)])
def test_receptive_field_values(seq, rf):
    assert receptive_field(seq) == rf
    stem = [(3, 1), (2, 2), (3, 1), (2, 2)]
    assert rf_recursion(stem + [(k, 1) for k in seq]) == rf


@given(seq=st.lists(st.sampled_from([3, 5, 7]), min_size=1, max_size=5), pos=st.integers(0, 4))
def test_receptive_field_monotone(seq, pos):
    pos %= len(seq)
    bigger = list(seq)
    bigger[pos] += 2
    assert receptive_field(bigger) > receptive_field(seq)
    assert receptive_field(seq) == 10 + 4 * sum(k - 1 for k in seq)


def test_receptive_field_checks_depth():
    with pytest.raises(ArgumentError):
        receptive_field(ChainDescriptor(0, (3, 3)), RfcConfig.from_preset("a"))


def test_isolate_does_not_touch_original():
    model = build_rfc_net(tiny(depth=2))
    before = model.state_dict()
    iso = isolate_strong_paths(model)
    for name, arr in model.state_dict().items():
        assert np.array_equal(arr, before[name])
    assert all(np.all(g.loose.weight.data == 0) for g in iso.tree[1].groups)


def test_probe_small_chain():
    cfg = tiny(kernels=(3, 5), width=2, stem_widths=(2, 2))
    model = isolate_strong_paths(build_rfc_net(cfg))
    for chain in enumerate_chains(cfg):
        assert empirical_rf_probe(model, chain.leaf_index, size=48) == receptive_field(chain, cfg)


def test_probe_depth3_preset_b():
    cfg = RfcConfig.from_preset("b", width=2)
    model = isolate_strong_paths(build_rfc_net(cfg))
    assert empirical_rf_probe(model, 0, size=128) == 34


def test_probe_clamps_at_boundary():
    cfg = tiny(kernels=(7, 7), depth=1, width=2, stem_widths=(2, 2))
    model = isolate_strong_paths(build_rfc_net(cfg))
    assert empirical_rf_probe(model, 0, size=16) == 16


def test_probe_with_loose_paths_is_not_smaller():
    cfg = tiny(kernels=(3, 7), depth=2, width=2, stem_widths=(2, 2))
    model = build_rfc_net(cfg)
    iso = isolate_strong_paths(model)
    for chain in enumerate_chains(cfg):
        full = empirical_rf_probe(model, chain.leaf_index, size=96)
        strong = empirical_rf_probe(iso, chain.leaf_index, size=96)
        assert strong == receptive_field(chain)
        assert full >= strong
    # leaf 0 (3,3) mixes in the 7x7 sibling through the loose path
    assert empirical_rf_probe(model, 0, size=96) > receptive_field(enumerate_chains(cfg)[0])


def test_probe_leaf_out_of_range():
    with pytest.raises(ArgumentError):
        empirical_rf_probe(build_rfc_net(tiny()), 2)
