import numpy as np
import pytest

from conftest import check_grads, rng
from hlgp import tensor as T
from hlgp.errors import ConfigError, ContractError, DimensionError
from hlgp.prompts import (
    GroupAdapter,
    HlgpGenerator,
    IndependentGenerator,
    adapter_project,
    apply_pie,
    clone_generator,
    count_trainable_params,
    generate_subprompts,
    make_generator,
    param_breakdown,
    partition_layers,
    sinusoidal_offset,
)
from hlgp.tensor import Tensor


def gen(task=0, L=2, D=8, m=4, s=2, r=2, pie="shared", seed=0):
    return HlgpGenerator.fresh(task, L, D, m, s, r, pie, seed)


def randomize(g, seed=123):
    r = rng(seed)
    for t in g.named_tensors().values():
        t.data[:] = r.normal(0.0, 0.3, size=t.shape)


# ---------------------------------------------------------------------------
# partition


def test_partition_12_by_4():
    part = partition_layers(12, 4)
    assert [list(g) for g in part.groups] == [
        list(range(0, 4)), list(range(4, 8)), list(range(8, 12))]


def test_partition_12_by_12_single_group():
    part = partition_layers(12, 12)
    assert part.num_groups == 1
    assert list(part.groups[0]) == list(range(12))


def test_partition_rejects_non_divisor():
    with pytest.raises(ConfigError):
        partition_layers(12, 5)


# ---------------------------------------------------------------------------
# adapter projection


def test_zero_up_projection_gives_zero_prompt():
    g = gen()
    out = adapter_project(g.root.key, g.key_adapters[0])
    assert np.array_equal(out.data, np.zeros((2, 8)))


def test_adapter_hand_case():
    # L=1, D=2, r=1 with hand-chosen weights, checked against a separate
    # evaluation of up * gelu(down . x + b1) + b2
    down = Tensor([[0.5], [-1.0]], trainable=True, name="down")
    down_bias = Tensor([0.25], trainable=True, name="db")
    up = Tensor([[2.0, -3.0]], trainable=True, name="up")
    up_bias = Tensor([0.1, -0.2], trainable=True, name="ub")
    adapter = GroupAdapter(0, "key", down, down_bias, up, up_bias)
    x = np.array([[0.8, 0.3]])
    h = x @ down.data + 0.25
    gelu_h = 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h**3)))
    expected = gelu_h @ up.data + up_bias.data
    got = adapter_project(Tensor(x), adapter).data
    assert np.allclose(got, expected, atol=1e-9)


def test_adapter_rejects_dim_mismatch():
    g = gen()
    with pytest.raises(DimensionError):
        adapter_project(Tensor(np.zeros((2, 5))), g.key_adapters[0])


def test_adapter_gradients():
    g = gen()
    randomize(g)
    a = g.key_adapters[0]
    w = Tensor(rng(9).normal(size=(2, 8)))

    def loss():
        return T.sum_(T.mul(adapter_project(g.root.key, a), w))

    check_grads(loss, a.tensors() + [g.root.key], eps=1e-5, tol=1e-4)


# ---------------------------------------------------------------------------
# position offsets


def test_apply_pie_zero_is_identity():
    theta = Tensor(rng(1).normal(size=(2, 8)))
    out = apply_pie(theta, Tensor(np.zeros((2, 8))))
    assert np.array_equal(out.data, theta.data)


def test_apply_pie_arithmetic():
    out = apply_pie(Tensor([[1.0, 2.0]]), Tensor([[0.5, -0.5]]))
    assert out.data.tolist() == [[1.5, 1.5]]


def test_apply_pie_shape_mismatch():
    with pytest.raises(DimensionError):
        apply_pie(Tensor(np.zeros((2, 8))), Tensor(np.zeros((2, 4))))


def test_shared_mode_uses_one_table_for_both_pathways():
    g = gen(pie="shared")
    for k, v in zip(g.pie.key_tables, g.pie.value_tables):
        assert k is v


def test_non_shared_mode_has_separate_tables():
    g = gen(pie="non_shared")
    for k, v in zip(g.pie.key_tables, g.pie.value_tables):
        assert k is not v


def test_sinusoidal_offsets_fixed_and_layer_indexed():
    g = gen(pie="sinusoidal")
    assert all(not t.trainable for t in g.pie.key_tables)
    for i, t in enumerate(g.pie.key_tables):
        assert np.array_equal(t.data, sinusoidal_offset(i, 2, 8))
        # broadcast over prompt rows: every row identical
        assert np.array_equal(t.data[0], t.data[1])
    assert not np.array_equal(g.pie.key_tables[0].data, g.pie.key_tables[1].data)


# ---------------------------------------------------------------------------
# sub-prompt generation


def test_pie_none_gives_identical_subprompts_within_group():
    g = gen(pie="none", m=4, s=2)
    randomize(g)
    sp = g.subprompts()
    assert sp.layers[0].key_prompt.data.tobytes() == sp.layers[1].key_prompt.data.tobytes()
    assert sp.layers[0].value_prompt.data.tobytes() == sp.layers[1].value_prompt.data.tobytes()
    assert sp.layers[2].key_prompt.data.tobytes() == sp.layers[3].key_prompt.data.tobytes()


def test_pie_shared_subprompts_are_group_prompt_plus_offset_bitwise():
    g = gen(pie="shared", m=4, s=2)
    randomize(g)
    sp = g.subprompts()
    for i, lp in enumerate(sp.layers):
        want_k = sp.group_key[i].data + g.pie.key_tables[i].data
        want_v = sp.group_value[i].data + g.pie.value_tables[i].data
        assert lp.key_prompt.data.tobytes() == want_k.tobytes()
        assert lp.value_prompt.data.tobytes() == want_v.tobytes()


def test_exactly_three_distinct_group_prompts_for_12_layers_s4():
    g = gen(m=12, s=4, pie="shared")
    randomize(g)
    sp = g.subprompts()
    distinct = {t.data.tobytes() for t in sp.group_key}
    assert len(distinct) == 3


def test_cross_group_distinctness_with_generic_weights():
    g = gen(m=4, s=2, pie="none")
    randomize(g)
    sp = g.subprompts()
    assert sp.layers[0].key_prompt.data.tobytes() != sp.layers[2].key_prompt.data.tobytes()
    assert sp.layers[0].value_prompt.data.tobytes() != sp.layers[2].value_prompt.data.tobytes()


def test_generate_subprompts_missing_adapter():
    g = gen(m=4, s=2)
    with pytest.raises(ContractError):
        generate_subprompts(g.root, g.key_adapters[:1], g.value_adapters, g.pie, g.part)


def test_frozen_generator_subprompts_stable_across_calls():
    g = gen()
    randomize(g)
    g.freeze()
    a = g.subprompts()
    b = g.subprompts()
    for la, lb in zip(a.layers, b.layers):
        assert la.key_prompt.data.tobytes() == lb.key_prompt.data.tobytes()
        assert la.value_prompt.data.tobytes() == lb.value_prompt.data.tobytes()


# ---------------------------------------------------------------------------
# lifecycle


def test_fresh_generator_is_fully_trainable():
    g = gen(pie="shared")
    assert all(t.trainable for t in g.named_tensors().values())


def test_freeze_drops_grads_and_trainability():
    g = gen()
    g.freeze()
    assert g.is_frozen()
    assert all(t.grad is None for t in g.named_tensors().values())


def test_from_previous_copies_bit_exactly_and_trains():
    prev = gen(pie="shared")
    randomize(prev)
    prev.freeze()
    nxt = HlgpGenerator.from_previous(1, prev)
    assert nxt.task_id == 1
    for name, t in nxt.named_tensors().items():
        assert t.data.tobytes() == prev.named_tensors()[name].data.tobytes()
        assert t.data is not prev.named_tensors()[name].data
        assert t.trainable
    assert prev.is_frozen()


def test_from_previous_sinusoidal_stays_fixed():
    prev = gen(pie="sinusoidal")
    prev.freeze()
    nxt = HlgpGenerator.from_previous(1, prev)
    assert all(not t.trainable for t in nxt.pie.key_tables)
    assert nxt.root.key.trainable


def test_independent_generator_round_trip():
    prev = IndependentGenerator.fresh(0, 2, 8, 4, seed=0)
    prev.freeze()
    nxt = clone_generator(1, prev)
    for name, t in nxt.named_tensors().items():
        assert t.data.tobytes() == prev.named_tensors()[name].data.tobytes()
        assert t.trainable


def test_make_generator_modes():
    g1 = make_generator("hlgp_pie", 0, 2, 8, 4, 2, 2, "shared", 0)
    assert g1.pie.mode == "shared"
    g2 = make_generator("hlgp", 0, 2, 8, 4, 2, 2, "shared", 0)
    assert g2.pie.mode == "none"
    g3 = make_generator("independent_layerwise", 0, 2, 8, 4, 2, 2, "shared", 0)
    assert isinstance(g3, IndependentGenerator)
    with pytest.raises(ConfigError):
        make_generator("bogus", 0, 2, 8, 4, 2, 2, "shared", 0)


# ---------------------------------------------------------------------------
# parameter accounting


FULL = dict(embed_dim=768, prompt_len=10, num_layers=12, shared_layers=4,
            rank=16, classes_per_task=10)


def test_root_prompt_contributes_2_L_D():
    bd = param_breakdown("hlgp", classes_per_task=10, pie_mode="none",
                         embed_dim=768, prompt_len=10, num_layers=12,
                         shared_layers=4, rank=16)
    assert bd["components"]["prompts"] == 2 * 10 * 768


def test_counts_strictly_decrease_in_shared_layers():
    dims = {k: v for k, v in FULL.items() if k != "shared_layers"}
    counts = [
        count_trainable_params("hlgp_pie", pie_mode="shared", shared_layers=s, **dims)
        for s in (1, 2, 4, 6, 12)
    ]
    assert all(a > b for a, b in zip(counts, counts[1:]))


def test_full_scale_counts_frozen_constants():
    # evaluated once from the closed-form component sums and pinned here
    assert count_trainable_params("hlgp_pie", pie_mode="shared", **FULL) == 267_370
    assert count_trainable_params("hlgp", pie_mode="none", **FULL) == 175_210
    assert count_trainable_params(
        "independent_layerwise", pie_mode="none", **FULL) == 192_010


def test_baseline_count_formula():
    bd = param_breakdown("independent_layerwise", pie_mode="none", **FULL)
    assert bd["components"]["prompts"] == 12 * 2 * 10 * 768
    assert bd["components"]["classifier"] == 10 * 769


def test_pie_adds_m_L_D_in_shared_mode():
    with_pie = count_trainable_params("hlgp_pie", pie_mode="shared", **FULL)
    without = count_trainable_params("hlgp", pie_mode="none", **FULL)
    assert with_pie - without == 12 * 10 * 768


def test_non_shared_pie_doubles_offset_params():
    shared = param_breakdown("hlgp_pie", pie_mode="shared", **FULL)
    nsp = param_breakdown("hlgp_pie", pie_mode="non_shared", **FULL)
    assert nsp["components"]["pie"] == 2 * shared["components"]["pie"]


def test_cumulative_scales_with_tasks():
    one = count_trainable_params("hlgp_pie", pie_mode="shared", **FULL, tasks_so_far=1)
    ten = count_trainable_params("hlgp_pie", pie_mode="shared", **FULL, tasks_so_far=10)
    assert ten == 10 * one


def test_formula_matches_instantiated_generator():
    for mode, pie in (("hlgp_pie", "shared"), ("hlgp_pie", "non_shared"),
                      ("hlgp", "none"), ("independent_layerwise", "none")):
        g = make_generator(mode, 0, 2, 8, 4, 2, 2, pie, 0)
        measured = sum(t.data.size for t in g.trainable_tensors().values())
        bd = param_breakdown(mode, embed_dim=8, prompt_len=2, num_layers=4,
                             shared_layers=2, rank=2, pie_mode=pie,
                             classes_per_task=3)
        assert measured == bd["per_task"] - bd["components"]["classifier"]


def test_sinusoidal_pie_counts_zero_trainables():
    bd = param_breakdown("hlgp_pie", pie_mode="sinusoidal", **FULL)
    assert bd["components"]["pie"] == 0
