import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from afa import oracles
from afa.adapters import (
    LoraAdapter,
    MoEAdapterState,
    MoESite,
    MultiHeadExpert,
    TaskRouter,
    expand_router,
    expert_forward,
    freeze_router,
    lora_forward,
    moe_forward,
    moe_forward_dense,
    route,
)
from afa.errors import ContractError, FrozenParameterError, ShapeError
from afa.linalg import DTYPE, Rng, softmax
from afa.objectives import AdamW, GradientTape


def randomize(module, rng, std=0.5):
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(rng.child(name).normal(tuple(p.shape), std))


def test_lora_init_and_zero_b():
    ad = LoraAdapter(6, 2, Rng(0))
    assert ad.A.shape == (2, 6) and ad.B.shape == (6, 2)
    assert torch.equal(ad.B, torch.zeros(6, 2, dtype=DTYPE))
    e = Rng(1).normal((6,))
    assert torch.equal(lora_forward(ad, e), torch.zeros(6, dtype=DTYPE))


def test_lora_identity_factorization():
    ad = LoraAdapter(4, 4, Rng(0))
    with torch.no_grad():
        ad.A.copy_(torch.eye(4))
        ad.B.copy_(torch.eye(4))
    e = Rng(1).normal((4,))
    assert torch.equal(ad(e), e)


def test_lora_matches_dense_product():
    ad = LoraAdapter(4, 2, Rng(0))
    randomize(ad, Rng(3))
    e = Rng(2).normal((4,))
    dense = oracles.matmul(oracles.matmul(ad.B.tolist(), ad.A.tolist()), [[v] for v in e.tolist()])
    got = ad(e).tolist()
    assert max(abs(a - b[0]) for a, b in zip(got, dense)) <= 1e-12


def test_lora_dim_mismatch():
    with pytest.raises(ShapeError):
        LoraAdapter(4, 2, Rng(0))(torch.zeros(5, dtype=DTYPE))


def test_expert_single_head_is_lora_exactly():
    ex = MultiHeadExpert(6, 3, 1, Rng(0))
    lora = LoraAdapter(6, 3, Rng(9))
    randomize(ex, Rng(4))
    with torch.no_grad():
        lora.A.copy_(ex.A)
        lora.B.copy_(ex.B[0])
    e = Rng(5).normal((30, 6))
    assert torch.equal(expert_forward(ex, e), lora(e))


def test_expert_one_hot_gate_selects_head():
    ex = MultiHeadExpert(4, 2, 2, Rng(0))
    randomize(ex, Rng(1))
    e = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=DTYPE)
    with torch.no_grad():
        ex.head_gate.zero_()
        ex.head_gate[0, 0] = 50.0
        ex.head_gate[1, 0] = -50.0
    want = ex.B[0] @ (ex.A @ e)
    assert torch.allclose(ex(e), want, atol=1e-9, rtol=0)


def test_expert_zero_heads_give_zero():
    ex = MultiHeadExpert(4, 2, 3, Rng(0))
    assert torch.equal(ex(Rng(1).normal((4,))), torch.zeros(4, dtype=DTYPE))
    with pytest.raises(ContractError):
        MultiHeadExpert(4, 2, 0, Rng(0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_head_gate_sums_to_one_and_matches_formula(seed, heads):
    ex = MultiHeadExpert(5, 2, heads, Rng(seed))
    randomize(ex, Rng(seed).child("p"))
    e = Rng(seed).child("e").normal((5,))
    b = ex.head_weights(e).detach()
    assert abs(float(b.sum()) - 1.0) <= 1e-12
    z = ex.A @ e
    want = sum(float(b[i]) * (B @ z) for i, B in enumerate(ex.B))
    assert torch.allclose(ex(e), want, atol=1e-12, rtol=0)


def test_route_examples():
    r = TaskRouter(3, 3, 0, Rng(0))
    with torch.no_grad():
        r.weight.copy_(torch.eye(3))
    e = torch.tensor([1.0, 2.0, 3.0], dtype=DTYPE)
    with torch.no_grad():
        w, full, one = route(r, e, 2), route(r, e, 3), route(r, e, 1)
    assert torch.allclose(w, torch.tensor([0.0, 0.24473, 0.66524], dtype=DTYPE), atol=1e-5)
    assert abs(float(full.sum()) - 1.0) <= 1e-12
    assert int((one != 0).sum()) == 1 and float(one.max()) == float(softmax(e).max())
    with pytest.raises(ContractError):
        route(r, e, 0)
    with pytest.raises(ShapeError):
        route(r, torch.zeros(4, dtype=DTYPE), 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.data())
def test_sparse_moe_equals_dense_oracle(seed, n_experts, data):
    k = data.draw(st.integers(1, n_experts))
    heads = data.draw(st.integers(1, 4))
    site = MoESite("s", 6, 3, n_experts, heads, Rng(seed))
    site.add_router(0, Rng(seed).child("r"))
    randomize(site, Rng(seed).child("p"))
    e = Rng(seed).child("e").normal((25, 6))
    with torch.no_grad():
        got = site(0, e, k)
        dense = moe_forward_dense(site, 0, e, k)
        w = route(site.router(0), e, k)
    assert float((got - dense).abs().max()) <= 1e-12
    assert int((w != 0).sum(dim=1).max()) <= k
    assert float(w.sum(dim=1).max()) <= 1.0 + 1e-12
    # per sample: sum over active experts of gate * expert output
    for i in range(3):
        active = (w[i] != 0).nonzero(as_tuple=True)[0].tolist()
        want = sum(float(w[i, j]) * site.experts[j](e[i]) for j in active)
        assert torch.allclose(got[i], want, atol=1e-12, rtol=0)


def test_moe_skips_inactive_experts():
    site = MoESite("s", 4, 2, 5, 2, Rng(0))
    site.add_router(0, Rng(1))
    randomize(site, Rng(2))
    calls = []
    for j, ex in enumerate(site.experts):
        ex.register_forward_hook(lambda m, i, o, j=j: calls.append((j, i[0].shape[0])))
    e = Rng(3).normal((10, 4))
    with torch.no_grad():
        w = route(site.router(0), e, 2)
        site(0, e, 2)
    used = {j: int((w[:, j] != 0).sum()) for j in range(5)}
    assert dict(calls) == {j: n for j, n in used.items() if n > 0}


def test_moe_identical_experts_is_linear_in_gate():
    site = MoESite("s", 4, 2, 3, 2, Rng(0))
    site.add_router(0, Rng(1))
    randomize(site.experts[0], Rng(2))
    with torch.no_grad():
        for ex in site.experts[1:]:
            for p, q in zip(ex.parameters(), site.experts[0].parameters()):
                p.copy_(q)
        e = Rng(3).normal((6, 4))
        w = route(site.router(0), e, 2)
        want = w.sum(dim=1, keepdim=True) * site.experts[0](e)
        assert torch.allclose(site(0, e, 2), want, atol=1e-12, rtol=0)


def test_moe_state_expand_freeze_protocol():
    state = MoEAdapterState(4, 2, 3, 2, 2, ["image_0", "text_0"], Rng(0))
    assert state.n_routers == 0
    assert expand_router(state, 11) == 0
    assert state.n_routers == 1
    with pytest.raises(ContractError):
        expand_router(state, 12)
    freeze_router(state, 0)
    with pytest.raises(FrozenParameterError):
        freeze_router(state, 0)
    with pytest.raises(ContractError):
        freeze_router(state, 5)
    assert expand_router(state, 12) == 1
    with pytest.raises(ContractError):
        moe_forward(state, 0, "image", 2, torch.zeros(4, dtype=DTYPE))
    with pytest.raises(ContractError):
        moe_forward(state, 3, "image", 0, torch.zeros(4, dtype=DTYPE))


def test_expand_is_deterministic():
    a = MoEAdapterState(4, 2, 3, 2, 2, ["image_0"], Rng(0))
    b = MoEAdapterState(4, 2, 3, 2, 2, ["image_0"], Rng(0))
    expand_router(a, 7)
    expand_router(b, 7)
    assert torch.equal(a.sites["image_0"].router(0).weight, b.sites["image_0"].router(0).weight)


def test_frozen_router_rejects_updates():
    state = MoEAdapterState(4, 2, 3, 2, 2, ["image_0"], Rng(0))
    expand_router(state, 1)
    freeze_router(state, 0)
    w = state.sites["image_0"].router(0).weight
    before = w.clone()
    tape = GradientTape({"router": w}, {"router": torch.ones_like(w)})
    with pytest.raises(FrozenParameterError):
        AdamW(1e-3).step(tape)
    assert torch.equal(w, before)


def test_fresh_state_contributes_zero():
    state = MoEAdapterState(4, 2, 3, 2, 2, ["image_0"], Rng(0))
    expand_router(state, 1)
    e = Rng(2).normal((5, 4))
    with torch.no_grad():
        assert torch.equal(moe_forward(state, 0, "image", 0, e), torch.zeros(5, 4, dtype=DTYPE))


def test_pinned_routing_replays_active_sets():
    state = MoEAdapterState(4, 2, 4, 2, 1, ["image_0"], Rng(0))
    expand_router(state, 1)
    randomize(state, Rng(3))
    e = Rng(4).normal((8, 4))
    with state.record_routing() as rec:
        ref = moe_forward(state, 0, "image", 0, e)
    with torch.no_grad():
        state.sites["image_0"].router(0).weight.mul_(-1.0)
    with state.pinned_routing(rec) as log:
        pinned = moe_forward(state, 0, "image", 0, e)
    assert log.flips == 1
    assert not torch.equal(pinned, ref)
    free = moe_forward(state, 0, "image", 0, e)
    assert not torch.equal(pinned, free)
