import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_diff, cos, rel_err
from rfiad.backbone import BackboneConfig, init_backbone
from rfiad.numerics import ContractError, Tape, Tensor, adam_step, AdamState, backward, no_tape
from rfiad.prompt_bank import PromptBank, PromptComponent, assemble_prompt


def comp(q, k, v, task=1):
    return PromptComponent(query=Tensor(q, requires_grad=True), key=Tensor(k, requires_grad=True),
                           value=Tensor(v, requires_grad=True), owner_task=task)


def test_expand_first_and_second():
    bank = PromptBank(dim=8, prompt_length=2, per_task=2)
    bank.expand(1, seed=0)
    assert len(bank) == 2 and bank.frozen_flags() == [False, False]
    bank.expand(2, seed=0)
    assert len(bank) == 4 and bank.frozen_flags() == [True, True, False, False]
    assert [c.owner_task for c in bank.components] == [1, 1, 2, 2]


def test_expand_rejects_non_sequential():
    bank = PromptBank(dim=4)
    with pytest.raises(ContractError):
        bank.expand(2, seed=0)
    bank.expand(1, seed=0)
    with pytest.raises(ContractError):
        bank.expand(1, seed=0)


def test_expand_init_range_and_determinism():
    a = PromptBank(dim=16).expand(1, seed=5)
    b = PromptBank(dim=16).expand(1, seed=5)
    bound = 1 / np.sqrt(16)
    for ca, cb in zip(a.components, b.components):
        assert ca.to_bytes() == cb.to_bytes()
        for t in ca.tensors():
            assert np.abs(t.data).max() <= bound


def test_parameter_count_examples():
    bank = PromptBank(dim=4, prompt_length=2, per_task=3).expand(1, seed=0)
    params, count = bank.trainable_parameters()
    assert count == 48 and len(params) == 9
    bank = PromptBank(dim=32, prompt_length=4, per_task=2).expand(1, seed=0)
    params, count = bank.trainable_parameters()
    assert len(params) == 6 and count == 2 * 192
    bank.freeze_all()
    assert bank.trainable_parameters() == ([], 0)


def test_single_component_count():
    bank = PromptBank(dim=32, prompt_length=4, per_task=1).expand(1, seed=0)
    assert bank.trainable_parameters()[1] == 192


def test_assemble_self_similarity():
    base = np.array([0.3, -1.0, 2.0])
    v = np.arange(6.0).reshape(2, 3)
    bank = PromptBank(dim=3, prompt_length=2, per_task=1, components=[comp(np.ones(3), base, v)])
    asm = assemble_prompt(bank, base)
    assert asm.weights.data[0] == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(asm.prompt.data, v, atol=1e-14)


def test_assemble_orthogonal_gives_zero():
    base = np.array([1.0, 0.0, 0.0])
    bank = PromptBank(dim=3, prompt_length=1, per_task=1,
                      components=[comp(np.ones(3), [0.0, 1.0, 0.0], [[1.0, 2.0, 3.0]])])
    asm = assemble_prompt(bank, base)
    assert asm.weights.data[0] == 0.0
    np.testing.assert_array_equal(asm.prompt.data, np.zeros((1, 3)))


def test_assemble_zero_norm_query_pins_weight():
    base = np.array([0.0, 1.0, 0.0])
    bank = PromptBank(dim=3, prompt_length=1, per_task=1,
                      components=[comp([1.0, 0.0, 1.0], [1.0, 1.0, 1.0], [[1.0, 1.0, 1.0]])])
    asm = assemble_prompt(bank, base)
    assert asm.weights.data[0] == 0.0


def test_assemble_matches_hand_evaluation():
    rng = np.random.default_rng(11)
    d, lp = 3, 1
    comps = [comp(rng.normal(size=d), rng.normal(size=d), rng.normal(size=(lp, d))) for _ in range(2)]
    bank = PromptBank(dim=d, prompt_length=lp, per_task=2, components=comps)
    base = rng.normal(size=d)
    expected = np.zeros((lp, d))
    for c in comps:
        qx = [b * q for b, q in zip(base, c.query.data)]
        expected += cos(qx, c.key.data) * c.value.data
    np.testing.assert_allclose(assemble_prompt(bank, base).prompt.data, expected, atol=1e-14)


def test_assemble_errors():
    with pytest.raises(ContractError):
        assemble_prompt(PromptBank(dim=3), np.ones(3))
    bank = PromptBank(dim=3).expand(1, seed=0)
    with pytest.raises(ContractError):
        assemble_prompt(bank, np.ones(4))


@given(st.integers(0, 2**16), st.floats(0.1, 5.0))
def test_assembly_linear_in_values(seed, scale):
    bank = PromptBank(dim=6, prompt_length=2, per_task=3).expand(1, seed=seed)
    base = np.random.default_rng(seed).normal(size=6)
    p = assemble_prompt(bank, base).prompt.data
    for c in bank.components:
        c.value.data = c.value.data * scale
    np.testing.assert_allclose(assemble_prompt(bank, base).prompt.data, p * scale, rtol=1e-12, atol=1e-14)


@given(st.integers(0, 2**16))
def test_weights_are_bounded_cosines(seed):
    bank = PromptBank(dim=5, prompt_length=1, per_task=4).expand(1, seed=seed)
    w = assemble_prompt(bank, np.random.default_rng(seed).normal(size=5)).weights.data
    assert (np.abs(w) <= 1 + 1e-12).all()


def test_freeze_durability_under_training():
    cfg = BackboneConfig(image_size=8, patch_size=4, dim=8, seed=0)
    bb = init_backbone(cfg)
    bank = PromptBank(dim=8, prompt_length=2, per_task=2).expand(1, seed=0)
    bank.expand(2, seed=0)
    frozen = [c.to_bytes() for c in bank.components if c.frozen]
    params, _ = bank.trainable_parameters()
    state = AdamState(lr=0.05)
    img = np.random.default_rng(0).random((8, 8))
    base = bb.encode(img).image.reshape(-1)
    for _ in range(5):
        with Tape() as tape:
            k_img, _ = bb.forward(img, assemble_prompt(bank, base).prompt)
            loss = k_img.sum()
        backward(tape, loss, params)
        adam_step(state, params)
    assert [c.to_bytes() for c in bank.components if c.frozen] == frozen
    assert all(c.query.grad is None for c in bank.components if c.frozen)


def test_gradients_flow_only_to_trainable_components():
    cfg = BackboneConfig(image_size=8, patch_size=4, dim=8, seed=1)
    bb = init_backbone(cfg)
    bank = PromptBank(dim=8, prompt_length=2, per_task=1).expand(1, seed=1)
    bank.expand(2, seed=1)
    img = np.random.default_rng(1).random((8, 8))
    base = bb.encode(img).image.reshape(-1)
    params, _ = bank.trainable_parameters()
    with Tape() as tape:
        k_img, _ = bb.forward(img, assemble_prompt(bank, base).prompt)
        loss = k_img.sum()
    backward(tape, loss, params)
    assert all(np.abs(p.grad).sum() > 0 for p in params)
    assert all(t.grad is None for t in bank.components[0].tensors())


def test_assemble_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    bank = PromptBank(dim=4, prompt_length=2, per_task=2).expand(1, seed=7)
    base = rng.normal(size=4)
    target = rng.normal(size=(2, 4))
    params, _ = bank.trainable_parameters()
    with Tape() as tape:
        loss = (assemble_prompt(bank, base).prompt * target).sum()
    backward(tape, loss, params)
    for p in params:
        orig = p.data.copy()

        def f(x, p=p, orig=orig):
            p.data = x
            with no_tape():
                out = (assemble_prompt(bank, base).prompt * target).sum().item()
            p.data = orig
            return out

        assert rel_err(p.grad, central_diff(f, orig)) < 1e-6
