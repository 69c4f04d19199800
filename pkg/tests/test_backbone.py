import numpy as np
import pytest

from oracles import central_diff, rel_err
from rfiad.backbone import BackboneConfig, ConfigError, init_backbone, patchify
from rfiad.numerics import Tape, Tensor, backward, no_tape

SMALL = BackboneConfig(image_size=8, patch_size=4, dim=8, depth=2, heads=2, mlp_ratio=2, seed=3)


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(image_size=30, patch_size=8)
    with pytest.raises(ConfigError):
        BackboneConfig(dim=30, heads=4)
    assert BackboneConfig().num_patches == 16


def test_weight_hash_determinism():
    assert init_backbone(BackboneConfig()).weight_hash() == init_backbone(BackboneConfig()).weight_hash()
    assert init_backbone(BackboneConfig(seed=1)).weight_hash() != init_backbone(BackboneConfig()).weight_hash()


def test_weights_within_init_bound():
    bb = init_backbone(BackboneConfig())
    bound = 1 / np.sqrt(32)
    for w in bb.weights():
        assert np.abs(w.data).max() <= bound
        assert not w.requires_grad


def test_patchify_examples():
    img = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(patchify(img, 1), [[1.0], [2.0], [3.0], [4.0]])
    const = np.full((16, 16), 0.3)
    rows = patchify(const, 4)
    assert (rows == rows[0]).all()
    assert patchify(np.zeros((32, 32)), 8).shape == (16, 64)
    with pytest.raises(ConfigError):
        patchify(np.zeros((10, 10)), 4)


def test_patchify_raster_order():
    img = np.arange(16.0).reshape(4, 4)
    rows = patchify(img, 2)
    np.testing.assert_array_equal(rows[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(rows[2], [8, 9, 12, 13])


def test_encode_shapes_and_normalization():
    bb = init_backbone(BackboneConfig())
    rng = np.random.default_rng(0)
    a = bb.encode(rng.random((32, 32)))
    assert a.image.shape == (1, 32) and a.patches.shape == (16, 32)
    np.testing.assert_allclose(np.linalg.norm(a.patches, axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(a.image), 1.0, atol=1e-9)


def test_encode_determinism_and_sensitivity():
    bb = init_backbone(BackboneConfig())
    rng = np.random.default_rng(1)
    x, y = rng.random((32, 32)), rng.random((32, 32))
    a, b = bb.encode(x), bb.encode(x)
    assert a.image.tobytes() == b.image.tobytes() and a.patches.tobytes() == b.patches.tobytes()
    assert not np.allclose(bb.encode(y).patches, a.patches)
    with pytest.raises(ConfigError):
        bb.encode(np.zeros((16, 16)))


def test_zero_prompt_changes_output():
    bb = init_backbone(BackboneConfig())
    img = np.random.default_rng(2).random((32, 32))
    plain = bb.encode(img)
    prompted = bb.encode_with_prompt(img, np.zeros((4, 32)))
    assert not np.allclose(plain.patches, prompted.patches)


def test_prompt_sensitivity():
    bb = init_backbone(BackboneConfig())
    rng = np.random.default_rng(3)
    img = rng.random((32, 32))
    for _ in range(20):
        p1, p2 = rng.normal(size=(4, 32)), rng.normal(size=(4, 32))
        a, b = bb.encode_with_prompt(img, p1), bb.encode_with_prompt(img, p2)
        assert not np.array_equal(a.patches, b.patches)


def test_prompt_shape_checked():
    bb = init_backbone(BackboneConfig())
    with pytest.raises(ConfigError):
        bb.encode_with_prompt(np.zeros((32, 32)), np.zeros((4, 31)))


def test_prompt_gradient_matches_finite_differences():
    bb = init_backbone(SMALL)
    rng = np.random.default_rng(4)
    img = rng.random((8, 8))
    p0 = rng.normal(size=(2, 8)) * 0.3
    prompt = Tensor(p0, requires_grad=True)
    with Tape() as tape:
        k_img, _ = bb.forward(img, prompt)
        loss = k_img.sum()
    backward(tape, loss)

    def f(p):
        with no_tape():
            return bb.forward(img, Tensor(p))[0].sum().item()

    assert rel_err(prompt.grad, central_diff(f, p0)) < 1e-4


def test_gradient_isolation_on_prompt_only():
    bb = init_backbone(SMALL)
    img = np.random.default_rng(5).random((8, 8))
    prompt = Tensor(np.ones((2, 8)) * 0.1, requires_grad=True)
    before = bb.weight_hash()
    with Tape() as tape:
        k_img, k_pix = bb.forward(img, prompt)
        loss = k_img.sum() + k_pix.sum()
    backward(tape, loss)
    assert np.abs(prompt.grad).sum() > 0
    assert all(w.grad is None for w in bb.weights())
    assert bb.weight_hash() == before
