import numpy as np
import pytest

from patchfool import tensor as T
from patchfool.models import (PatchGrid, TinyCNN, TinyCNNConfig, TinyViT, TinyViTConfig, forward,
                              forward_with_attention, input_gradient, load_checkpoint, patchify,
                              save_checkpoint, unpatchify)
from patchfool.tensor import Tensor, grad_check

SMALL_GRID = PatchGrid(8, 8, 3, 4)


def small_vit(**kw):
    cfg = dict(grid=SMALL_GRID, embed_dim=8, num_layers=2, num_heads=2, mlp_ratio=2, num_classes=3, seed=1)
    cfg.update(kw)
    return TinyViT(TinyViTConfig(**cfg))


def small_cnn():
    return TinyCNN(TinyCNNConfig(grid=SMALL_GRID, widths=(4, 4), kernel_sizes=(3, 3), num_classes=3, seed=2))


def test_patchify_definition():
    img = np.arange(16.0).reshape(4, 4, 1)
    X = patchify(img, PatchGrid(4, 4, 1, 2))
    assert X.shape == (4, 4)
    np.testing.assert_array_equal(X[0], [img[0, 0, 0], img[0, 1, 0], img[1, 0, 0], img[1, 1, 0]])
    np.testing.assert_array_equal(X[1], [2, 3, 6, 7])


def test_patchify_constant_and_roundtrip():
    grid = PatchGrid(32, 32, 3, 4)
    np.testing.assert_array_equal(patchify(np.full((32, 32, 3), 0.7), grid), 0.7)
    img = np.random.default_rng(0).random((2, 32, 32, 3))
    assert grid.n * grid.d == 32 * 32 * 3
    back = unpatchify(patchify(img, grid), grid)
    assert back.tobytes() == img.tobytes()


def test_patchify_tensor_path_matches_numpy():
    img = np.random.default_rng(1).random((2, 8, 8, 3))
    np.testing.assert_array_equal(patchify(Tensor(img), SMALL_GRID).data, patchify(img, SMALL_GRID))
    X = patchify(img, SMALL_GRID)
    np.testing.assert_array_equal(unpatchify(Tensor(X), SMALL_GRID).data, img)


def test_patchgrid_validation():
    with pytest.raises(ValueError):
        PatchGrid(30, 32, 3, 4)
    with pytest.raises(ValueError):
        patchify(np.zeros((16, 16, 3)), PatchGrid())


def test_default_desk_sizes():
    vit = TinyViT(TinyViTConfig())
    cnn = TinyCNN(TinyCNNConfig())
    assert (vit.grid.n, vit.grid.d) == (64, 48)
    assert vit.config.num_layers >= 5
    ratio = vit.num_parameters() / cnn.num_parameters()
    assert 0.5 <= ratio <= 2.0


def test_attention_rows_normalised_and_batch_consistent():
    m = small_vit()
    img = np.random.default_rng(2).random((8, 8, 3))
    logits, stacks = forward_with_attention(m, np.stack([img, img]))
    np.testing.assert_array_equal(logits.data[0], logits.data[1])
    for a, b in zip(stacks[0].layers, stacks[1].layers):
        np.testing.assert_array_equal(a, b)
        assert a.shape == (2, 5, 5)
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)
        assert (a >= 0).all() and (a <= 1).all()


def test_single_layer_attention_matches_naive_loop():
    m = small_vit(num_layers=1, num_heads=1)
    P = {k: v.data for k, v in m.params.items()}
    img = np.random.default_rng(3).random((8, 8, 3))
    _, stacks = forward_with_attention(m, img)
    X = patchify(img, SMALL_GRID)
    tokens = np.vstack([P["cls_token"][0], X @ P["patch_w"] + P["patch_b"]]) + P["pos_embed"][0]
    D = 8
    expected = np.zeros((5, 5))
    for i in range(5):
        xi = tokens[i]
        xi = (xi - xi.mean()) / np.sqrt(xi.var() + 1e-5) * P["blocks.0.ln1_w"] + P["blocks.0.ln1_b"]
        q = xi @ P["blocks.0.qkv_w"][:, :D] + P["blocks.0.qkv_b"][:D]
        scores = []
        for j in range(5):
            xj = tokens[j]
            xj = (xj - xj.mean()) / np.sqrt(xj.var() + 1e-5) * P["blocks.0.ln1_w"] + P["blocks.0.ln1_b"]
            k = xj @ P["blocks.0.qkv_w"][:, D:2 * D] + P["blocks.0.qkv_b"][D:2 * D]
            scores.append(sum(q[c] * k[c] for c in range(D)) / np.sqrt(D))
        e = np.exp(np.array(scores) - max(scores))
        expected[i] = e / e.sum()
    np.testing.assert_allclose(stacks[0].layers[0][0], expected, rtol=1e-12, atol=1e-14)


def test_forward_matches_forward_with_attention():
    m = small_vit()
    imgs = np.random.default_rng(4).random((3, 8, 8, 3))
    assert forward(m, imgs).data.tobytes() == forward_with_attention(m, imgs)[0].data.tobytes()
    assert forward(m, imgs).shape == (3, 3)


def test_forward_with_attention_rejects_cnn():
    with pytest.raises(TypeError, match="cnn"):
        forward_with_attention(small_cnn(), np.zeros((8, 8, 3)))


def test_zero_head_gives_zero_logits():
    m = small_vit()
    m.params["head_w"].data[:] = 0
    np.testing.assert_array_equal(forward(m, np.random.default_rng(5).random((2, 8, 8, 3))).data, 0.0)


def test_cnn_zero_weights_zero_logits():
    c = small_cnn()
    for p in c.params.values():
        p.data[:] = 0.0
    np.testing.assert_array_equal(forward(c, np.full((2, 8, 8, 3), 0.4)).data, 0.0)


def test_dimension_mismatch_fails():
    with pytest.raises(ValueError):
        forward(small_cnn(), np.zeros((1, 16, 16, 3)))


@pytest.mark.parametrize("make", [small_vit, small_cnn])
def test_input_gradient_matches_finite_differences(make):
    m = make()
    img = np.random.default_rng(6).random((8, 8, 3))
    g = input_gradient(m, img, 1)
    err = grad_check(lambda x: T.cross_entropy(m.forward(T.reshape(x, (1, 8, 8, 3))), [1]),
                     Tensor(img), h=1e-5)
    assert err < 1e-4
    assert np.isfinite(g).all() and np.abs(g).max() > 0


def test_input_gradient_on_four_pixel_model():
    m = TinyViT(TinyViTConfig(grid=PatchGrid(2, 2, 1, 1), embed_dim=4, num_layers=1, num_heads=2,
                              mlp_ratio=1, num_classes=2, seed=3))
    img = np.random.default_rng(7).random((2, 2, 1))
    g = input_gradient(m, img, 0)
    flat = img.reshape(-1).copy()
    num = np.zeros(4)
    for i in range(4):
        for s in (1, -1):
            x = flat.copy()
            x[i] += s * 1e-5
            num[i] += s * T.cross_entropy(m.forward(x.reshape(1, 2, 2, 1)), [0]).item()
    num /= 2e-5
    np.testing.assert_allclose(g.reshape(-1), num, rtol=1e-4, atol=1e-9)


def test_input_gradient_linearity_and_constant_model():
    m = small_vit()
    img = np.random.default_rng(8).random((8, 8, 3))
    x = Tensor(img[None], requires_grad=True)
    ce = T.cross_entropy(m.forward(x), [2])
    double = T.grad(T.add(ce, ce), [x])[0]
    np.testing.assert_allclose(double[0], 2 * input_gradient(m, img, 2), rtol=1e-12)
    m.params["head_w"].data[:] = 0
    np.testing.assert_array_equal(input_gradient(m, img, 2), 0.0)


def test_patch_permutation_equivariance_without_positions():
    m = small_vit()
    m.params["pos_embed"].data[:] = 0
    rng = np.random.default_rng(9)
    X = rng.random((1, 4, 48))
    perm = np.array([2, 0, 3, 1])
    _, a = m.forward_patches(X)
    _, b = m.forward_patches(X[:, perm])
    tok = np.concatenate([[0], perm + 1])
    A, Bm = a[0].data[0], b[0].data[0]
    np.testing.assert_allclose(Bm, A[:, tok][:, :, tok], rtol=1e-10, atol=1e-14)


def test_checkpoint_roundtrip(tmp_path):
    for m in (small_vit(), small_cnn()):
        path = tmp_path / f"{m.kind}.pfml"
        save_checkpoint(m, path)
        loaded = load_checkpoint(path)
        assert loaded.kind == m.kind and loaded.config == m.config
        for k in m.params:
            assert loaded.params[k].data.tobytes() == m.params[k].data.tobytes()
        raw = path.read_bytes()
        assert raw[:4] == b"PFML"
        path.write_bytes(raw[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)
        path.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)
