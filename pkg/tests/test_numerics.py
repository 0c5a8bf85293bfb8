import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from polymotion import _accel
from polymotion.errors import DimensionError, NumericError, TrainingError, VersionError, CheckpointFormatError
from polymotion.numerics import (
    Adam, Linear, Parameter, Tensor, attention, causal_mask, concat, conv1d, conv_transpose1d,
    cosine_similarity, cross_entropy, embedding, key_padding_mask, l2_normalize, layer_norm, load_checkpoint,
    log_softmax, matmul, mse, save_checkpoint, softmax, straight_through,
)
from polymotion.numerics import tensor as T
from polymotion.numerics.gradcheck import check_gradients, numeric_grad, relative_error

rng = np.random.default_rng(1234)


def test_matmul_identity_and_hand_values():
    a = rng.normal(size=(2, 2))
    assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor(a)).data, a)
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

    def loss(x, y):
        return float((x @ y).sum())

    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    matmul(ta, tb).sum().backward()
    num_a, num_b = numeric_grad(loss, [a.copy(), b.copy()])
    assert relative_error(ta.grad, num_a) < 1e-4
    assert relative_error(tb.grad, num_b) < 1e-4


def test_softmax_values():
    assert np.allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert np.round(softmax(Tensor([0.0, -2.0])).data, 4).tolist() == [0.8808, 0.1192]


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        softmax(Tensor([0.0, np.nan]))


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
           elements=st.floats(-50, 50)),
    st.floats(-100, 100),
)
def test_softmax_shift_invariance_and_normalisation(x, c):
    p = softmax(Tensor(x)).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-12, rtol=0)
    assert np.allclose(softmax(Tensor(x + c)).data, p, atol=1e-12, rtol=0)


def test_cross_entropy_uniform_logits_is_log_v():
    v = 7
    loss = cross_entropy(Tensor(np.zeros((3, v))), np.array([0, 3, 6]))
    assert loss.item() == pytest.approx(np.log(v), abs=1e-12)


def test_cross_entropy_ignores_pad():
    logits = rng.normal(size=(4, 5))
    full = cross_entropy(Tensor(logits[:2]), [1, 2]).item()
    masked = cross_entropy(Tensor(logits), [1, 2, 9, 9], ignore_index=9).item()
    assert masked == pytest.approx(full, abs=1e-14)


def test_cosine_self_is_one():
    v = rng.normal(size=(5, 8))
    assert np.allclose(cosine_similarity(Tensor(v), Tensor(v)).data, 1.0, atol=1e-12)


def _attn(q, k, v):
    return attention(q, k, v, causal_mask(q.shape[-2]))


GRAD_CASES = [
    ("add_broadcast", lambda a, b: a + b, [(3, 4), (4,)]),
    ("mul_broadcast", lambda a, b: a * b, [(2, 3, 4), (1, 3, 1)]),
    ("div", lambda a, b: a / (T.square(b) + 1.0), [(3, 4), (3, 4)]),
    ("matmul_batched", matmul, [(2, 3, 4), (4, 5)]),
    ("matmul_4d", matmul, [(2, 2, 3, 4), (2, 2, 4, 3)]),
    ("softmax", lambda x: softmax(x, axis=-1), [(3, 5)]),
    ("softmax_axis0", lambda x: softmax(x, axis=0), [(4, 3)]),
    ("log_softmax", log_softmax, [(2, 3, 6)]),
    ("gelu", T.gelu, [(4, 5)]),
    ("tanh", T.tanh, [(3, 3)]),
    ("exp_log", lambda x: T.log(T.exp(x) + 1.0), [(2, 5)]),
    ("sum_axis", lambda x: x.sum(axis=1), [(3, 4, 2)]),
    ("mean_keep", lambda x: x.mean(axis=-1, keepdims=True) * x, [(3, 4)]),
    ("transpose", lambda x: x.transpose(2, 0, 1) * 1.5, [(2, 3, 4)]),
    ("getitem", lambda x: x[1:, ::2], [(4, 6)]),
    ("getitem_fancy", lambda x: x[np.array([0, 2, 2])], [(3, 4)]),
    ("concat", lambda a, b: concat([a, b], axis=1), [(2, 3), (2, 2)]),
    ("layer_norm", lambda x, g, b: layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    ("mse", mse, [(4, 3), (4, 3)]),
    ("cosine", lambda a, b: cosine_similarity(a, b), [(3, 5), (3, 5)]),
    ("l2_normalize", l2_normalize, [(3, 4)]),
    ("embedding", lambda w: embedding(w, np.array([[0, 2], [2, 1]])), [(4, 3)]),
    ("conv1d", lambda x, w, b: conv1d(x, w, b, stride=1, padding=1), [(2, 7, 3), (3, 3, 4), (4,)]),
    ("conv1d_stride2", lambda x, w, b: conv1d(x, w, b, stride=2, padding=1),
     [(2, 8, 2), (4, 2, 3), (3,)]),
    ("conv_transpose1d", lambda x, w, b: conv_transpose1d(x, w, b, stride=2, padding=1),
     [(2, 4, 3), (4, 2, 3), (2,)]),
    ("attention_causal", _attn, [(2, 4, 3), (2, 4, 3), (2, 4, 3)]),
    ("attention_cross", lambda q, k, v: attention(q, k, v), [(1, 2, 3, 4), (1, 2, 5, 4), (1, 2, 5, 4)]),
]


@pytest.mark.parametrize("name,op,shapes", GRAD_CASES, ids=[c[0] for c in GRAD_CASES])
def test_gradients_match_central_differences(name, op, shapes):
    local = np.random.default_rng(zlib.crc32(name.encode()))
    arrays_ = [local.normal(size=s) for s in shapes]
    assert check_gradients(op, arrays_) < 1e-4


def test_cross_entropy_gradient():
    targets = np.array([1, 0, 3, 2])

    def op(x):
        return cross_entropy(x, targets, ignore_index=2)

    assert check_gradients(op, [rng.normal(size=(4, 5))]) < 1e-4


def test_straight_through_copies_gradient_exactly():
    z = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    q_value = rng.normal(size=(5, 3))
    q = straight_through(z, q_value).retain_grad()
    assert np.array_equal(q.data, q_value)
    loss = (T.square(q) * Tensor(rng.normal(size=(5, 3)))).sum()
    loss.backward()
    assert np.array_equal(z.grad, q.grad)


def test_causal_attention_ignores_future_bit_exactly():
    q, k, v = (rng.normal(size=(1, 2, 6, 4)) for _ in range(3))
    base = attention(Tensor(q), Tensor(k), Tensor(v), causal_mask(6)).data
    k2, v2 = k.copy(), v.copy()
    k2[..., 4:, :] += rng.normal(size=(1, 2, 2, 4)) * 10
    v2[..., 4:, :] += rng.normal(size=(1, 2, 2, 4)) * 10
    pert = attention(Tensor(q), Tensor(k2), Tensor(v2), causal_mask(6)).data
    assert np.array_equal(base[..., :4, :], pert[..., :4, :])
    assert not np.array_equal(base[..., 4:, :], pert[..., 4:, :])


def test_attention_mask_shape_mismatch():
    q = Tensor(np.ones((1, 1, 3, 2)))
    with pytest.raises(DimensionError):
        attention(q, q, q, np.zeros((4, 4)))


def test_key_padding_mask_blocks_padded_keys():
    q, k, v = (rng.normal(size=(1, 1, 3, 2)) for _ in range(3))
    mask = key_padding_mask([[True, True, False]])
    out = attention(Tensor(q), Tensor(k), Tensor(v), mask).data
    ref = attention(Tensor(q), Tensor(k[..., :2, :]), Tensor(v[..., :2, :])).data
    assert np.allclose(out, ref, atol=1e-14)


def test_adam_scalar_convergence():
    w = Parameter(np.array([0.0]))
    opt = Adam([w], lr=0.05)
    for _ in range(2000):
        opt.zero_grad()
        T.square(w - 3.0).sum().backward()
        opt.step()
    assert abs(w.data[0] - 3.0) < 1e-3


def test_adam_zero_gradient_leaves_parameter():
    w = Parameter(np.array([1.5, -2.0]))
    opt = Adam([w], lr=0.1)
    w.grad = np.zeros(2)
    opt.step()
    assert w.data.tolist() == [1.5, -2.0]


def test_adam_missing_grad_is_training_error():
    w = Parameter(np.zeros(3), name="w")
    with pytest.raises(TrainingError, match="w"):
        Adam([w]).step()
    Adam([w]).step(strict=False)


def _train_tiny(seed):
    r = np.random.default_rng(seed)
    layer = Linear(3, 2, r)
    opt = Adam(layer.parameters(), lr=0.01)
    x = r.normal(size=(16, 3))
    y = r.normal(size=(16, 2))
    for _ in range(50):
        opt.zero_grad()
        mse(layer(Tensor(x)), y).backward()
        opt.step()
    return np.concatenate([p.data.ravel() for p in layer.parameters()])


def test_training_is_bit_deterministic():
    assert np.array_equal(_train_tiny(7), _train_tiny(7))


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a.weight": rng.normal(size=(3, 4)), "b": rng.normal(size=(5,))}
    path = save_checkpoint(tmp_path / "m.ckpt", tensors, kind="test", config={"x": 1}, seed=3,
                           extra={"note": [1, 2]})
    loaded, manifest = load_checkpoint(path)
    assert manifest["seed"] == 3 and manifest["extra"] == {"note": [1, 2]}
    for k, v in tensors.items():
        assert np.array_equal(loaded[k], v)


def test_checkpoint_corrupt_and_version(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a zip")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(bad)
    import json
    import zipfile
    path = tmp_path / "v.ckpt"
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("manifest.json", json.dumps({"version": 99, "tensors": {}}))
    with pytest.raises(VersionError):
        load_checkpoint(path)


@pytest.mark.parametrize("name", sorted(_accel.KERNELS))
def test_numba_and_numpy_kernels_agree(name):
    fast_np, loops = _accel.KERNELS[name]
    r = np.random.default_rng(5)
    if name == "nearest_code":
        z, e = r.normal(size=(50, 6)), r.normal(size=(17, 6))
        assert np.array_equal(fast_np(z, e), loops(z, e))
    elif name == "pairwise_l2":
        e = r.normal(size=(12, 5))
        assert np.allclose(fast_np(e), loops(e), atol=1e-13, rtol=0)
    elif name == "im2col":
        x = r.normal(size=(2, 9, 3))
        assert np.array_equal(fast_np(x, 3, 2, 4), loops(x, 3, 2, 4))
    elif name == "col2im":
        c = r.normal(size=(2, 4, 3, 5))
        assert np.array_equal(fast_np(c, 9, 2), loops(c, 9, 2))
    else:
        outs = []
        for fn in (fast_np, loops):
            p, m, v = r.normal(size=(4, 3)), np.zeros((4, 3)), np.zeros((4, 3))
            p0 = p.copy()
            g = np.random.default_rng(9).normal(size=(4, 3))
            fn(p, g, m, v, 0.01, 0.9, 0.999, 1e-8, 1)
            outs.append(p - p0)
        assert np.allclose(outs[0], outs[1], atol=1e-15, rtol=0)
