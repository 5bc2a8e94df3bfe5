import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crossview.nn import (
    BlockSpec,
    CHECKPOINT_FORMAT,
    DTYPE,
    MLP,
    MultiHeadAttention,
    ShapeError,
    TransformerLayer,
    check_gradients,
    cross_entropy,
    dot_product_attention,
    init_parameters,
    load_checkpoint,
    masked_softmax,
    max_pool_agg,
    save_checkpoint,
    softmax,
    state_dict_from_obj,
    state_dict_to_obj,
)

SMALL = BlockSpec(embedding_size=8, hidden_size=16, num_heads=2)


class TestBlockSpec:
    def test_head_divisibility(self):
        with pytest.raises(ShapeError):
            BlockSpec(embedding_size=10, num_heads=4)

    def test_defaults(self):
        spec = BlockSpec()
        assert spec.embedding_size == 128
        assert spec.hidden_size == 256
        assert spec.num_heads == 4


class TestMLP:
    def test_shape(self):
        mlp = MLP(3, 5, hidden=7)
        out = mlp(torch.randn(4, 3, dtype=DTYPE))
        assert out.shape == (4, 5)

    def test_trailing_dim_checked(self):
        mlp = MLP(3, 5)
        with pytest.raises(ShapeError):
            mlp(torch.randn(4, 4, dtype=DTYPE))

    def test_manual_oracle(self):
        torch.manual_seed(0)
        mlp = MLP(3, 2, hidden=4)
        x = torch.randn(5, 3, dtype=DTYPE)
        w1, b1 = mlp.fc1.weight, mlp.fc1.bias
        w2, b2 = mlp.fc2.weight, mlp.fc2.bias
        expected = torch.clamp(x @ w1.T + b1, min=0) @ w2.T + b2
        assert torch.allclose(mlp(x), expected, atol=1e-12)


class TestAttention:
    def test_dot_product_oracle(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=(3, 4))
        k = rng.normal(size=(5, 4))
        v = rng.normal(size=(5, 4))
        logits = q @ k.T / math.sqrt(4)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        w = e / e.sum(axis=1, keepdims=True)
        expected = w @ v
        got = dot_product_attention(*(torch.from_numpy(a) for a in (q, k, v)))
        assert np.abs(got.numpy() - expected).max() < 1e-12

    def test_requires_keys(self):
        q = torch.randn(2, 4, dtype=DTYPE)
        with pytest.raises(ShapeError):
            dot_product_attention(q, torch.empty(0, 4, dtype=DTYPE), torch.empty(0, 4, dtype=DTYPE))

    def test_key_value_mismatch(self):
        q = torch.randn(2, 4, dtype=DTYPE)
        with pytest.raises(ShapeError):
            dot_product_attention(q, torch.randn(3, 4, dtype=DTYPE), torch.randn(2, 4, dtype=DTYPE))

    def test_masked_key_has_no_influence(self):
        torch.manual_seed(1)
        attn = MultiHeadAttention(SMALL)
        x = torch.randn(5, 8, dtype=DTYPE)
        mask = torch.tensor([True, True, False, True, True])
        out1 = attn(x, x, x, key_mask=mask)
        x2 = x.clone()
        x2[2] += 100.0  # only as key/value; also as query row 2
        out2 = attn(x2, x2, x2, key_mask=mask)
        keep = torch.tensor([True, True, False, True, True])
        assert torch.allclose(out1[keep], out2[keep], atol=1e-12)

    def test_all_masked_row_is_zero(self):
        torch.manual_seed(2)
        attn = MultiHeadAttention(SMALL)
        x = torch.randn(3, 8, dtype=DTYPE)
        mask = torch.zeros(3, 3, dtype=torch.bool)
        mask[0, 1] = True
        out = attn(x, x, x, key_mask=mask)
        assert torch.all(out[1] == attn.wo.bias)  # rows 1, 2 see no keys
        assert torch.all(out[2] == attn.wo.bias)

    def test_batched_matches_loop(self):
        torch.manual_seed(3)
        attn = MultiHeadAttention(SMALL)
        x = torch.randn(4, 6, 8, dtype=DTYPE)
        mask = torch.rand(4, 6) > 0.3
        mask[:, 0] = True
        batched = attn(x, x, x, key_mask=mask)
        for b in range(4):
            single = attn(x[b], x[b], x[b], key_mask=mask[b])
            assert torch.allclose(batched[b], single, atol=1e-12)


class TestMaskedSoftmax:
    def test_rows_sum_to_one_and_masked_zero(self):
        logits = torch.randn(6, 9, dtype=DTYPE)
        mask = torch.rand(6, 9) > 0.4
        mask[0] = False  # fully masked row
        out = masked_softmax(logits, mask)
        assert torch.all(out[~mask] == 0.0)
        sums = out.sum(dim=-1)
        assert torch.all(sums[0] == 0.0)
        assert torch.allclose(sums[1:], torch.ones(5, dtype=DTYPE), atol=1e-12)

    @given(st.floats(-30, 30))
    @settings(max_examples=30, deadline=None)
    def test_shift_invariance(self, c):
        logits = torch.linspace(-2, 2, 8, dtype=DTYPE).reshape(1, 8)
        mask = torch.tensor([[True, False, True, True, False, True, True, True]])
        a = masked_softmax(logits, mask)
        b = masked_softmax(logits + c, mask)
        assert torch.allclose(a, b, atol=1e-9)

    def test_matches_plain_softmax_when_unmasked(self):
        logits = torch.randn(4, 7, dtype=DTYPE)
        mask = torch.ones(4, 7, dtype=torch.bool)
        assert torch.allclose(masked_softmax(logits, mask), torch.softmax(logits, dim=-1))


class TestLossesAndPooling:
    def test_uniform_cross_entropy_is_log_n(self):
        for n in (2, 10, 100):
            pred = torch.full((n,), 1.0 / n, dtype=DTYPE)
            target = torch.zeros(n, dtype=DTYPE)
            target[0] = 1.0
            assert abs(float(cross_entropy(pred, target)) - math.log(n)) < 1e-9

    def test_target_validation(self):
        pred = torch.tensor([0.5, 0.5], dtype=DTYPE)
        with pytest.raises(ValueError):
            cross_entropy(pred, torch.tensor([-0.1, 1.1], dtype=DTYPE))
        with pytest.raises(ValueError):
            cross_entropy(pred, torch.tensor([0.6, 0.6], dtype=DTYPE))

    def test_softmax_wrapper(self):
        x = torch.randn(5, dtype=DTYPE)
        assert torch.allclose(softmax(x), torch.softmax(x, dim=-1))

    def test_max_pool(self):
        x = torch.tensor([[1.0, 5.0], [3.0, 2.0], [0.0, 9.0]], dtype=DTYPE)
        assert torch.equal(max_pool_agg(x), torch.tensor([3.0, 9.0], dtype=DTYPE))
        valid = torch.tensor([True, True, False])
        assert torch.equal(max_pool_agg(x, valid), torch.tensor([3.0, 5.0], dtype=DTYPE))

    def test_max_pool_requires_rows(self):
        with pytest.raises(ShapeError):
            max_pool_agg(torch.empty(0, 3, dtype=DTYPE))
        with pytest.raises(ShapeError):
            max_pool_agg(torch.randn(2, 3, dtype=DTYPE), torch.tensor([False, False]))


class TestTransformerLayer:
    def test_output_shape_and_norm(self):
        torch.manual_seed(4)
        layer = TransformerLayer(SMALL)
        q = torch.randn(5, 8, dtype=DTYPE)
        kv = torch.randn(3, 8, dtype=DTYPE)
        out = layer(q, kv, kv)
        assert out.shape == (5, 8)
        # LayerNorm output rows have mean ~0 and unit variance.
        assert torch.allclose(out.mean(dim=-1), torch.zeros(5, dtype=DTYPE), atol=1e-9)


class TestGradientChecker:
    def test_passes_on_correct_gradients(self):
        torch.manual_seed(5)
        mlp = MLP(4, 3, hidden=6)
        x = torch.randn(7, 4, dtype=DTYPE)

        def loss_fn():
            return (mlp(x) ** 2).sum()

        report = check_gradients(loss_fn, list(mlp.named_parameters()))
        assert report.passed
        assert report.max_rel_error < 1e-6

    def test_detects_wrong_gradients(self):
        # A parameter used only through detach() has zero autograd gradient
        # but a nonzero true derivative; the checker must flag it.
        p = torch.randn(3, dtype=DTYPE, requires_grad=True)

        def loss_fn():
            return (p.detach() * p).sum()

        report = check_gradients(loss_fn, [("p", p)])
        assert not report.passed
        assert "p" in report.worst()

    def test_restores_parameters(self):
        torch.manual_seed(6)
        mlp = MLP(2, 2, hidden=3)
        before = {k: v.detach().clone() for k, v in mlp.named_parameters()}
        x = torch.randn(3, 2, dtype=DTYPE)
        check_gradients(lambda: mlp(x).sum(), list(mlp.named_parameters()))
        for k, v in mlp.named_parameters():
            assert torch.equal(v.detach(), before[k])


class TestInitAndCheckpoints:
    def test_init_deterministic(self):
        torch.manual_seed(7)
        a = MLP(3, 3)
        init_parameters(a)
        torch.manual_seed(7)
        b = MLP(3, 3)
        init_parameters(b)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        assert torch.all(a.fc1.bias == 0)

    def test_state_round_trip_bit_exact(self):
        torch.manual_seed(8)
        layer = TransformerLayer(SMALL)
        obj = state_dict_to_obj(layer)
        state = state_dict_from_obj(obj)
        for name, tensor in layer.state_dict().items():
            assert torch.equal(state[name], tensor)

    def test_save_load_checkpoint(self, tmp_path):
        torch.manual_seed(9)
        mlp = MLP(4, 4)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, mlp, extra={"note": "x"})
        state, extra = load_checkpoint(path)
        assert extra == {"note": "x"}
        for name, tensor in mlp.state_dict().items():
            assert torch.equal(state[name], tensor)

    def test_format_tag_checked(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"format": "other", "params": {}}))
        with pytest.raises(ValueError, match="format"):
            load_checkpoint(path)

    def test_checkpoint_bytes_deterministic(self, tmp_path):
        torch.manual_seed(10)
        mlp = MLP(3, 3)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_checkpoint(p1, mlp)
        save_checkpoint(p2, mlp)
        assert p1.read_bytes() == p2.read_bytes()
