import math

import numpy as np
import pytest

from xrtd.model import (GatedBias, ModelConfig, attention_weights, encode,
                        gated_rel_pos_bias, init_model_pair, init_params,
                        mlm_logits, rtd_logits)
from xrtd.tensor import Tensor, backward, using_dtype, zero_grads


def small_config(**overrides):
    base = dict(num_layers=2, hidden_size=8, num_heads=2, ffn_size=16,
                vocab_size=20, max_rel_distance=4, role="discriminator")
    base.update(overrides)
    return ModelConfig(**base)


class TestConfig:
    def test_head_divisibility_enforced(self):
        with pytest.raises(ValueError):
            small_config(hidden_size=10, num_heads=4)

    def test_head_dim(self):
        assert small_config().head_dim == 4

    def test_generator_must_be_smaller(self):
        gen = small_config(num_layers=3, role="generator")
        disc = small_config(num_layers=3)
        with pytest.raises(ValueError):
            init_model_pair(gen, disc, seed=0)


class TestInit:
    def test_all_sampled_weights_in_range(self):
        params = init_params(small_config(), seed=0)
        for name, t in params.tensors.items():
            if name.endswith(".g"):  # norm gains start at 1, not sampled
                continue
            assert t.data.min() >= -0.02 - 1e-9, name
            assert t.data.max() <= 0.02 + 1e-9, name

    def test_biases_zero_and_gains_one(self):
        params = init_params(small_config(), seed=0)
        assert np.all(params["layer0.attn.bq"].data == 0)
        assert np.all(params["layer1.ffn.b2"].data == 0)
        assert np.all(params["final_ln.g"].data == 1)

    def test_rescaled_std_ratio(self):
        # >=1e4 entries per matrix so the empirical std is tight
        cfg = small_config(num_layers=3, hidden_size=100, num_heads=4,
                           ffn_size=104, vocab_size=50)
        params = init_params(cfg, seed=1)
        uniform_std = 0.02 / math.sqrt(3)
        for layer in range(3):
            factor = 1.0 / math.sqrt(2 * (layer + 1))
            for name in (f"layer{layer}.attn.wo", f"layer{layer}.ffn.w2"):
                ratio = params[name].data.std() / uniform_std
                assert ratio == pytest.approx(factor, rel=0.05), name

    def test_block2_ffn_output_std_value(self):
        cfg = small_config(num_layers=2, hidden_size=100, num_heads=4,
                           ffn_size=104, vocab_size=50)
        params = init_params(cfg, seed=2)
        # uniform std 0.02/sqrt(3), then divided by sqrt(4) at block 2
        assert params["layer1.ffn.w2"].data.std() == pytest.approx(0.005774, rel=0.05)

    def test_block1_rescale_factor(self):
        assert 1.0 / math.sqrt(2 * 1) == pytest.approx(1 / math.sqrt(2))

    def test_deterministic_for_seed(self):
        a = init_params(small_config(), seed=3)
        b = init_params(small_config(), seed=3)
        for name in a.tensors:
            assert np.array_equal(a[name].data, b[name].data)


def make_gated_bias(d_value, u, v, w, k=4):
    table = np.full(2 * k + 1, d_value, dtype=np.float64)
    return GatedBias(Tensor(table, requires_grad=True),
                     Tensor(np.asarray(u, dtype=np.float64), requires_grad=True),
                     Tensor(np.asarray(v, dtype=np.float64), requires_grad=True),
                     Tensor(np.asarray(w, dtype=np.float64), requires_grad=True),
                     max_distance=k)


class TestGatedBias:
    def test_update_gate_one_gives_twice_d(self):
        # q.u -> +inf saturates the update gate at exactly 1.0
        bias = make_gated_bias(0.7, [1e4, 0.0], [0.0, 0.0], 1.0)
        q = Tensor(np.array([1.0, 0.0]))
        r = gated_rel_pos_bias(q, 2, bias)
        assert r.item() == 2 * 0.7

    def test_both_gates_zero_gives_d(self):
        bias = make_gated_bias(-0.3, [-1e4, 0.0], [-1e4, 0.0], 5.0)
        q = Tensor(np.array([1.0, 0.0]))
        r = gated_rel_pos_bias(q, 0, bias)
        assert r.item() == -0.3

    def test_mid_gates_give_1_75_d(self):
        # q.u = q.v = 0 -> both gates 0.5; with w = 1: d + d/2 + d/4
        bias = make_gated_bias(0.4, [0.0, 0.0], [0.0, 0.0], 1.0)
        q = Tensor(np.array([1.0, 1.0]))
        r = gated_rel_pos_bias(q, 1, bias)
        assert r.item() == pytest.approx(1.75 * 0.4, abs=1e-12)

    @pytest.mark.parametrize("d_value", [-1.0, 0.0, 0.3, 2.0])
    def test_gate_identities_hold_for_all_d(self, d_value):
        q = Tensor(np.array([1.0, 0.0]))
        up = make_gated_bias(d_value, [1e4, 0.0], [0.0, 0.0], 3.0)
        assert gated_rel_pos_bias(q, 1, up).item() == 2 * d_value
        down = make_gated_bias(d_value, [-1e4, 0.0], [-1e4, 0.0], 3.0)
        assert gated_rel_pos_bias(q, 1, down).item() == d_value

    def test_offset_clipping_equalizes_far_keys(self):
        bias = make_gated_bias(0.0, [0.3, -0.2], [0.1, 0.4], 0.7, k=4)
        bias.d_table.data = np.linspace(-1, 1, 9)
        q = Tensor(np.array([0.5, -0.5]))
        at_k = gated_rel_pos_bias(q, 4, bias).item()
        beyond_k = gated_rel_pos_bias(q, 9, bias).item()
        assert at_k == beyond_k

    def test_differentiable_wrt_all_parameters(self):
        with using_dtype(np.float64):
            bias = make_gated_bias(0.5, [0.2, -0.1], [0.3, 0.2], 0.8)
            q = Tensor(np.array([0.4, 0.6]), requires_grad=True)
            backward(gated_rel_pos_bias(q, 2, bias))
            for t in (bias.d_table, bias.u, bias.v, bias.w, q):
                assert t.grad is not None


class TestAttention:
    def _hidden(self, params, ids):
        from xrtd.tensor import embedding
        return embedding(params["embed"], ids)

    def test_uniform_rows_when_scores_constant(self):
        cfg = small_config()
        params = init_params(cfg, seed=0)
        # identical keys and zero bias -> every attention row is uniform
        params["layer0.attn.wk"].data[:] = 0
        params["layer0.attn.d_table"].data[:] = 0
        ids = np.array([[5, 6, 7, 8]])
        h = self._hidden(params, ids)
        key_mask = np.zeros((1, 1, 1, 4), dtype=np.float32)
        attn, _ = attention_weights(h, params, 0, key_mask)
        assert np.allclose(attn.data, 0.25, atol=1e-6)

    def test_rows_sum_to_one(self):
        params = init_params(small_config(), seed=1)
        ids = np.random.default_rng(0).integers(5, 20, size=(3, 6))
        h = self._hidden(params, ids)
        key_mask = np.zeros((3, 1, 1, 6), dtype=np.float32)
        attn, _ = attention_weights(h, params, 0, key_mask)
        assert np.allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)
        assert attn.data.min() >= 0

    def test_three_token_single_head_hand_oracle(self):
        with using_dtype(np.float64):
            cfg = ModelConfig(num_layers=1, hidden_size=2, num_heads=1,
                              ffn_size=4, vocab_size=10, max_rel_distance=2)
            params = init_params(cfg, seed=0)
            rng = np.random.default_rng(42)
            for name in ("wq", "wk", "wv"):
                params[f"layer0.attn.{name}"].data = rng.normal(size=(2, 2))
                params[f"layer0.attn.b{name[1]}"].data = np.zeros(2)
            params["layer0.attn.d_table"].data = rng.normal(size=(5, 1))
            params["layer0.attn.gate_u"].data = rng.normal(size=(1, 2))
            params["layer0.attn.gate_v"].data = rng.normal(size=(1, 2))
            params["layer0.attn.gate_w"].data = np.array([0.9])
            h_np = rng.normal(size=(1, 3, 2))
            attn, v = attention_weights(Tensor(h_np), params, 0,
                                        np.zeros((1, 1, 1, 3)))

            # independent recomputation with plain numpy
            q = h_np[0] @ params["layer0.attn.wq"].data
            k = h_np[0] @ params["layer0.attn.wk"].data
            scores = q @ k.T / math.sqrt(2)
            sig = lambda x: 1 / (1 + math.exp(-x))
            for i in range(3):
                gu = sig(q[i] @ params["layer0.attn.gate_u"].data[0])
                gr = sig(q[i] @ params["layer0.attn.gate_v"].data[0])
                for j in range(3):
                    d = params["layer0.attn.d_table"].data[
                        np.clip(i - j, -2, 2) + 2, 0]
                    scores[i, j] += d + gu * d + (1 - gu) * (0.9 * gr * d)
            expected = np.exp(scores - scores.max(axis=1, keepdims=True))
            expected /= expected.sum(axis=1, keepdims=True)
            assert np.allclose(attn.data[0, 0], expected, atol=1e-6)

    def test_no_dead_gate_parameters(self):
        cfg = small_config()
        params = init_params(cfg, seed=3)
        ids = np.random.default_rng(1).integers(5, 20, size=(2, 5))
        zero_grads(params.tensors.values())
        loss = encode(ids, params)[-1].sum()
        backward(loss)
        for layer in range(cfg.num_layers):
            for name in ("d_table", "gate_u", "gate_v", "gate_w"):
                grad = params[f"layer{layer}.attn.{name}"].grad
                assert grad is not None
                assert np.any(grad != 0), f"layer{layer}.{name} has zero gradient"


class TestEncode:
    def test_layer_count_includes_embedding_layer(self):
        cfg = small_config()
        params = init_params(cfg, seed=0)
        states = encode(np.array([[5, 6]]), params)
        assert len(states) == cfg.num_layers + 1

    def test_single_token_outputs_finite(self):
        params = init_params(small_config(), seed=0)
        for state in encode(np.array([[7]]), params):
            assert np.all(np.isfinite(state.data))

    def test_out_of_range_id_rejected(self):
        params = init_params(small_config(), seed=0)
        with pytest.raises(ValueError):
            encode(np.array([[25]]), params)

    def test_batch_permutation_equivariance(self):
        params = init_params(small_config(), seed=0)
        ids = np.random.default_rng(2).integers(5, 20, size=(3, 4))
        out = encode(ids, params)[-1].data
        perm = [2, 0, 1]
        out_perm = encode(ids[perm], params)[-1].data
        assert np.allclose(out[perm], out_perm, atol=1e-6)

    def test_padding_invariance(self):
        params = init_params(small_config(), seed=0)
        ids = np.array([[5, 6, 7, 0, 0]])
        longer = np.array([[5, 6, 7, 0, 0, 0, 0, 0, 0, 0]])
        short_out = encode(ids, params)[-1].data[0, :3]
        long_out = encode(longer, params)[-1].data[0, :3]
        assert np.allclose(short_out, long_out, atol=1e-5)


class TestHeads:
    def test_mlm_logit_shape(self):
        cfg = small_config(role="generator")
        params = init_params(cfg, seed=0)
        h = encode(np.array([[5, 6, 7]]), params)[-1]
        assert mlm_logits(h, params).shape == (1, 3, cfg.vocab_size)

    def test_rtd_logit_shape(self):
        params = init_params(small_config(), seed=0)
        h = encode(np.array([[5, 6, 7]]), params)[-1]
        assert rtd_logits(h, params).shape == (1, 3)

    def test_shared_embeddings_are_one_object(self):
        gen = small_config(num_layers=1, role="generator")
        disc = small_config(num_layers=2)
        pair = init_model_pair(gen, disc, seed=0)
        assert pair.generator["embed"] is pair.discriminator["embed"]
        named = pair.all_parameters()
        assert "gen.embed" not in named
        assert "disc.embed" in named

    def test_unshared_embeddings(self):
        gen = small_config(num_layers=1, role="generator")
        disc = small_config(num_layers=2)
        pair = init_model_pair(gen, disc, seed=0, share_embeddings=False)
        assert pair.generator["embed"] is not pair.discriminator["embed"]
        assert "gen.embed" in pair.all_parameters()


class TestSerialization:
    def test_save_load_roundtrip(self, tmp_path):
        params = init_params(small_config(), seed=5)
        path = tmp_path / "params.bin"
        params.save(path)
        other = init_params(small_config(), seed=6)
        other.load_values(path)
        for name in params.tensors:
            assert np.array_equal(params[name].data, other[name].data), name

    def test_name_mismatch_rejected(self, tmp_path):
        params = init_params(small_config(), seed=5)
        path = tmp_path / "params.bin"
        params.save(path)
        other = init_params(small_config(role="generator"), seed=6)
        with pytest.raises(ValueError):
            other.load_values(path)
