import math

import numpy as np
import pytest

import fedpull as fp
from fedpull.model import ModelConfig, ModelState, tensor_shapes
from helpers import fd_gradient_check, models_equal, small_corpus


def closed_form_param_count(cfg: ModelConfig) -> int:
    """Independent parameter-count formula, summed term by term."""
    d, f, v, L = cfg.d_model, cfg.d_ffn, cfg.vocab_size, cfg.max_len
    emb = v * d + L * d
    enc_layer = 4 * d * d + (d * f + f + f * d + d) + 4 * d
    dec_layer = 8 * d * d + (d * f + f + f * d + d) + 6 * d
    out = d * v + v
    return emb + cfg.enc_layers * enc_layer + cfg.dec_layers * dec_layer + out


class TestInit:
    def test_deterministic_bitwise(self):
        cfg = fp.ModelConfig(seed=7)
        assert models_equal(fp.init_model(cfg), fp.init_model(cfg))

    def test_seed_changes_weights(self):
        a = fp.init_model(fp.ModelConfig(seed=1))
        b = fp.init_model(fp.ModelConfig(seed=2))
        assert not models_equal(a, b)

    def test_head_divisibility_error(self):
        with pytest.raises(ValueError, match="d_model not divisible by n_heads"):
            fp.ModelConfig(d_model=32, n_heads=3)

    def test_dimension_error(self):
        with pytest.raises(ValueError, match="d_ffn"):
            fp.ModelConfig(d_ffn=0)

    def test_param_count_closed_form(self, default_model):
        cfg = default_model.config
        assert default_model.param_count == closed_form_param_count(cfg) == 45356

    def test_param_count_other_shape(self):
        cfg = fp.ModelConfig(d_model=16, n_heads=4, enc_layers=1, dec_layers=3, d_ffn=24, vocab_size=20, max_len=10)
        assert fp.init_model(cfg).param_count == closed_form_param_count(cfg)

    def test_ln_gains_one_offsets_zero(self, default_model):
        assert np.all(default_model.tensors["enc.0.ln1.g"].values == 1.0)
        assert np.all(default_model.tensors["enc.0.ln1.b"].values == 0.0)
        assert np.all(default_model.tensors["out.b"].values == 0.0)

    def test_xavier_bound(self, default_model):
        w = default_model.tensors["enc.0.attn.wq"]
        bound = math.sqrt(6.0 / 64.0)
        assert np.max(np.abs(w.values)) <= bound

    def test_tensor_inventory_matches_config(self, default_model):
        assert set(default_model.tensors) == set(tensor_shapes(default_model.config))


class TestForwardLoss:
    def test_untrained_near_uniform(self):
        target = math.log(44)
        for seed in (0, 1, 2, 3, 4):
            model = fp.init_model(fp.ModelConfig(seed=seed))
            batch = []
            for k, kind in enumerate(("copy", "reverse", "sort", "shift3", "swap_pairs")):
                batch.extend(
                    fp.generate_domain(fp.DomainSpec(kind=kind, size=40, seed=seed * 10 + k)).pairs[:8]
                )
            loss = fp.forward_loss(model, batch)
            assert abs(loss - target) <= 0.15 * target

    def test_constant_logits_give_exact_uniform(self, default_model):
        arrays = default_model.arrays64()
        arrays["out.w"] = np.zeros_like(arrays["out.w"])
        arrays["out.b"] = np.zeros_like(arrays["out.b"])
        flat = ModelState.from_arrays(default_model.config, arrays)
        batch = [((4, 5, 6), (4, 5, 6))]
        assert abs(fp.forward_loss(flat, batch) - math.log(44)) < 1e-4

    def test_empty_batch(self, default_model):
        with pytest.raises(ValueError, match="empty batch"):
            fp.forward_loss(default_model, [])

    def test_token_out_of_range(self, default_model):
        with pytest.raises(ValueError, match="token id 99 out of range at pair 1, source position 2"):
            fp.forward_loss(default_model, [((4, 5), (4, 5)), ((4, 5, 99), (4,))])

    def test_deterministic(self, default_model):
        batch = list(small_corpus().pairs[:6])
        assert fp.forward_loss(default_model, batch) == fp.forward_loss(default_model, batch)


class TestBackward:
    def test_names_mirror_model(self, default_model):
        grads = fp.backward(default_model, list(small_corpus().pairs[:4]))
        assert sorted(grads) == default_model.names()
        for name, g in grads.items():
            assert g.shape == default_model.tensors[name].shape

    def test_unused_positional_rows_zero(self, default_model):
        batch = [((4, 5, 6), (4, 5, 6))]  # max position used: 4 (BOS + 3 tokens)
        grads = fp.backward(default_model, batch)
        pos = grads["emb.pos"].as_matrix()
        assert np.all(pos[5:] == 0.0)
        assert np.any(pos[:4] != 0.0)

    def test_unused_symbol_rows_zero(self, default_model):
        batch = [((4, 5), (5, 4))]
        grads = fp.backward(default_model, batch)
        tok = grads["emb.tok"].as_matrix()
        assert np.all(tok[20] == 0.0)

    def test_bitwise_deterministic(self, default_model):
        batch = list(small_corpus().pairs[:4])
        g1 = fp.backward(default_model, batch)
        g2 = fp.backward(default_model, batch)
        assert all(np.array_equal(g1[n].values, g2[n].values) for n in g1)

    def test_finite_differences(self):
        rng = np.random.default_rng(123)
        for trial in range(2):
            model = fp.init_model(fp.ModelConfig(seed=trial + 10))
            batch = list(small_corpus(kind="reverse", seed=trial).pairs[:3])
            checked, failed, worst = fd_gradient_check(model, batch, 60, rng)
            assert failed == 0, f"trial {trial}: {failed} coords exceeded 1e-4 (worst {worst:.2e})"


class TestTrainSteps:
    def test_zero_steps_noop(self, default_model, copy_corpus):
        out, opt, losses = fp.train_steps(default_model, fp.make_optimizer(), copy_corpus, 0, 8, 1)
        assert out is default_model and losses == []

    def test_empty_corpus_rejected(self, default_model):
        with pytest.raises(ValueError, match="empty"):
            fp.data.Corpus(domain="x", pairs=())

    def test_loss_improves_on_copy(self, trained_copy):
        _, losses = trained_copy
        assert np.mean(losses[-50:]) < np.mean(losses[:50])

    def test_deterministic_same_seed(self, default_model, copy_corpus):
        a, _, la = fp.train_steps(default_model, fp.make_optimizer(), copy_corpus, 25, 8, 99)
        b, _, lb = fp.train_steps(default_model, fp.make_optimizer(), copy_corpus, 25, 8, 99)
        assert models_equal(a, b) and la == lb

    def test_optimizer_state_advances(self, default_model, copy_corpus):
        _, opt, _ = fp.train_steps(default_model, fp.make_optimizer(), copy_corpus, 5, 8, 1)
        assert opt.step == 5
        assert sorted(opt.m) == default_model.names()
        assert opt.m["out.w"].shape == (32, 44)

    def test_sgd_supported(self, default_model, copy_corpus):
        out, opt, losses = fp.train_steps(
            default_model, fp.make_optimizer("sgd", 0.1), copy_corpus, 10, 8, 1
        )
        assert opt.m is None and len(losses) == 10
        assert not models_equal(out, default_model)

    def test_inputs_not_mutated(self, default_model, copy_corpus):
        before = {n: default_model.tensors[n].values.copy() for n in default_model.names()}
        fp.train_steps(default_model, fp.make_optimizer(), copy_corpus, 5, 8, 1)
        assert all(np.array_equal(before[n], default_model.tensors[n].values) for n in before)

    def test_smoothed_loss_drops_20pct_each_domain(self):
        # 500 steps with the default config reduce the 50-step trailing mean by >= 20%
        for kind in ("copy", "reverse", "sort", "shift3", "swap_pairs"):
            corpus = fp.generate_domain(fp.DomainSpec(kind=kind, size=500, seed=60))
            model = fp.init_model(fp.ModelConfig(seed=1))
            _, _, losses = fp.train_steps(model, fp.make_optimizer(), corpus, 500, 16, 1)
            first = float(np.mean(losses[:50]))
            last = float(np.mean(losses[-50:]))
            assert last <= 0.8 * first, f"{kind}: {first:.3f} -> {last:.3f}"


class TestGreedyDecode:
    def test_converged_copy_model_copies(self, trained_copy, copy_corpus):
        model, _ = trained_copy
        dev = list(copy_corpus.pairs[:50])
        hyps = fp.greedy_decode_batch(model, [src for src, _ in dev])
        acc = fp.token_accuracy(hyps, [list(t) for _, t in dev])
        assert acc > 0.99
        src = copy_corpus.pairs[0][0]
        assert fp.greedy_decode(model, src) == list(src)

    def test_deterministic(self, trained_copy):
        model, _ = trained_copy
        src = (5, 6, 7, 8)
        assert fp.greedy_decode(model, src) == fp.greedy_decode(model, src)

    def test_empty_source_no_crash(self, default_model, trained_copy):
        out = fp.greedy_decode(default_model, ())
        assert isinstance(out, list) and len(out) <= default_model.config.max_len - 1
        model, _ = trained_copy
        assert fp.greedy_decode(model, ()) == []

    def test_batch_matches_single(self, trained_copy, copy_corpus):
        model, _ = trained_copy
        sources = [src for src, _ in copy_corpus.pairs[:10]]
        batched = fp.greedy_decode_batch(model, sources)
        assert batched == [fp.greedy_decode(model, s) for s in sources]

    def test_source_too_long(self, default_model):
        with pytest.raises(ValueError, match="exceeds max_len"):
            fp.greedy_decode(default_model, tuple([4] * 17))


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path, trained_copy):
        model, _ = trained_copy
        path = tmp_path / "model.ckpt"
        fp.save_checkpoint(model, path)
        back = fp.load_checkpoint(path)
        assert back.config == model.config
        assert models_equal(back, model)

    def test_header_is_text(self, tmp_path, default_model):
        path = tmp_path / "m.ckpt"
        fp.save_checkpoint(default_model, path)
        head = path.read_bytes().split(b"\n\n", 1)[0].decode("utf-8")
        assert "d_model=32" in head and "vocab_size=44" in head
