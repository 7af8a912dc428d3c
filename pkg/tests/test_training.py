import copy

import numpy as np
import pytest

from reformer import tensor as T
from reformer.data import build_vocab, synth_generate
from reformer.layers import Parameter
from reformer.model import ReFormer, ReFormerConfig
from reformer.training import (
    AdamState,
    NanGradientError,
    TrainingScheduleError,
    TrainPlan,
    adam_step,
    clip_gradients,
    predicate_class_weights,
    run_step1_sgg,
    run_step2_caption,
    run_step3_scst,
    scst_loss,
    warmup_lr,
)


def toy_world(seed=42, images=12, d_vis=16):
    synth = synth_generate(seed=seed, n_images=images, n_object_classes=4,
                           n_predicates=3, regions_per_image=(2, 3), d_vis=d_vis)
    vocab = build_vocab([c for r in synth.records for c in r.captions], min_count=1)
    return synth, vocab


def toy_model(vocab, d_vis=16, **overrides):
    base = dict(
        d=16, h=2, n_enc=1, n_dec=1, d_b=6, d_l=6, d_h=16, d_vis=d_vis,
        dropout=0.0, ffn_mult=2, n_object_classes=4, n_predicates=4,
        caption_vocab_size=len(vocab), max_caption_len=8, warmup_steps=50,
    )
    base.update(overrides)
    return ReFormer(ReFormerConfig(**base), seed=7)


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = Parameter("w", np.array([1.0, 2.0]))
        state = AdamState()
        adam_step({"w": p}, {"w": np.zeros(2)}, state, lr=0.1)
        assert p.data.tolist() == [1.0, 2.0]

    def test_first_update_magnitude_is_lr(self):
        # closed form: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        p = Parameter("w", np.array([0.0]))
        adam_step({"w": p}, {"w": np.array([3.0])}, AdamState(), lr=0.01)
        assert p.data[0] == pytest.approx(-0.01, rel=1e-6)

    def test_converges_on_quadratic(self):
        p = Parameter("x", np.array([5.0]))
        state = AdamState()
        for _ in range(2000):
            adam_step({"x": p}, {"x": 2.0 * p.data}, state, lr=0.05)
        assert abs(p.data[0]) < 1e-3

    def test_nan_gradient_aborts_with_name(self):
        p = Parameter("layer.w", np.array([1.0]))
        with pytest.raises(NanGradientError, match="layer.w"):
            adam_step({"layer.w": p}, {"layer.w": np.array([np.nan])}, AdamState(), 0.1)

    def test_frozen_param_skipped(self):
        p = Parameter("w", np.array([1.0]), trainable=False)
        adam_step({"w": p}, {"w": np.array([9.0])}, AdamState(), lr=0.1)
        assert p.data[0] == 1.0

    def test_missing_gradient_skipped(self):
        p = Parameter("w", np.array([1.0]))
        adam_step({"w": p}, {"w": None}, AdamState(), lr=0.1)
        assert p.data[0] == 1.0


class TestClip:
    def test_norm_reduced_to_max(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        clipped, norm = clip_gradients(grads, 1.0)
        assert norm == pytest.approx(5.0)
        total = np.sqrt(sum(float((g * g).sum()) for g in clipped.values()))
        assert total == pytest.approx(1.0)

    def test_small_gradients_untouched(self):
        grads = {"a": np.array([0.3])}
        clipped, _ = clip_gradients(grads, 1.0)
        assert clipped["a"][0] == 0.3


class TestWarmupSchedule:
    def test_value_at_the_knee(self):
        d, warmup = 512, 10000
        expected = d**-0.5 * warmup**-0.5
        assert warmup_lr(warmup, d, warmup) == pytest.approx(expected, abs=1e-12)

    def test_monotone_up_then_down(self):
        d, warmup = 512, 10000
        ramp = [warmup_lr(s, d, warmup) for s in range(1, warmup + 1, 500)]
        assert ramp == sorted(ramp)
        assert warmup_lr(2 * warmup, d, warmup) < warmup_lr(warmup, d, warmup)

    def test_continuous_at_knee(self):
        d, warmup = 256, 1000
        left = warmup_lr(warmup, d, warmup)
        right = warmup_lr(warmup + 1, d, warmup)
        assert abs(left - right) / left < 1e-3

    def test_steps_start_at_one(self):
        with pytest.raises(ValueError):
            warmup_lr(0, 512)


class TestScstLoss:
    def test_zero_advantage_means_zero_loss(self):
        logp = T.Tensor([-1.0, -2.0])
        assert float(scst_loss(logp, 0.5, 0.5).data) == 0.0

    def test_positive_advantage_pushes_logprobs_up(self):
        tape = T.Tape()
        logp = tape.leaf([-1.0, -2.0])
        loss = scst_loss(logp, 0.8, 0.2)
        T.backward(loss)
        # d loss / d logp = -(advantage) < 0: gradient descent raises logp
        assert (tape.grad(logp) < 0).all()

    def test_fixture_value(self):
        logp = T.Tensor([-1.0, -1.0, -1.0])
        assert float(scst_loss(logp, 0.8, 0.5).data) == pytest.approx(0.9, abs=1e-12)


class TestClassWeights:
    def test_background_capped_at_one(self):
        synth, _ = toy_world()
        w = predicate_class_weights(synth.records, 4)
        assert w[0] <= 1.0
        assert (w[1:] > 0).all()

    def test_rare_class_weighs_more(self):
        synth, _ = toy_world()
        counts = np.zeros(4)
        for r in synth.records:
            for _, p, _ in r.triplets:
                counts[p] += 1
        w = predicate_class_weights(synth.records, 4)
        fg = [c for c in range(1, 4) if counts[c] > 0]
        ordered = sorted(fg, key=lambda c: counts[c])
        assert all(
            w[a] >= w[b] - 1e-12
            for a, b in zip(ordered, ordered[1:])
        )


class TestStep1:
    def test_loss_decreases_and_decoder_untouched(self):
        synth, vocab = toy_world()
        model = toy_model(vocab)
        before = {
            name: p.data.copy()
            for name, p in model.named_parameters()
            if name.startswith("decoder.")
        }
        result = run_step1_sgg(model, synth.records, TrainPlan(epochs=12, seed=1))
        assert result.rows[-1]["loss_total"] < 0.5 * result.rows[0]["loss_total"]
        for name, p in model.named_parameters():
            if name.startswith("decoder."):
                assert (p.data == before[name]).all(), name
        assert model.config.train_stage == "sgg"

    def test_empty_dataset_rejected(self):
        _, vocab = toy_world()
        with pytest.raises(ValueError, match="empty"):
            run_step1_sgg(toy_model(vocab), [], TrainPlan(epochs=1))

    def test_log_rows_schema(self):
        synth, vocab = toy_world()
        model = toy_model(vocab)
        result = run_step1_sgg(model, synth.records, TrainPlan(epochs=1, seed=2))
        assert set(result.rows[0]) == {"step", "lr", "loss_total", "loss_caption",
                                       "loss_relation"}
        assert result.rows[0]["step"] == 1
        assert result.rows[0]["loss_caption"] == 0.0


class TestStep2:
    def test_vocab_size_mismatch_rejected(self):
        synth, vocab = toy_world()
        model = toy_model(vocab, caption_vocab_size=len(vocab) + 3)
        with pytest.raises(ValueError, match="vocabulary"):
            run_step2_caption(model, synth.records, vocab, TrainPlan(epochs=1))

    def test_freeze_flag_keeps_encoder_bits(self):
        synth, vocab = toy_world()
        model = toy_model(vocab, freeze_encoder_in_caption=True)
        run_step1_sgg(model, synth.records, TrainPlan(epochs=2, seed=3))
        frozen_before = {
            name: p.data.copy()
            for name, p in model.named_parameters()
            if name.startswith(("encoder.", "region_embed."))
        }
        run_step2_caption(model, synth.records, vocab, TrainPlan(epochs=3, seed=4))
        for name, p in model.named_parameters():
            if name.startswith(("encoder.", "region_embed.")):
                assert (p.data == frozen_before[name]).all(), name

    def test_lambda_zero_trains_captions_only(self):
        synth, vocab = toy_world()
        model = toy_model(vocab, use_relation_loss=False)
        result = run_step2_caption(model, synth.records, vocab,
                                   TrainPlan(epochs=2, seed=5))
        assert all(r["loss_relation"] == 0.0 for r in result.rows)
        assert model.config.train_stage == "caption"


class TestStep3:
    def test_requires_step2_stage(self):
        synth, vocab = toy_world()
        model = toy_model(vocab)
        with pytest.raises(TrainingScheduleError, match="step \\(ii\\)"):
            run_step3_scst(model, synth.records, vocab, TrainPlan())
        run_step1_sgg(model, synth.records, TrainPlan(epochs=1, seed=6))
        with pytest.raises(TrainingScheduleError):
            run_step3_scst(model, synth.records, vocab, TrainPlan())

    def test_missing_references_rejected(self):
        synth, vocab = toy_world()
        model = toy_model(vocab)
        model.config.train_stage = "caption"
        records = copy.deepcopy(synth.records)
        records[0].captions = []
        with pytest.raises(ValueError, match="reference captions"):
            run_step3_scst(model, records, vocab, TrainPlan(scst_iterations=1))

    def test_runs_and_logs_at_fixed_lr(self):
        synth, vocab = toy_world()
        model = toy_model(vocab)
        run_step2_caption(model, synth.records, vocab, TrainPlan(epochs=2, seed=7))
        result = run_step3_scst(model, synth.records, vocab,
                                TrainPlan(seed=8, scst_iterations=3, batch_size=4))
        assert len(result.rows) == 3
        assert all(r["lr"] == model.config.scst_lr == 5e-6 for r in result.rows)
        assert model.config.train_stage == "scst"


class TestDeterminism:
    def test_first_ten_step_losses_bit_identical(self):
        def run():
            synth, vocab = toy_world(seed=21, images=10)
            model = toy_model(vocab)
            plan = TrainPlan(epochs=5, batch_size=4, seed=11, shuffle=True)
            result = run_step1_sgg(model, synth.records, plan)
            return result.losses[:10]

        assert run() == run()

    def test_resumed_checkpoint_training_is_reproducible(self, tmp_path):
        from reformer.data import load_checkpoint, save_checkpoint

        synth, vocab = toy_world(seed=22, images=8)
        model = toy_model(vocab)
        run_step1_sgg(model, synth.records, TrainPlan(epochs=2, seed=12))
        path = tmp_path / "ckpt.bin"
        save_checkpoint(model.state_dict(), model.config.to_dict(), path)

        def resume():
            params, config = load_checkpoint(path)
            m = ReFormer(ReFormerConfig.from_dict(config), seed=0)
            m.load_state(params)
            result = run_step2_caption(m, synth.records, vocab,
                                       TrainPlan(epochs=1, seed=13))
            return result.losses

        assert resume() == resume()

    def test_training_log_written(self, tmp_path):
        synth, vocab = toy_world(seed=23, images=6)
        model = toy_model(vocab)
        log = tmp_path / "train.log.jsonl"
        run_step1_sgg(model, synth.records,
                      TrainPlan(epochs=1, seed=14, log_path=str(log)))
        import json

        rows = [json.loads(l) for l in log.read_text().splitlines()]
        assert rows and set(rows[0]) == {"step", "lr", "loss_total",
                                         "loss_caption", "loss_relation"}
