"""Schedule exactness, batch assembly, step/loop determinism, resume."""

import json

import numpy as np
import pytest

from sonoseg.checkpoint import load_checkpoint, save_checkpoint
from sonoseg.model import ModelConfig, PromptModel
from sonoseg.prompts import Box, Point
from sonoseg.synth import synth_generate
from sonoseg.train import (
    TrainConfig,
    TrainState,
    TrainingAborted,
    assemble_batch,
    load_train_state,
    lr_at,
    save_train_state,
    step_rng,
    train_loop,
    train_step,
)


def paper_schedule():
    return TrainConfig(total_iters=30_000, base_lr=1e-4, warmup_iters=500, milestones=(20_000, 28_888), decay_factor=0.1)


def small_model(seed=0):
    cfg = ModelConfig(image_size=32, patch=8, embed_dim=32, encoder_depth=1, encoder_heads=2, decoder_depth=1, decoder_heads=2, pe_num_freqs=8)
    return PromptModel.initialize(cfg, seed=seed)


def small_config(**kw):
    base = dict(total_iters=100, base_lr=1e-3, warmup_iters=5, milestones=(), decay_factor=0.1, batch_size=2, flip_prob=0.5, seed=1, val_every=0)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_probe_points_exact_f32(self):
        cfg = paper_schedule()
        base = np.float32(1e-4)
        decay = np.float32(0.1)
        assert lr_at(cfg, 0) == 0.0
        assert lr_at(cfg, 250) == float(base * np.float32(0.5))
        assert lr_at(cfg, 250) == pytest.approx(5e-5)
        for it in (500, 1_000, 19_999):
            assert lr_at(cfg, it) == float(base)
        for it in (20_000, 25_000, 28_887):
            assert lr_at(cfg, it) == float(np.float32(base * decay))
        for it in (28_888, 29_000, 30_000):
            assert lr_at(cfg, it) == float(np.float32(np.float32(base * decay) * decay))

    def test_paper_values(self):
        cfg = paper_schedule()
        assert lr_at(cfg, 1_000) == pytest.approx(1e-4)
        assert lr_at(cfg, 25_000) == pytest.approx(1e-5)
        assert lr_at(cfg, 29_000) == pytest.approx(1e-6)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            lr_at(paper_schedule(), -1)
        with pytest.raises(ValueError):
            lr_at(paper_schedule(), 30_001)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="milestones"):
            TrainConfig(total_iters=100, milestones=(50, 40))
        with pytest.raises(ValueError, match="milestones"):
            TrainConfig(total_iters=100, milestones=(100,))
        with pytest.raises(ValueError, match="flip_prob"):
            TrainConfig(total_iters=100, milestones=(), flip_prob=1.5)


class TestAssembleBatch:
    def test_batch_size_respected(self):
        ds = synth_generate(6, 32, seed=0)
        model = small_model()
        batch = assemble_batch(ds, 8, np.random.default_rng(0), 0.5, model.config)
        assert len(batch) == 8

    def test_no_flip_pixels_identical_to_source(self):
        ds = synth_generate(4, 32, seed=1)
        model = small_model()
        batch = assemble_batch(ds, 4, np.random.default_rng(1), 0.0, model.config)
        by_id = {im.id: im for im in ds.images}
        for item in batch:
            np.testing.assert_array_equal(item.pixels, by_id[item.image_id].pixels)

    def test_same_seed_identical_batches(self):
        ds = synth_generate(5, 32, seed=2)
        model = small_model()
        a = assemble_batch(ds, 6, np.random.default_rng(9), 0.5, model.config)
        b = assemble_batch(ds, 6, np.random.default_rng(9), 0.5, model.config)
        assert [x.image_id for x in a] == [x.image_id for x in b]
        for ia, ib in zip(a, b):
            np.testing.assert_array_equal(ia.pixels, ib.pixels)
            assert [i.prompt for i in ia.instances] == [i.prompt for i in ib.instances]

    def test_prompts_live_in_model_coordinates(self):
        ds = synth_generate(4, 64, seed=3)  # source is 64, model input is 32
        model = small_model()
        batch = assemble_batch(ds, 6, np.random.default_rng(2), 0.0, model.config)
        size = model.config.image_size
        for item in batch:
            for inst in item.instances:
                p = inst.prompt
                if isinstance(p, Point):
                    assert 0 <= p.x <= size and 0 <= p.y <= size
                else:
                    assert isinstance(p, Box) and p.x2 <= size and p.y2 <= size
                assert inst.target.shape == (model.config.mask_res, model.config.mask_res)

    def test_prompts_per_image_cap(self):
        ds = synth_generate(4, 32, seed=4)
        model = small_model()
        batch = assemble_batch(ds, 4, np.random.default_rng(3), 0.0, model.config, prompts_per_image=1)
        assert all(len(item.instances) <= 1 for item in batch)


class TestTrainStep:
    def test_hundred_finite_steps(self):
        ds = synth_generate(4, 32, seed=5)
        model = small_model(seed=1)
        cfg = small_config(total_iters=120)
        state = TrainState()
        for _ in range(100):
            batch = assemble_batch(ds, cfg.batch_size, step_rng(cfg.seed, state.iter), cfg.flip_prob, model.config)
            rec = train_step(model, batch, state, cfg)
            assert np.isfinite(rec.total)
        assert state.iter == 100
        assert [r.iter for r in state.loss_history] == list(range(100))

    @pytest.mark.parametrize("model_seed", [0, 1])
    def test_fixed_batch_loss_mostly_decreases(self, model_seed):
        from sonoseg.model import PromptModel, toy_config

        ds = synth_generate(4, 64, seed=7)
        model = PromptModel.initialize(toy_config(), seed=model_seed)
        cfg = TrainConfig(total_iters=60, base_lr=7e-4, warmup_iters=0, milestones=(), batch_size=2, flip_prob=0.0, seed=1, val_every=0)
        state = TrainState()
        batch = assemble_batch(ds, 2, step_rng(0, 0), 0.0, model.config)
        losses = [train_step(model, batch, state, cfg).total for _ in range(51)]
        drops = sum(1 for a, b in zip(losses, losses[1:]) if b < a)
        assert drops >= 45  # >= 90% of 50 transitions

    def test_non_finite_loss_aborts_with_diagnostics(self):
        ds = synth_generate(2, 32, seed=7)
        model = small_model(seed=3)
        model.params["patch_embed.weight"].data[:] = np.nan
        cfg = small_config()
        state = TrainState()
        batch = assemble_batch(ds, 2, step_rng(1, 0), 0.0, model.config)
        with pytest.raises(TrainingAborted, match="iter 0"):
            train_step(model, batch, state, cfg)


class TestLoopAndResume:
    def test_two_runs_bitwise_identical(self):
        ds = synth_generate(3, 32, seed=8)
        histories = []
        for _ in range(2):
            model = small_model(seed=4)
            _, state = train_loop(model, ds, small_config(total_iters=12, val_every=0))
            histories.append([(r.iter, r.total, r.focal, r.dice, r.iou) for r in state.loss_history])
        assert histories[0] == histories[1]

    def test_loop_emits_final_checkpoint_and_log(self, tmp_path):
        ds = synth_generate(3, 32, seed=9)
        model = small_model(seed=5)
        cfg = small_config(total_iters=10, val_every=5)
        train_ds, val_ds = ds, synth_generate(2, 32, seed=10)
        _, state = train_loop(model, train_ds, cfg, out_dir=tmp_path, val_dataset=val_ds)
        assert (tmp_path / "checkpoint_final.ckpt").exists()
        lines = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
        step_lines = [rec for rec in lines if "loss_total" in rec]
        val_lines = [rec for rec in lines if "map_point" in rec]
        assert len(step_lines) == 10
        assert len(val_lines) == 2  # val_every=5 over 10 iters
        assert {"iter", "lr", "loss_total", "loss_focal", "loss_dice", "loss_iou"} <= set(step_lines[0])
        assert {"iter", "map_point", "map50_point", "map_box", "map50_box"} <= set(val_lines[0])
        loaded = load_checkpoint(tmp_path / "checkpoint_final.ckpt")
        for name, p in model.params.items():
            assert loaded.params[name].data.tobytes() == p.data.tobytes()

    def test_resume_reproduces_next_loss(self, tmp_path):
        ds = synth_generate(3, 32, seed=11)
        cfg = small_config(total_iters=8, val_every=0, seed=12)

        model_a = small_model(seed=6)
        _, state_a = train_loop(model_a, ds, cfg)

        model_b = small_model(seed=6)
        half = TrainConfig(**{**cfg.__dict__, "total_iters": 5})
        _, state_b = train_loop(model_b, ds, half)
        save_checkpoint(model_b, tmp_path / "mid.ckpt")
        save_train_state(state_b, tmp_path / "mid.state.npz")

        resumed_model = load_checkpoint(tmp_path / "mid.ckpt")
        resumed_state = load_train_state(tmp_path / "mid.state.npz")
        assert resumed_state.iter == 5
        _, state_c = train_loop(resumed_model, ds, cfg, state=resumed_state)
        tail_a = [(r.iter, r.total) for r in state_a.loss_history[5:]]
        tail_c = [(r.iter, r.total) for r in state_c.loss_history]
        assert tail_a == tail_c
