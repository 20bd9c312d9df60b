import copy
import math

import numpy as np
import pytest
import torch

from lorl.training import (
    DataError,
    StageError,
    TrainConfig,
    build_state,
    curriculum_filter,
    encode_batch,
    load_checkpoint,
    load_images,
    lr_schedule,
    perception_loss,
    reasoning_loss,
    run_stage,
    save_checkpoint,
    total_loss,
)


MICRO = dict(image_size=32, num_slots=3, latent_dim=16, concept_dim=16,
             batch_size=4, n1=1, n2=1, n3=1)


class TestTrainConfig:
    def test_file_roundtrip(self, tmp_path):
        cfg = TrainConfig(model_tag="monet", family="composite-chair",
                          alpha=0.01, beta=1.0, n1=3, n2=0, n3=5,
                          language_lrs=(1e-3, 2e-4, 2e-5))
        path = tmp_path / "train.cfg"
        cfg.to_file(path)
        assert TrainConfig.from_file(path) == cfg

    def test_overrides_win(self, tmp_path):
        cfg = TrainConfig(n1=3)
        path = tmp_path / "train.cfg"
        cfg.to_file(path)
        loaded = TrainConfig.from_file(path, overrides={"n1": 7, "seed": None})
        assert loaded.n1 == 7
        assert loaded.seed == cfg.seed  # None overrides are ignored

    def test_comments_ignored(self, tmp_path):
        (tmp_path / "c.cfg").write_text("n1 = 4  # short warmup\n\nseed = 9\n")
        cfg = TrainConfig.from_file(tmp_path / "c.cfg")
        assert cfg.n1 == 4 and cfg.seed == 9

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(alpha=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


class TestLRSchedule:
    def test_warmup_then_halving(self):
        cfg = TrainConfig()
        assert lr_schedule(0, 1, "slot-attention", cfg) == 0.0
        assert lr_schedule(5_000, 1, "slot-attention", cfg) == pytest.approx(2e-4)
        assert lr_schedule(10_000, 1, "slot-attention", cfg) == pytest.approx(4e-4)
        assert lr_schedule(110_000, 1, "slot-attention", cfg) == pytest.approx(2e-4)
        assert lr_schedule(210_000, 1, "slot-attention", cfg) == pytest.approx(1e-4)

    def test_household_language_stages_step_down(self):
        cfg = TrainConfig(family="household", steps_per_epoch=10)
        assert lr_schedule(0, 3, "slot-attention", cfg) == pytest.approx(1e-3)
        assert lr_schedule(10 * 20, 3, "slot-attention", cfg) == pytest.approx(2e-4)
        assert lr_schedule(10 * 85, 3, "slot-attention", cfg) == pytest.approx(2e-5)

    def test_chair_family_keeps_base_schedule(self):
        cfg = TrainConfig(family="composite-chair")
        assert lr_schedule(10_000, 3, "slot-attention", cfg) == pytest.approx(4e-4)

    def test_monet_rates(self):
        cfg = TrainConfig(model_tag="monet")
        assert lr_schedule(0, 1, "monet", cfg) == pytest.approx(1e-2)
        assert lr_schedule(0, 2, "monet", cfg) == pytest.approx(1e-3)
        assert lr_schedule(99, 3, "monet", cfg) == pytest.approx(1e-3)


class TestCurriculum:
    def test_stage1_admits_everything(self, household_ds):
        cfg = TrainConfig(n3=8)
        scenes, questions = curriculum_filter(household_ds, 1, 0, cfg)
        assert len(scenes) == len(household_ds.records)
        assert len(questions) == len(household_ds.questions)

    def test_stage2_keeps_small_scenes(self, household_ds):
        cfg = TrainConfig(n3=8, curriculum_max_objects=3)
        scenes, questions = curriculum_filter(household_ds, 2, 0, cfg)
        admitted = {household_ds.records[i].image_id for i in scenes}
        for i in scenes:
            assert len(household_ds.records[i].objects) <= 3
        for q in questions:
            assert q.scene_id in admitted

    def test_stage3_ramp_is_monotone_and_reaches_everything(self, household_ds):
        cfg = TrainConfig(n3=8, curriculum_max_objects=3)
        sizes = []
        for epoch in range(8):
            scenes, questions = curriculum_filter(household_ds, 3, epoch, cfg)
            sizes.append((len(scenes), len(questions)))
        assert sizes == sorted(sizes)
        assert sizes[-1] == (len(household_ds.records), len(household_ds.questions))

    def test_empty_filter_raises(self, household_ds):
        cfg = TrainConfig(n3=8, curriculum_max_objects=0)
        with pytest.raises(DataError):
            curriculum_filter(household_ds, 2, 0, cfg)


class TestLosses:
    def _setup(self, household_ds, model_tag="slot-attention"):
        cfg = TrainConfig(model_tag=model_tag, family="household", seed=0, **MICRO)
        state = build_state(cfg)
        images = load_images(household_ds, [0])
        encs, kl = encode_batch(state.model, images, state.generator)
        return cfg, state, images, encs, kl

    def test_total_loss_is_weighted_sum(self, household_ds):
        cfg, state, images, encs, kl = self._setup(household_ds)
        qa = household_ds.questions_for_scene(household_ds.records[0].image_id)[:3]
        image = images[0].permute(1, 2, 0)
        total = total_loss(encs[0], None, image, qa, state.space, cfg).detach()
        p = perception_loss(cfg.model_tag, encs[0], None, image, cfg.beta_kl).detach()
        r = reasoning_loss(qa, encs[0], state.space).detach()
        assert float(total) == pytest.approx(
            cfg.alpha * float(p) + cfg.beta * float(r), rel=1e-6
        )

    def test_reasoning_loss_is_mean_nll(self, household_ds):
        cfg, state, images, encs, _ = self._setup(household_ds)
        from lorl.executor import execute

        qa = household_ds.questions_for_scene(household_ds.records[0].image_id)[:4]
        with torch.no_grad():
            loss = reasoning_loss(qa, encs[0], state.space)
            manual = np.mean(
                [
                    -math.log(max(float(execute(q.program, encs[0], state.space)
                                       .prob_of(q.answer)), 1e-12))
                    for q in qa
                ]
            )
        assert float(loss) == pytest.approx(manual, rel=1e-6)

    def test_monet_total_loss_includes_kl(self, household_ds):
        cfg, state, images, encs, kl = self._setup(household_ds, model_tag="monet")
        image = images[0].permute(1, 2, 0)
        qa = household_ds.questions_for_scene(household_ds.records[0].image_id)[:2]
        total = total_loss(encs[0], kl[0], image, qa, state.space, cfg).detach()
        p = perception_loss("monet", encs[0], kl[0], image, cfg.beta_kl).detach()
        r = reasoning_loss(qa, encs[0], state.space).detach()
        assert float(total) == pytest.approx(
            cfg.alpha * float(p) + cfg.beta * float(r), rel=1e-6
        )


class TestStages:
    def test_stage2_freezes_perception(self, household_ds):
        cfg = TrainConfig(family="household", seed=1, **MICRO)
        state = build_state(cfg)
        before = copy.deepcopy(state.model.state_dict())
        space_before = copy.deepcopy(state.space.state_dict())
        run_stage(2, state, household_ds, cfg)
        for name, p in state.model.state_dict().items():
            assert torch.equal(p, before[name]), name
        changed = any(
            not torch.equal(p, space_before[name])
            for name, p in state.space.state_dict().items()
        )
        assert changed

    def test_stage_regression_rejected(self, household_ds):
        cfg = TrainConfig(family="household", seed=1, **MICRO)
        state = build_state(cfg)
        state.stage = 3
        with pytest.raises(StageError):
            run_stage(1, state, household_ds, cfg)
        with pytest.raises(StageError):
            run_stage(4, state, household_ds, cfg)

    def test_stage1_updates_perception_only(self, household_ds):
        cfg = TrainConfig(family="household", seed=2, **MICRO)
        state = build_state(cfg)
        space_before = copy.deepcopy(state.space.state_dict())
        model_before = copy.deepcopy(state.model.state_dict())
        run_stage(1, state, household_ds, cfg)
        assert state.global_step > 0
        assert any(
            not torch.equal(p, model_before[name])
            for name, p in state.model.state_dict().items()
        )
        for name, p in state.space.state_dict().items():
            assert torch.equal(p, space_before[name]), name


class TestCheckpoints:
    def test_roundtrip_bit_exact(self, household_ds, tmp_path):
        cfg = TrainConfig(family="household", seed=3, **MICRO)
        state = build_state(cfg)
        run_stage(1, state, household_ds, cfg)
        save_checkpoint(state, cfg, tmp_path / "ckpt")
        loaded, loaded_cfg = load_checkpoint(tmp_path / "ckpt")
        assert loaded_cfg == cfg
        assert loaded.stage == state.stage
        assert loaded.epoch == state.epoch
        assert loaded.global_step == state.global_step
        for name, p in state.model.state_dict().items():
            assert torch.equal(loaded.model.state_dict()[name], p), name
        for name, p in state.space.state_dict().items():
            assert torch.equal(loaded.space.state_dict()[name], p), name
        assert torch.equal(loaded.generator.get_state(), state.generator.get_state())

    def test_resume_continues_identically(self, household_ds, tmp_path):
        """stage 1 for 2 epochs straight == 1 epoch, checkpoint, reload, 1 more."""
        cfg = TrainConfig(family="household", seed=4, **{**MICRO, "n1": 2})
        straight = build_state(cfg)
        run_stage(1, straight, household_ds, cfg)

        cfg_half = TrainConfig(family="household", seed=4, **{**MICRO, "n1": 1})
        state = build_state(cfg_half)
        run_stage(1, state, household_ds, cfg_half)
        save_checkpoint(state, cfg_half, tmp_path / "half")
        resumed, _ = load_checkpoint(tmp_path / "half")
        run_stage(1, resumed, household_ds, cfg)  # finish epoch 2 under full cfg

        for name, p in straight.model.state_dict().items():
            assert torch.equal(resumed.model.state_dict()[name], p), name
