import json
import os

import numpy as np
import pytest

from crossdet.checkpoint import (CheckpointError, load_checkpoint,
                                 save_checkpoint)
from crossdet.config import (ConfigError, RunConfig, config_from_dict,
                             config_to_dict, load_config, save_config)
from crossdet.data import DataError, SynthConfig
from crossdet.model import ModelConfig
from crossdet.train import (MetricsWriter, TrainState, fine_tune, init_state,
                            make_synthetic_bundle, meta_train, run_ablation,
                            validate_bundle)


def tiny_cfg(**overrides):
    cfg = RunConfig()
    cfg.model = ModelConfig(d=16, n_heads=2, d_in=8, n_way=2, n_queries=4,
                            encoder_layers=1, decoder_layers=1)
    cfg.episode.n_way = 2
    cfg.episode.k_shot = 2
    cfg.episode.n_query = 1
    cfg.meta_steps = 5
    cfg.fine_tune_steps = 3
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg.validate()


def tiny_synth():
    return SynthConfig(n_base_classes=3, n_novel_classes=2, d_in=8,
                       grid_h=6, grid_w=6, images_per_class=6,
                       objects_per_image=(1, 1))


@pytest.fixture(scope="module")
def tiny_bundle():
    return make_synthetic_bundle(tiny_synth(), seed=0)


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = tiny_cfg(lambda_rectify=0.25, seed=7)
        path = tmp_path / "cfg.yaml"
        save_config(cfg, path)
        back = load_config(path)
        assert config_to_dict(back) == config_to_dict(cfg)

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            config_from_dict({"metasteps": 10})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            config_from_dict({"model": {"dd": 8}})

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"meta_steps": -1})
        with pytest.raises(ConfigError):
            config_from_dict({"optimizer": {"algo": "rmsprop"}})
        with pytest.raises(ConfigError):
            config_from_dict({"model": {"d": 30, "n_heads": 4}})

    def test_n_way_consistency_enforced(self):
        with pytest.raises(ConfigError, match="n_way"):
            config_from_dict({"episode": {"n_way": 4}})

    def test_malformed_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("model: [unclosed")
        with pytest.raises(ConfigError):
            load_config(path)


class TestCheckpointFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a": rng.normal(size=(3, 4)), "b.c": rng.normal(size=5),
                   "scalar": np.array(2.5)}
        blob = {"lr": 0.1, "name": "x"}
        rng_state = {"state": {"state": 123}}
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, tensors, 42, blob, rng_state)
        back, step, cfg, rs = load_checkpoint(path)
        assert step == 42 and cfg == blob and rs == rng_state
        for k, v in tensors.items():
            np.testing.assert_array_equal(back[k], np.asarray(v, float))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "v9.ckpt"
        import struct
        path.write_bytes(b"CDMM" + struct.pack("<IQI", 9, 0, 0))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)


class TestMetaTrain:
    def test_zero_steps_equals_init(self, tiny_bundle):
        cfg = tiny_cfg(meta_steps=0)
        state = meta_train(cfg, tiny_bundle)
        fresh = init_state(cfg, vocab_size=len(tiny_bundle.vocab))
        for name, t in state.model.parameters().items():
            np.testing.assert_array_equal(t.data,
                                          fresh.model.parameters()[name].data)
        assert state.step == 0

    def test_same_seed_bitwise_identical(self, tiny_bundle):
        cfg = tiny_cfg(meta_steps=4)
        a = meta_train(cfg, tiny_bundle)
        b = meta_train(tiny_cfg(meta_steps=4), tiny_bundle)
        for name, t in a.model.parameters().items():
            np.testing.assert_array_equal(t.data,
                                          b.model.parameters()[name].data)

    def test_toy_training_halves_loss(self, tiny_bundle):
        """Frozen-seed bound: 300 steps on the 2-way toy config cut the
        total loss to under half its initial value."""
        cfg = tiny_cfg(meta_steps=300)
        cfg.optimizer.algo = "adam"
        cfg.optimizer.lr = 3e-3
        state = meta_train(cfg, tiny_bundle)
        first = state.metrics[0]["loss_total"]
        last = np.mean([r["loss_total"] for r in state.metrics[-10:]])
        assert last < 0.5 * first, (first, last)

    def test_metrics_stream_written(self, tiny_bundle, tmp_path):
        path = tmp_path / "metrics.jsonl"
        meta_train(tiny_cfg(meta_steps=3), tiny_bundle, metrics_path=str(path))
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(records) == 3
        for i, rec in enumerate(records):
            assert rec["phase"] == "meta-train"
            assert rec["step"] == i + 1
            assert rec["loss_total"] >= 0
            assert rec["wall_time"] > 0


class TestFineTune:
    def test_zero_steps_unchanged(self, tiny_bundle):
        state = meta_train(tiny_cfg(meta_steps=2), tiny_bundle)
        before = {k: t.data.copy() for k, t in state.model.parameters().items()}
        fine_tune(state, tiny_bundle, steps=0)
        for k, t in state.model.parameters().items():
            np.testing.assert_array_equal(t.data, before[k])

    def test_class_overlap_rejected(self, tiny_bundle):
        import copy

        state = meta_train(tiny_cfg(meta_steps=1), tiny_bundle)
        clash = copy.copy(tiny_bundle)
        clash.novel = tiny_bundle.base
        with pytest.raises(DataError, match="overlap"):
            fine_tune(state, clash)

    def test_interleave_alternates_splits(self, tiny_bundle):
        state = meta_train(tiny_cfg(meta_steps=0, interleave_base=True),
                           tiny_bundle)
        writer = MetricsWriter()
        from crossdet.train import _train_steps
        _train_steps(state, tiny_bundle,
                     [(tiny_bundle.novel, tiny_bundle.novel_registry),
                      (tiny_bundle.base, tiny_bundle.base_registry)],
                     4, writer, phase="fine-tune")
        splits = [r["split"] for r in writer.records]
        assert splits == ["novel", "base", "novel", "base"]


class TestWeightAveraging:
    def test_ema_follows_recurrence(self, tiny_bundle):
        cfg = tiny_cfg(meta_steps=0, ema_decay=0.9)
        state = meta_train(cfg, tiny_bundle)
        start = {k: t.data.copy() for k, t in state.model.parameters().items()}
        from crossdet.train import _train_steps
        _train_steps(state, tiny_bundle,
                     [(tiny_bundle.base, tiny_bundle.base_registry)],
                     1, MetricsWriter(), phase="meta-train")
        for k, t in state.model.parameters().items():
            np.testing.assert_allclose(state.ema[k],
                                       0.9 * start[k] + 0.1 * t.data,
                                       atol=1e-12)

    def test_eval_model_carries_averaged_weights(self, tiny_bundle):
        state = meta_train(tiny_cfg(meta_steps=4, ema_decay=0.5), tiny_bundle)
        averaged = state.eval_model()
        assert averaged is not state.model
        for k, t in averaged.parameters().items():
            np.testing.assert_array_equal(t.data, state.ema[k])

    def test_disabled_averaging_returns_live_model(self, tiny_bundle):
        state = meta_train(tiny_cfg(meta_steps=1, ema_decay=0.0), tiny_bundle)
        assert state.eval_model() is state.model

    def test_checkpoint_preserves_averages(self, tiny_bundle, tmp_path):
        state = meta_train(tiny_cfg(meta_steps=3, ema_decay=0.8), tiny_bundle)
        path = tmp_path / "e.ckpt"
        state.save(path)
        back = TrainState.load(path)
        for k, v in state.ema.items():
            np.testing.assert_array_equal(back.ema[k], v)


class TestBundleValidation:
    def test_registry_gap_surfaces_before_training(self, tiny_bundle):
        import copy

        from crossdet.data import TextRegistry

        broken = copy.copy(tiny_bundle)
        entries = dict(tiny_bundle.base_registry.entries)
        entries.pop(next(iter(entries)))
        broken.base_registry = TextRegistry(entries)
        with pytest.raises(DataError, match="registry"):
            validate_bundle(broken, tiny_cfg())


class TestCheckpointedTraining:
    def test_round_trip_preserves_trajectory(self, tiny_bundle, tmp_path):
        cfg = tiny_cfg(meta_steps=4)
        straight = meta_train(cfg, tiny_bundle)
        fine_tune(straight, tiny_bundle, steps=3)

        half = meta_train(tiny_cfg(meta_steps=4), tiny_bundle)
        path = tmp_path / "mid.ckpt"
        half.save(path)
        resumed = TrainState.load(path)
        fine_tune(resumed, tiny_bundle, steps=3)

        for name, t in straight.model.parameters().items():
            np.testing.assert_array_equal(
                t.data, resumed.model.parameters()[name].data)
        assert straight.step == resumed.step

    def test_loaded_config_matches(self, tiny_bundle, tmp_path):
        cfg = tiny_cfg(meta_steps=1, lambda_rectify=0.5)
        state = meta_train(cfg, tiny_bundle)
        path = tmp_path / "s.ckpt"
        state.save(path)
        back = TrainState.load(path)
        assert config_to_dict(back.config) == config_to_dict(cfg)


class TestAblationRunner:
    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown ablation kind"):
            run_ablation("bogus", tiny_cfg())

    def test_shared_vs_decoupled_two_rows(self):
        cfg = tiny_cfg(meta_steps=2, fine_tune_steps=1)
        rows = run_ablation("shared-vs-decoupled", cfg, tiny_synth(), seeds=(0,))
        assert [r["variant"] for r in rows] == ["shared", "decoupled"]
        for r in rows:
            assert isinstance(r["mean_map"], float)
            assert 0.0 <= r["mean_map"] <= 1.0

    def test_modules_three_rows(self):
        cfg = tiny_cfg(meta_steps=1, fine_tune_steps=1)
        rows = run_ablation("modules", cfg, tiny_synth(), seeds=(0,))
        assert [r["variant"] for r in rows] == \
            ["baseline", "+aggregation", "+aggregation+rectify"]

    def test_text_variants_four_rows(self):
        cfg = tiny_cfg(meta_steps=1, fine_tune_steps=1)
        rows = run_ablation("text-variants", cfg, tiny_synth(), seeds=(0,))
        assert [r["variant"] for r in rows] == ["none", "name", "rich", "extended"]


class TestReports:
    def test_map_report_files(self, tmp_path):
        from crossdet.report import write_map_report

        rep = {"per_class": {0.5: {0: 0.7, 1: 0.4}},
               "per_threshold": {0.5: 0.55}, "map": 0.55}
        csv_path, fig_path = write_map_report(str(tmp_path), rep,
                                              {0: "cat", 1: "dog"})
        assert os.path.exists(csv_path) and csv_path.endswith(".csv")
        assert os.path.exists(fig_path) and fig_path.endswith(".png")
        text = open(csv_path).read()
        assert "cat" in text and "0.7" in text

    def test_loss_curves(self, tmp_path, tiny_bundle):
        from crossdet.report import write_loss_curves

        metrics = tmp_path / "m.jsonl"
        meta_train(tiny_cfg(meta_steps=3), tiny_bundle, metrics_path=str(metrics))
        fig_path = write_loss_curves(str(tmp_path), str(metrics), prefix="t")
        assert os.path.exists(fig_path)

    def test_ablation_table_files(self, tmp_path):
        from crossdet.report import write_ablation_table

        rows = [{"variant": "a", "maps": [0.5, 0.6], "mean_map": 0.55},
                {"variant": "b", "maps": [0.7, 0.8], "mean_map": 0.75}]
        csv_path, fig_path = write_ablation_table(str(tmp_path), "modules", rows)
        assert os.path.exists(csv_path) and os.path.exists(fig_path)
        assert "variant" in open(csv_path).read()

    def test_detections_jsonl(self, tmp_path):
        from crossdet.evaluation import PredictionRecord
        from crossdet.report import write_detections_jsonl

        preds = [PredictionRecord(image_id=1, class_id=0, score=0.9,
                                  box=[1.0, 2.0, 3.0, 4.0])]
        path = tmp_path / "det.jsonl"
        write_detections_jsonl(str(path), preds, {0: "cat"})
        rec = json.loads(path.read_text().splitlines()[0])
        assert rec["class"] == "cat" and rec["image_id"] == 1
