import json

import numpy as np
import pytest

from cilmp import harness
from cilmp.encoders import EncoderConfig
from cilmp.errors import ConfigError, FormatError

TINY_ENC = EncoderConfig(embed_dim=16, num_layers=2, hidden_dim=24, image_tokens=4, text_max_len=14, vocab_size=16)


def tiny_cfg(**overrides):
    base = dict(
        seed=3,
        num_classes=3,
        train_per_class=6,
        test_per_class=6,
        encoder=TINY_ENC,
        bank=harness.BankSpec(seq_len=4, width=24, layer_drift=0.3, noise_std=0.1),
        data=harness.DataSpec(margin=1.0, image_noise=0.6, knowledge_corr=0.8, subtypes_per_class=2),
        prompt_len=2,
        l_prefix=2,
        l_suffix=2,
        r_sub=2,
        r_proj=2,
        r_z=2,
        mode="cilmp",
        optimizer=harness.OptimSpec(lr=0.02, momentum=0.9),
        epochs=3,
        batch_size=8,
        pretrain=harness.PretrainSpec(epochs=12, lr=0.1, batch_size=9),
    )
    base.update(overrides)
    return harness.ExperimentConfig(**base)


class TestConfig:
    def test_defaults_match_documented_values(self):
        cfg = harness.ExperimentConfig()
        assert cfg.optimizer.lr == 0.0025 and cfg.optimizer.momentum == 0.9
        assert cfg.epochs == 100 and cfg.batch_size == 64
        assert cfg.prompt_len == 4 and cfg.l_prefix == 4 and cfg.l_suffix == 4
        assert cfg.r_sub == 8 and cfg.r_proj == 8 and cfg.r_z == 8
        assert cfg.bank.seq_len == 8 and cfg.bank.width == 96
        assert cfg.encoder.embed_dim == 64

    def test_dict_roundtrip(self):
        cfg = tiny_cfg()
        again = harness.ExperimentConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_unknown_key_rejected(self):
        raw = tiny_cfg().to_dict()
        raw["no_such_knob"] = 1
        with pytest.raises(ConfigError, match="no_such_knob"):
            harness.ExperimentConfig.from_dict(raw)

    def test_nested_unknown_key_rejected(self):
        raw = tiny_cfg().to_dict()
        raw["bank"]["depth"] = 3
        with pytest.raises(ConfigError, match="bank"):
            harness.ExperimentConfig.from_dict(raw)

    def test_overlapping_positions_rejected(self):
        with pytest.raises(ConfigError):
            tiny_cfg(l_prefix=3, l_suffix=3)

    def test_vocab_too_small(self):
        with pytest.raises(ConfigError):
            tiny_cfg(num_classes=12)

    def test_text_budget_checked(self):
        with pytest.raises(ConfigError):
            tiny_cfg(prompt_len=9)

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            tiny_cfg(mode="everything")

    def test_load_config_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError):
            harness.load_config(str(p))


class TestDataset:
    def test_same_seed_bit_identical(self):
        a, bank_a = harness.generate_dataset(tiny_cfg())
        b, bank_b = harness.generate_dataset(tiny_cfg())
        assert np.array_equal(a.train_images, b.train_images)
        assert np.array_equal(a.test_images, b.test_images)
        assert np.array_equal(bank_a.data, bank_b.data)

    def test_dataset_mode_independent(self):
        a, bank_a = harness.generate_dataset(tiny_cfg(mode="cilmp"))
        b, bank_b = harness.generate_dataset(tiny_cfg(mode="no_intervention"))
        assert np.array_equal(a.train_images, b.train_images)
        assert np.array_equal(bank_a.data, bank_b.data)

    def test_split_sizes_and_disjointness(self):
        cfg = tiny_cfg()
        data, _ = harness.generate_dataset(cfg)
        assert data.train_images.shape[0] == cfg.num_classes * cfg.train_per_class
        assert data.test_images.shape[0] == cfg.num_classes * cfg.test_per_class
        train_set = {img.tobytes() for img in data.train_images}
        assert all(img.tobytes() not in train_set for img in data.test_images)

    def test_large_margin_nearest_prototype_is_perfect(self):
        cfg = tiny_cfg(data=harness.DataSpec(margin=30.0, image_noise=1.0, knowledge_corr=0.8, subtypes_per_class=2))
        data, _ = harness.generate_dataset(cfg)
        protos = data.image_prototypes  # (c, k, t, d)
        c, k = protos.shape[:2]
        flat = protos.reshape(c * k, -1)
        preds = []
        for img in data.test_images:
            d = np.linalg.norm(flat - img.reshape(1, -1), axis=1)
            preds.append(int(np.argmin(d)) // k)
        assert np.array_equal(np.array(preds), data.test_labels)

    def test_knowledge_corr_zero_bank_uncorrelated(self):
        # over 10 seeds, the mean |correlation| between bank prototypes and
        # the image-derived signatures stays near zero at corr=0 and high
        # at corr=1
        def mean_abs_corr(corr):
            vals = []
            for seed in range(10):
                cfg = tiny_cfg(
                    seed=seed,
                    data=harness.DataSpec(margin=1.0, image_noise=0.6, knowledge_corr=corr, subtypes_per_class=2),
                )
                data, bank = harness.generate_dataset(cfg)
                link = np.random.default_rng(harness._stream_seed(seed, harness._S_LINK)).normal(
                    size=(cfg.encoder.image_tokens * cfg.encoder.embed_dim, cfg.bank.width)
                ) / np.sqrt(cfg.encoder.image_tokens * cfg.encoder.embed_dim)
                sig = data.image_prototypes.reshape(-1, link.shape[0]) @ link
                sig = (sig / np.linalg.norm(sig, axis=1, keepdims=True)).reshape(
                    cfg.num_classes, 2, cfg.bank.width
                )
                for c in range(cfg.num_classes):
                    for layer in range(bank.seq_len):
                        v = bank.data[c, layer]
                        s = sig[c, layer % 2]
                        vals.append(abs(float(np.corrcoef(v, s)[0, 1])))
            return float(np.mean(vals))

        assert mean_abs_corr(0.0) < 0.2
        assert mean_abs_corr(1.0) > 0.6

    def test_pooled_text_bank_has_no_layer_structure(self):
        cfg = tiny_cfg(mode="text_mode")
        _, bank = harness.generate_dataset(cfg)
        pooled = harness.pooled_text_bank(cfg, bank)
        for c in range(pooled.num_classes):
            assert np.array_equal(pooled.data[c, 0], pooled.data[c, -1])
        assert pooled.num_classes == bank.num_classes


class TestTrain:
    def test_report_fields_and_freeze(self):
        report, model = harness.train(tiny_cfg())
        assert report.freeze_intact
        assert len(report.loss_trace) == 3
        assert set(report.metrics) == {"accuracy", "macro_f1", "macro_auc", "kappa"}
        assert report.trainable_params == model.trainable_param_count()
        assert report.wall_time_s > 0

    def test_canonical_json_excludes_wall_time_and_is_deterministic(self):
        r1, _ = harness.train(tiny_cfg())
        r2, _ = harness.train(tiny_cfg())
        assert r1.wall_time_s != r2.wall_time_s or True  # timing may coincide; JSON must not depend on it
        assert r1.to_json() == r2.to_json()
        assert "wall_time" not in r1.to_json()

    def test_report_json_roundtrip(self):
        report, _ = harness.train(tiny_cfg())
        again = harness.RunReport.from_json(report.to_json())
        assert again.metrics == report.metrics
        assert again.loss_trace == report.loss_trace

    def test_mode_nesting_of_parameter_counts(self):
        counts = {}
        for mode in ("no_intervention", "no_conditional", "cilmp"):
            _, model = harness.train(tiny_cfg(mode=mode, epochs=1))
            counts[mode] = model.trainable_param_count()
        assert counts["no_intervention"] < counts["no_conditional"] < counts["cilmp"]

    def test_batch_size_clamped(self):
        report, _ = harness.train(tiny_cfg(batch_size=500))
        assert report.freeze_intact

    def test_text_mode_runs(self):
        report, model = harness.train(tiny_cfg(mode="text_mode", epochs=1))
        assert report.freeze_intact
        assert model.bank.provenance == "text_mode pooled surrogate"


class TestAblation:
    def test_paired_table_shape_and_determinism(self):
        cfg = tiny_cfg(epochs=2)
        t1 = harness.run_ablation(cfg, ["cilmp", "no_intervention"], [1, 2], workers=1)
        t2 = harness.run_ablation(cfg, ["cilmp", "no_intervention"], [1, 2], workers=1)
        assert len(t1.rows) == 4
        for r1, r2 in zip(t1.rows, t2.rows):
            assert r1.metrics == r2.metrics
        assert t1.to_csv() == t2.to_csv()

    def test_parallel_equals_serial(self):
        cfg = tiny_cfg(epochs=1)
        serial = harness.run_ablation(cfg, ["cilmp", "coop_baseline"], [1, 2], workers=1)
        parallel = harness.run_ablation(cfg, ["cilmp", "coop_baseline"], [1, 2], workers=2)
        assert serial.to_csv() == parallel.to_csv()

    def test_csv_shape_and_roundtrip(self):
        cfg = tiny_cfg(epochs=1)
        table = harness.run_ablation(cfg, ["cilmp", "no_rd", "no_conditional", "no_intervention"], [1, 2], workers=2)
        csv_text = table.to_csv()
        lines = csv_text.strip().split("\n")
        assert len(lines) == 5  # header + one row per mode
        # parse back and re-render: cell-exact round trip at %.6f
        header = lines[0].split(",")
        rows = [dict(zip(header, line.split(","))) for line in lines[1:]]
        rebuilt = [",".join(header)]
        for row in rows:
            cells = []
            for key in header:
                val = row[key]
                if key.endswith("_mean") or key.endswith("_std"):
                    cells.append("" if val == "" else f"{float(val):.6f}")
                else:
                    cells.append(val)
            rebuilt.append(",".join(cells))
        assert "\n".join(rebuilt) + "\n" == csv_text

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError):
            harness.run_ablation(tiny_cfg(), ["nope"], [1])

    def test_env_thread_cap(self, monkeypatch):
        monkeypatch.setenv("CILMP_THREADS", "1")
        assert harness._worker_count(8, None) == 1
        monkeypatch.setenv("CILMP_THREADS", "junk")
        with pytest.raises(ConfigError):
            harness._worker_count(8, None)

    def test_sweep_skips_infeasible_cells(self):
        cfg = tiny_cfg(epochs=1)
        out = harness.run_sweep(cfg, "intervention_len", values=(1, 8), seeds=[1], workers=1)
        assert isinstance(out[8], str) and "skipped" in out[8]
        assert not isinstance(out[1], str)
        text = harness.sweep_to_csv("intervention_len", out)
        assert "skipped" in text


class TestCheckpoint:
    def test_roundtrip_eval_bit_exact(self, tmp_path):
        cfg = tiny_cfg()
        report, model = harness.train(cfg)
        data, _ = harness.generate_dataset(cfg)
        in_memory = harness.evaluate_model(model, data.test_images, data.test_labels)
        path = tmp_path / "run.ckpt"
        harness.save_checkpoint(str(path), cfg, model)
        cfg2, model2 = harness.load_checkpoint(str(path))
        assert cfg2 == cfg
        reloaded = harness.evaluate_model(model2, data.test_images, data.test_labels)
        assert reloaded == in_memory
        assert harness.evaluate_checkpoint(str(path)) == in_memory

    def test_truncated_rejected(self, tmp_path):
        cfg = tiny_cfg()
        _, model = harness.train(cfg)
        path = tmp_path / "run.ckpt"
        harness.save_checkpoint(str(path), cfg, model)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(FormatError):
            harness.load_checkpoint(str(path))

    def test_config_mismatch_names_field(self, tmp_path):
        cfg = tiny_cfg()
        _, model = harness.train(cfg)
        path = tmp_path / "run.ckpt"
        harness.save_checkpoint(str(path), cfg, model)
        other = tiny_cfg(bank=harness.BankSpec(seq_len=4, width=32, layer_drift=0.3, noise_std=0.1))
        with pytest.raises(FormatError, match="bank.width"):
            harness.load_checkpoint(str(path), expected=other)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"WRONGMAGIC" + b"\x00" * 64)
        with pytest.raises(FormatError):
            harness.load_checkpoint(str(path))


def test_loss_trace_falls_on_separable_data():
    # 20-seed median of final/initial loss under the full pipeline
    ratios = []
    for seed in range(20):
        cfg = tiny_cfg(
            seed=seed,
            epochs=6,
            data=harness.DataSpec(margin=2.0, image_noise=0.4, knowledge_corr=0.8, subtypes_per_class=1),
        )
        report, _ = harness.train(cfg)
        ratios.append(report.loss_trace[-1] / report.loss_trace[0])
    assert np.median(ratios) < 1.0
