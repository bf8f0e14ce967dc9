import pytest

from lilylab.cli import (EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_OK, ConfigError,
                         apply_schema, parse_config, main, TRAIN_SCHEMA)

TINY_LINES = [
    "n_layers=2", "d_model=8", "n_heads=2", "d_ff=16", "vocab=16",
    "seq_len=4", "n_classes=3", "epochs=2", "batch_size=8",
    "n_train=16", "n_val=8",
]


def write_cfg(tmp_path, name, lines):
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n")
    return str(path)


class TestConfigParsing:
    def test_comments_and_blanks_skipped(self, tmp_path):
        path = write_cfg(tmp_path, "c.cfg",
                         ["# a comment", "", "method=lily  # trailing", "rank_r=2"])
        raw = parse_config(path)
        assert raw == {"method": "lily", "rank_r": "2"}

    def test_unknown_key_rejected(self, tmp_path):
        path = write_cfg(tmp_path, "c.cfg", ["method=lily", "rank_r=2", "foo=1"])
        with pytest.raises(ConfigError, match="foo"):
            apply_schema(parse_config(path), TRAIN_SCHEMA)

    def test_missing_required_key_named(self, tmp_path):
        path = write_cfg(tmp_path, "c.cfg", ["rank_r=2"])
        with pytest.raises(ConfigError, match="method"):
            apply_schema(parse_config(path), TRAIN_SCHEMA)

    def test_type_checked_before_work(self, tmp_path):
        path = write_cfg(tmp_path, "c.cfg", ["method=lily", "rank_r=lots"])
        with pytest.raises(ConfigError, match="rank_r"):
            apply_schema(parse_config(path), TRAIN_SCHEMA)

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("just some words\n")
        with pytest.raises(ConfigError):
            parse_config(path)


class TestTrainCommand:
    def test_missing_rank_r_exits_2_naming_key(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "t.cfg", ["method=lily"] + TINY_LINES)
        code = main(["train", "--config", cfg, "--out", str(tmp_path / "out")])
        assert code == EXIT_CONFIG
        assert "rank_r" in capsys.readouterr().err

    def test_minimal_config_produces_nonempty_csvs(self, tmp_path):
        cfg = write_cfg(tmp_path, "t.cfg",
                        ["method=lily", "rank_r=2"] + TINY_LINES)
        out = tmp_path / "out"
        assert main(["train", "--config", cfg, "--out", str(out)]) == EXIT_OK
        for name in ("loss.csv", "accuracy.csv", "routes.csv"):
            assert (out / name).stat().st_size > 0
        manifest = (out / "manifest.txt").read_text().split()
        assert "adapters.bin" in manifest

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = write_cfg(tmp_path, "t.cfg",
                        ["method=lily", "rank_r=2"] + TINY_LINES)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        assert main(["train", "--config", cfg, "--out", str(out1)]) == EXIT_OK
        assert main(["train", "--config", cfg, "--out", str(out2)]) == EXIT_OK
        for name in ("loss.csv", "accuracy.csv", "routes.csv",
                     "adapters.bin", "adapters.manifest"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_writes_stay_inside_out_dir(self, tmp_path, monkeypatch):
        workdir = tmp_path / "cwd"
        workdir.mkdir()
        monkeypatch.chdir(workdir)
        cfg = write_cfg(tmp_path, "t.cfg",
                        ["method=lily", "rank_r=2"] + TINY_LINES)
        out = tmp_path / "only-here"
        assert main(["train", "--config", cfg, "--out", str(out)]) == EXIT_OK
        assert list(workdir.iterdir()) == []

    def test_frozen_method_needs_no_rank(self, tmp_path):
        cfg = write_cfg(tmp_path, "t.cfg", ["method=frozen"] + TINY_LINES)
        assert main(["train", "--config", cfg,
                     "--out", str(tmp_path / "out")]) == EXIT_OK

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = write_cfg(tmp_path, "t.cfg",
                        ["method=lily", "rank_r=2", "seed=0"] + TINY_LINES)
        o1, o2 = tmp_path / "s1", tmp_path / "s2"
        main(["train", "--config", cfg, "--out", str(o1)])
        main(["train", "--config", cfg, "--out", str(o2), "--seed", "9"])
        assert (o1 / "loss.csv").read_bytes() != (o2 / "loss.csv").read_bytes()


class TestGradcheckCommand:
    def test_default_tiny_config_passes(self, tmp_path):
        out = tmp_path / "gc"
        assert main(["gradcheck", "--out", str(out)]) == EXIT_OK
        text = (out / "gradcheck.csv").read_text()
        assert "lily." in text and "lora." in text

    def test_corrupted_backward_fails(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "g.cfg", ["corrupt=true"])
        code = main(["gradcheck", "--config", cfg, "--out", str(tmp_path / "gc")])
        assert code == EXIT_CHECK_FAILED
        assert "worst parameter" in capsys.readouterr().err

    def test_uniform_router_mode_passes_without_routers(self, tmp_path):
        cfg = write_cfg(tmp_path, "g.cfg", ["router_mode=uniform"])
        out = tmp_path / "gc"
        assert main(["gradcheck", "--config", cfg, "--out", str(out)]) == EXIT_OK
        assert ".R" not in (out / "gradcheck.csv").read_text()


class TestFlopsCommand:
    def test_reference_shape_values_in_csv(self, tmp_path):
        out = tmp_path / "fl"
        assert main(["flops", "--out", str(out)]) == EXIT_OK
        text = (out / "flops.csv").read_text()
        assert "103858176" in text
        assert "25264128" in text

    def test_untimed_mode(self, tmp_path):
        cfg = write_cfg(tmp_path, "f.cfg", ["timed=false", "N=8", "d=2",
                                            "C=4", "Ne=2"])
        out = tmp_path / "fl"
        assert main(["flops", "--config", cfg, "--out", str(out)]) == EXIT_OK


class TestEquivCommand:
    def test_hundred_random_shapes_pass(self, tmp_path):
        out = tmp_path / "eq"
        assert main(["equiv", "--out", str(out)]) == EXIT_OK
        lines = (out / "equiv.csv").read_text().splitlines()
        assert len(lines) == 101

    def test_impossible_tolerance_fails(self, tmp_path):
        cfg = write_cfg(tmp_path, "e.cfg", ["tol=0.0", "cases=5"])
        assert main(["equiv", "--config", cfg,
                     "--out", str(tmp_path / "eq")]) == EXIT_CHECK_FAILED


class TestRankCommand:
    def test_budget_violation_exits_2_before_training(self, tmp_path, capsys):
        # two layers cannot fund rank-16 shared adapters from a rank-4
        # per-layer budget; must be rejected with no training artifacts
        cfg = write_cfg(tmp_path, "r.cfg",
                        ["n_layers=2", "d_model=8", "n_heads=2", "d_ff=16",
                         "vocab=16", "seq_len=4", "n_classes=3",
                         "lily_rank_r=16", "lily_ne=2", "lora_rank_r=4",
                         "layers=0,1", "n_train=16", "n_val=8", "epochs=1"])
        out = tmp_path / "rk"
        code = main(["rank", "--config", cfg, "--out", str(out)])
        assert code == EXIT_CONFIG
        assert "parameters" in capsys.readouterr().err
        assert not (out / "rank.csv").exists()

    def test_tiny_rank_run_writes_csv(self, tmp_path):
        cfg = write_cfg(tmp_path, "r.cfg",
                        ["n_layers=2", "d_model=8", "n_heads=2", "d_ff=16",
                         "vocab=16", "seq_len=4", "n_classes=3",
                         "lily_rank_r=2", "lily_ne=1", "lora_rank_r=2",
                         "layers=0,1", "n_train=16", "n_val=8", "epochs=1",
                         "batch_size=8"])
        out = tmp_path / "rk"
        assert main(["rank", "--config", cfg, "--out", str(out)]) == EXIT_OK
        lines = (out / "rank.csv").read_text().splitlines()
        assert len(lines) == 1 + 2 * 3


class TestSweepAndHeatmapAndPlot:
    def test_sweep_csv(self, tmp_path):
        cfg = write_cfg(tmp_path, "s.cfg",
                        ["ne_values=1,2", "rank_r=2"] + TINY_LINES)
        out = tmp_path / "sw"
        assert main(["sweep", "--config", cfg, "--out", str(out)]) == EXIT_OK
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[0] == "ne,rank,params,val_acc"
        assert len(lines) == 3

    def test_heatmap_and_plot(self, tmp_path):
        cfg = write_cfg(tmp_path, "h.cfg", ["rank_r=2", "ne_1=2"] + TINY_LINES)
        out = tmp_path / "hm"
        assert main(["heatmap", "--config", cfg, "--out", str(out)]) == EXIT_OK
        assert (out / "heatmap.csv").exists()
        assert main(["plot", "--out", str(out)]) == EXIT_OK
        assert (out / "heatmap.png").exists()
        assert (out / "loss.png").exists()

    def test_sweep_rejects_ne_beyond_layers(self, tmp_path):
        cfg = write_cfg(tmp_path, "s.cfg", ["ne_values=5", "rank_r=2"]
                        + TINY_LINES)
        assert main(["sweep", "--config", cfg,
                     "--out", str(tmp_path / "sw")]) == EXIT_CONFIG
