import pytest

from textcast.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from textcast.manifest import read_manifest


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def prepared(tmp_path):
    """Synthetic seasonal series prepared into train/test window files."""
    data = tmp_path / "data"
    out = tmp_path / "prepared"
    assert run_cli("synth", "--family", "seasonal", "--series", "8", "--seed", "3",
                   "--out", data / "seasonal.tsv") == EXIT_OK
    assert run_cli("prepare", "--data-dir", data, "--out-dir", out,
                   "--datasets", "seasonal") == EXIT_OK
    return tmp_path


@pytest.fixture
def tiny_base(tmp_path):
    out = tmp_path / "pretrained"
    code = run_cli(
        "pretrain", "--out-dir", out, "--iters", "2", "--batch", "2", "--micro-bs", "1",
        "--layers", "1", "--heads", "2", "--d-model", "16", "--d-ff", "24",
        "--series-per-family", "2", "--seed", "1", "--dtype", "float64",
    )
    assert code == EXIT_OK
    return out / "base"


class TestSynth:
    def test_writes_series_file(self, tmp_path):
        out = tmp_path / "d" / "constant.tsv"
        assert run_cli("synth", "--family", "constant", "--series", "5",
                       "--out", out) == EXIT_OK
        assert len(out.read_text().splitlines()) == 5

    def test_unknown_family_exit_2(self, tmp_path):
        assert run_cli("synth", "--family", "nope", "--out", tmp_path / "x.tsv") == EXIT_USAGE


class TestPrepare:
    def test_writes_partitions_and_manifest(self, prepared):
        out = prepared / "prepared"
        assert (out / "seasonal.train.tsv").is_file()
        assert (out / "seasonal.test.tsv").is_file()
        assert (out / "seasonal.train.manifest.tsv").is_file()
        manifest = read_manifest(out / "prepare.manifest")
        assert manifest["dataset.seasonal.n"] == ["12"]
        assert manifest["dataset.seasonal.h"] == ["4"]

    def test_rerun_is_byte_identical(self, prepared):
        out = prepared / "prepared"
        before = {p.name: p.read_bytes() for p in out.iterdir() if p.suffix == ".tsv"}
        before["prepare.manifest"] = (out / "prepare.manifest").read_bytes()
        assert run_cli("prepare", "--data-dir", prepared / "data", "--out-dir", out,
                       "--datasets", "seasonal") == EXIT_OK
        after = {p.name: p.read_bytes() for p in out.iterdir() if p.suffix == ".tsv"}
        after["prepare.manifest"] = (out / "prepare.manifest").read_bytes()
        assert before == after

    def test_unknown_dataset_exit_2_with_candidates(self, tmp_path, capsys):
        code = run_cli("prepare", "--data-dir", tmp_path, "--out-dir", tmp_path / "o",
                       "--datasets", "nope")
        assert code == EXIT_USAGE
        assert "candidates" in capsys.readouterr().err

    def test_missing_series_file_exit_1(self, tmp_path):
        code = run_cli("prepare", "--data-dir", tmp_path, "--out-dir", tmp_path / "o",
                       "--datasets", "seasonal")
        assert code == EXIT_RUNTIME

    def test_registry_dataset_window_geometry(self, tmp_path):
        # nn5_weekly requires n=65, h=8 windows
        from textcast.data import TimeSeries, save_series
        from textcast.rng import stream

        data = tmp_path / "data"
        data.mkdir()
        series = [
            TimeSeries(f"s{i}", "weekly", stream(0, "nn5", i).normal(50, 5, size=80))
            for i in range(3)
        ]
        save_series(data / "nn5_weekly.tsv", series)
        out = tmp_path / "o"
        assert run_cli("prepare", "--data-dir", data, "--out-dir", out,
                       "--datasets", "nn5_weekly") == EXIT_OK
        from textcast.data import load_windows

        test = load_windows(out / "nn5_weekly.test.tsv")
        assert len(test) == 3
        assert all(len(w.x) == 65 and len(w.y) == 8 for w in test)


class TestPretrain:
    def test_checkpoint_and_manifest(self, tiny_base):
        manifest = read_manifest(tiny_base.parent / "pretrain.manifest")
        assert manifest["model.d_model"] == ["16"]
        assert manifest["train.max_iterations"] == ["2"]
        assert "checkpoint_digest" in manifest
        assert (tiny_base / "manifest.txt").is_file()

    def test_seed_fixed_identical_digest(self, tmp_path):
        digests = []
        for name in ("a", "b"):
            out = tmp_path / name
            run_cli("pretrain", "--out-dir", out, "--iters", "2", "--batch", "2",
                    "--micro-bs", "1", "--layers", "1", "--heads", "2", "--d-model", "16",
                    "--d-ff", "24", "--series-per-family", "2", "--seed", "7",
                    "--dtype", "float64")
            digests.append(read_manifest(out / "pretrain.manifest")["checkpoint_digest"])
        assert digests[0] == digests[1]

    def test_zero_iterations_exit_2(self, tmp_path):
        assert run_cli("pretrain", "--out-dir", tmp_path / "o", "--iters", "0") == EXIT_USAGE

    def test_config_file_and_flag_precedence(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("iters=2\nd_model=16\nlayers=1\nheads=2\nd_ff=24\n"
                       "batch=2\nmicro_bs=1\nseries_per_family=2\n")
        out = tmp_path / "o"
        assert run_cli("pretrain", "--out-dir", out, "--config", cfg,
                       "--d-model", "32") == EXIT_OK
        manifest = read_manifest(out / "pretrain.manifest")
        assert manifest["model.d_model"] == ["32"]  # flag wins
        assert manifest["train.max_iterations"] == ["2"]  # file wins over default

    def test_lock_file_blocks_concurrent_runs(self, tmp_path):
        out = tmp_path / "o"
        out.mkdir()
        (out / ".lock").write_text("999999\n")
        code = run_cli("pretrain", "--out-dir", out, "--iters", "1", "--batch", "2",
                       "--micro-bs", "1", "--layers", "1", "--heads", "2",
                       "--d-model", "16", "--d-ff", "24", "--series-per-family", "2")
        assert code == EXIT_RUNTIME


class TestFinetuneEvaluate:
    def test_full_pipeline(self, prepared, tiny_base, tmp_path, capsys):
        windows = prepared / "prepared" / "seasonal.train.tsv"
        ft_out = tmp_path / "ft"
        code = run_cli(
            "finetune", "--base", tiny_base, "--windows", windows, "--out-dir", ft_out,
            "--rank", "2", "--alpha", "4", "--iters", "2", "--batch", "2",
            "--micro-bs", "1", "--lr", "1e-3", "--merge",
        )
        assert code == EXIT_OK
        manifest = read_manifest(ft_out / "finetune.manifest")
        assert manifest["lora.rank"] == ["2"]
        assert (ft_out / "adapters" / "manifest.txt").is_file()
        assert (ft_out / "merged" / "manifest.txt").is_file()

        ev_out = tmp_path / "ev"
        code = run_cli(
            "evaluate", "--model", tiny_base,
            "--adapters", ft_out / "adapters",
            "--windows", prepared / "prepared" / "seasonal.test.tsv",
            "--out-dir", ev_out, "--greedy", "--max-new-tokens", "20",
        )
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "MR%" in out
        metrics = (ev_out / "metrics.tsv").read_text()
        assert "missing_rate_pct" in metrics
        manifest = read_manifest(ev_out / "evaluate.manifest")
        assert any("seasonal.test.tsv" in r for r in manifest["read"])

    def test_stock_defaults_recorded_in_manifest(self, tiny_base, prepared, tmp_path):
        windows = prepared / "prepared" / "seasonal.train.tsv"
        ft_out = tmp_path / "ft_defaults"
        code = run_cli("finetune", "--base", tiny_base, "--windows", windows,
                       "--out-dir", ft_out, "--iters", "1", "--batch", "2",
                       "--micro-bs", "2", "--rank", "2", "--alpha", "4")
        assert code == EXIT_OK
        manifest = read_manifest(ft_out / "finetune.manifest")
        assert manifest["lora.dropout"] == ["0.05"]
        assert manifest["train.learning_rate"] == ["0.0003"]
        assert manifest["lora.targets"] == ["query,value"]

    def test_default_lora_flags_match_published_values(self, tmp_path):
        # r=8, alpha=16, dropout=0.05, lr 3e-4, batch 128, micro 2: the
        # stock configuration the finetune command falls back to
        from textcast.lora import LoraConfig
        from textcast.train import TrainConfig

        assert LoraConfig() == LoraConfig(rank=8, alpha=16.0, dropout=0.05,
                                          targets=("query", "value"))
        assert LoraConfig().scale == 2.0
        tc = TrainConfig()
        assert tc.learning_rate == 3e-4
        assert tc.batch_size == 128
        assert tc.micro_batch == 2

    def test_adapter_base_mismatch_exit_1(self, prepared, tiny_base, tmp_path):
        windows = prepared / "prepared" / "seasonal.train.tsv"
        ft_out = tmp_path / "ft2"
        run_cli("finetune", "--base", tiny_base, "--windows", windows,
                "--out-dir", ft_out, "--rank", "2", "--alpha", "4", "--iters", "1",
                "--batch", "2", "--micro-bs", "1")
        other = tmp_path / "other"
        run_cli("pretrain", "--out-dir", other, "--iters", "2", "--batch", "2",
                "--micro-bs", "1", "--layers", "1", "--heads", "2", "--d-model", "16",
                "--d-ff", "24", "--series-per-family", "2", "--seed", "99",
                "--dtype", "float64")
        code = run_cli("evaluate", "--model", other / "base",
                       "--adapters", ft_out / "adapters",
                       "--windows", prepared / "prepared" / "seasonal.test.tsv",
                       "--out-dir", tmp_path / "ev2", "--greedy")
        assert code == EXIT_RUNTIME

    def test_two_temperatures_two_rows_per_dataset(self, prepared, tiny_base, tmp_path):
        ev_out = tmp_path / "ev3"
        code = run_cli("evaluate", "--model", tiny_base,
                       "--windows", prepared / "prepared" / "seasonal.test.tsv",
                       "--out-dir", ev_out, "--temperature", "10,20",
                       "--max-new-tokens", "8")
        assert code == EXIT_OK
        lines = (ev_out / "metrics.tsv").read_text().splitlines()
        data_rows = [l for l in lines if l.startswith("seasonal.test")]
        assert len(data_rows) == 2
        assert any("[T=10]" in l for l in data_rows)
        assert any("[T=20]" in l for l in data_rows)

    def test_zero_shot_refuses_train_partitions(self, prepared, tiny_base, tmp_path):
        code = run_cli("evaluate", "--model", tiny_base,
                       "--windows", prepared / "prepared" / "seasonal.train.tsv",
                       "--out-dir", tmp_path / "ev4", "--greedy", "--zero-shot")
        assert code == EXIT_USAGE


class TestGradcheckCommand:
    def test_passes_and_prints_table(self, capsys):
        assert run_cli("gradcheck") == EXIT_OK
        out = capsys.readouterr().out
        assert "decoder_block" in out
        assert "PASS" in out
