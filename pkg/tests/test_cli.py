"""Command-line pipelines: config handling, artifacts, determinism, exit codes."""

import json
import os
from pathlib import Path

import numpy as np
import pytest

from srea.cli import (
    ConfigError,
    canonical_config,
    config_hash,
    load_config,
    main,
    parse_config_text,
    run_experiment,
)
from srea.data import generate_cbf, load_dataset, save_dataset
from srea.tensor import Rng


BASE = {"generator": "cbf", "n": 60, "length": 32, "epochs": 3, "seeds": [0],
        "noise_type": "symmetric", "noise_ratio": 0.3,
        "lambda_init": 0, "delta_start": 1, "delta_end": 1}


def cfg_with(**kw):
    merged = dict(BASE)
    merged.update(kw)
    return canonical_config(merged)


class TestConfigParsing:
    def test_parse_flat_file(self):
        text = '''
        # a comment
        generator = "cbf"
        n = 120
        noise_ratio = 0.3   # trailing comment
        use_cc = false
        seeds = [0, 1, 2]
        '''
        parsed = parse_config_text(text)
        assert parsed == {"generator": "cbf", "n": 120, "noise_ratio": 0.3,
                          "use_cc": False, "seeds": [0, 1, 2]}

    def test_bad_line_reports_position(self):
        with pytest.raises(ConfigError, match=":2"):
            parse_config_text("n = 3\nnot a kv line")

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('generator = "cbf"\nbogus_key = 1\n')
        with pytest.raises(ConfigError, match="bogus_key"):
            load_config(p)

    def test_flags_override_file(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('generator = "cbf"\nepochs = 50\n')
        cfg = load_config(p, {"epochs": 7})
        assert cfg["epochs"] == 7

    def test_requires_dataset_or_generator(self):
        with pytest.raises(ConfigError, match="generator"):
            canonical_config({})

    def test_seed_validation(self):
        with pytest.raises(ConfigError, match="distinct"):
            cfg_with(seeds=[1, 1])
        with pytest.raises(ConfigError, match="nonempty"):
            cfg_with(seeds=[])

    def test_noise_validation(self):
        with pytest.raises(ConfigError):
            cfg_with(noise_ratio=1.0)
        with pytest.raises(ConfigError):
            cfg_with(noise_type="salt")


class TestConfigHash:
    def test_equivalent_values_same_hash(self):
        a = cfg_with(noise_ratio=0.3, epochs=3)
        b = cfg_with(noise_ratio=0.30, epochs=3.0)
        assert config_hash(a) == config_hash(b)

    def test_semantic_change_changes_hash(self):
        base = cfg_with()
        for key, value in [("noise_ratio", 0.4), ("epochs", 4), ("algorithm", "ce"),
                           ("delta_end", 2), ("use_cc", False), ("seeds", [1])]:
            assert config_hash(cfg_with(**{key: value})) != config_hash(base), key

    def test_non_semantic_fields_ignored(self):
        a = dict(cfg_with())
        a["out"] = "somewhere/else"
        assert config_hash(a) == config_hash(cfg_with())


class TestGenDataAndCorrupt:
    def test_gen_data_cbf(self, tmp_path):
        out = tmp_path / "cbf.bin"
        rc = main(["gen-data", "--generator", "cbf", "--n", "45", "--length", "32",
                   "--out", str(out)])
        assert rc == 0
        ds = load_dataset(out)
        assert len(ds) == 45 and ds.k == 3

    def test_gen_data_chp_writes_csv_and_windows(self, tmp_path):
        out = tmp_path / "chp.bin"
        rc = main(["gen-data", "--generator", "chp", "--days", "2", "--out", str(out)])
        assert rc == 0
        assert (tmp_path / "chp.csv").exists()
        ds = load_dataset(out)
        assert ds.samples.shape[1:] == (3, 36)

    def test_corrupt_identity_keeps_labels(self, tmp_path):
        src = tmp_path / "clean.bin"
        save_dataset(generate_cbf(30, 32, Rng(0)), src)
        out = tmp_path / "noisy.bin"
        rc = main(["corrupt", "--dataset", str(src), "--noise-type", "symmetric",
                   "--noise-ratio", "0.0", "--out", str(out)])
        assert rc == 0
        assert load_dataset(out).labels.tolist() == load_dataset(src).labels.tolist()

    def test_corrupt_same_seed_same_bytes(self, tmp_path):
        src = tmp_path / "clean.bin"
        save_dataset(generate_cbf(30, 32, Rng(0)), src)
        outs = []
        for name in ("a.bin", "b.bin"):
            out = tmp_path / name
            main(["corrupt", "--dataset", str(src), "--noise-type", "symmetric",
                  "--noise-ratio", "0.4", "--seed", "5", "--out", str(out)])
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_corrupt_flip_class_zero_untouched(self, tmp_path):
        src = tmp_path / "clean.bin"
        ds = generate_cbf(60, 32, Rng(1))
        save_dataset(ds, src)
        out = tmp_path / "noisy.bin"
        main(["corrupt", "--dataset", str(src), "--noise-type", "flip",
              "--noise-ratio", "0.3", "--out", str(out)])
        noisy = load_dataset(out)
        zero = ds.labels == 0
        np.testing.assert_array_equal(noisy.labels[zero], 0)
        assert (out.parent / (out.name + ".oracle")).exists()

    def test_corrupt_writes_sealed_oracle_separately(self, tmp_path):
        src = tmp_path / "clean.bin"
        ds = generate_cbf(30, 32, Rng(2))
        save_dataset(ds, src)
        out = tmp_path / "noisy.bin"
        main(["corrupt", "--dataset", str(src), "--noise-type", "asymmetric",
              "--noise-ratio", "0.5", "--seed", "3", "--out", str(out)])
        assert load_dataset(out).clean_oracle is None  # corrupted file itself is sealed
        from srea.recordio import read_records
        oracle = read_records(out.parent / (out.name + ".oracle"))
        np.testing.assert_array_equal(oracle["clean_labels"].astype(int), ds.labels)


class TestTrainCommand:
    def test_train_writes_artifacts(self, tmp_path):
        out = tmp_path / "runs"
        rc = main(["train", "--generator", "cbf", "--n", "60", "--length", "32",
                   "--epochs", "2", "--delta-start", "1", "--delta-end", "1",
                   "--noise-type", "symmetric", "--noise-ratio", "0.2",
                   "--seeds", "0", "--out", str(out), "--save-model"])
        assert rc == 0
        assert (out / "results.jsonl").exists()
        run_dirs = list((out / "runs").iterdir())
        assert len(run_dirs) == 1
        files = {p.name for p in run_dirs[0].iterdir()}
        assert {"result.json", "trace.jsonl", "meta.json", "model.ckpt", "done"} <= files
        record = json.loads((run_dirs[0] / "result.json").read_text())
        assert 0.0 <= record["test_macro_f1"] <= 1.0
        assert record["code_version"]

    def test_one_record_per_seed(self, tmp_path):
        out = tmp_path / "runs"
        rc = main(["train", "--generator", "cbf", "--n", "60", "--length", "32",
                   "--epochs", "1", "--seeds", "0,1,2", "--out", str(out)])
        assert rc == 0
        lines = (out / "results.jsonl").read_text().strip().split("\n")
        assert len(lines) == 3
        assert sorted(json.loads(l)["seed"] for l in lines) == [0, 1, 2]

    def test_missing_dataset_exit_code_2(self, tmp_path):
        rc = main(["train", "--dataset", str(tmp_path / "nope.bin"),
                   "--out", str(tmp_path / "r")])
        assert rc == 2

    def test_determinism_bit_identical_result_and_trace(self, tmp_path):
        blobs = []
        for attempt in ("one", "two"):
            out = tmp_path / attempt
            rc = main(["train", "--generator", "cbf", "--n", "60", "--length", "32",
                       "--epochs", "2", "--delta-start", "1", "--delta-end", "1",
                       "--noise-type", "symmetric", "--noise-ratio", "0.3",
                       "--seeds", "7", "--out", str(out)])
            assert rc == 0
            run_dir = next((out / "runs").iterdir())
            blobs.append((run_dir / "result.json").read_bytes()
                         + (run_dir / "trace.jsonl").read_bytes())
        assert blobs[0] == blobs[1]

    def test_ce_baseline_runs(self, tmp_path):
        out = tmp_path / "ce"
        rc = main(["train", "--generator", "cbf", "--n", "60", "--length", "32",
                   "--epochs", "2", "--algorithm", "ce", "--seeds", "0",
                   "--out", str(out)])
        assert rc == 0
        record = json.loads((out / "results.jsonl").read_text().strip())
        assert record["algorithm"] == "ce"
        assert record["relabel_fraction"] == 0.0


class TestEvalCommand:
    def test_eval_checkpoint(self, tmp_path):
        out = tmp_path / "runs"
        main(["train", "--generator", "cbf", "--n", "60", "--length", "32",
              "--epochs", "1", "--seeds", "0", "--out", str(out), "--save-model"])
        run_dir = next((out / "runs").iterdir())
        data_path = tmp_path / "eval.bin"
        save_dataset(generate_cbf(30, 32, Rng(5)), data_path)
        rc = main(["eval", "--checkpoint", str(run_dir / "model.ckpt"),
                   "--dataset", str(data_path), "--out", str(tmp_path / "ev")])
        assert rc == 0
        metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
        assert 0.0 <= metrics["macro_f1"] <= 1.0
        csv = (tmp_path / "ev" / "confusion.csv").read_text().strip().split("\n")
        assert len(csv) == 4  # header + 3 classes


def _fake_results(root, name, cond_scores, seeds=5, jitter=0.01, seed=0):
    """Write a results.jsonl with per-seed scores around each condition mean."""
    gen = np.random.default_rng(seed)
    d = Path(root) / name
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "results.jsonl", "w") as fh:
        for cond, mean in cond_scores.items():
            noise_type, ratio = cond
            for s in range(seeds):
                rec = {"algorithm": name, "seed": s, "dataset_name": "cbf-like",
                       "noise_type": noise_type, "noise_ratio": ratio,
                       "test_macro_f1": float(np.clip(mean + jitter * gen.normal(), 0, 1))}
                fh.write(json.dumps(rec) + "\n")
    return d


class TestCompareCommand:
    CONDS = {("symmetric", 0.15): 0.9, ("symmetric", 0.3): 0.8, ("asymmetric", 0.2): 0.85,
             ("flip", 0.3): 0.75, ("flip", 0.4): 0.7}

    def test_self_comparison_all_similar(self, tmp_path):
        a = _fake_results(tmp_path, "one", self.CONDS, seed=1)
        b = _fake_results(tmp_path, "two", self.CONDS, seed=1)  # identical scores
        out = tmp_path / "cmp"
        rc = main(["compare", f"one={a}", f"two={b}", "--out", str(out)])
        assert rc == 0
        mwu = json.loads((out / "mwu.json").read_text())
        for cond in mwu["table"].values():
            assert cond["two"]["verdict"] == "≈"

    def test_disjoint_distributions_verdicts(self, tmp_path):
        hi = _fake_results(tmp_path, "hi", {k: 0.95 for k in self.CONDS}, seed=2)
        lo = _fake_results(tmp_path, "lo", {k: 0.30 for k in self.CONDS}, seed=3)
        out = tmp_path / "cmp"
        rc = main(["compare", f"hi={hi}", f"lo={lo}", "--out", str(out)])
        assert rc == 0
        mwu = json.loads((out / "mwu.json").read_text())
        for cond in mwu["table"].values():
            assert cond["lo"]["verdict"] == "+"  # reference 'hi' significantly greater

    def test_three_way_emits_friedman_and_cd(self, tmp_path):
        a = _fake_results(tmp_path, "a", {k: v for k, v in self.CONDS.items()}, seed=4)
        b = _fake_results(tmp_path, "b", {k: v - 0.2 for k, v in self.CONDS.items()}, seed=5)
        c = _fake_results(tmp_path, "c", {k: v - 0.4 for k, v in self.CONDS.items()}, seed=6)
        out = tmp_path / "cmp"
        rc = main(["compare", f"a={a}", f"b={b}", f"c={c}", "--out", str(out)])
        assert rc == 0
        fr = json.loads((out / "friedman.json").read_text())
        assert fr["mean_ranks"]["a"] == pytest.approx(1.0)
        assert (out / "cd_diagram.svg").exists()
        layout = json.loads((out / "cd_diagram.json").read_text())
        assert layout["cd"] > 0
        report = (out / "report.txt").read_text()
        assert "(" in report  # per-cell verdict notation

    def test_report_matches_table_notation(self, tmp_path):
        hi = _fake_results(tmp_path, "hi", {k: 0.95 for k in self.CONDS}, seed=7)
        lo = _fake_results(tmp_path, "lo", {k: 0.30 for k in self.CONDS}, seed=8)
        out = tmp_path / "cmp"
        main(["compare", f"hi={hi}", f"lo={lo}", "--out", str(out)])
        report = (out / "report.txt").read_text()
        assert "(+)" in report

    def test_missing_condition_rejected(self, tmp_path):
        a = _fake_results(tmp_path, "a", self.CONDS, seed=9)
        b = _fake_results(tmp_path, "b", dict(list(self.CONDS.items())[:3]), seed=10)
        rc = main(["compare", f"a={a}", f"b={b}", "--out", str(tmp_path / "cmp")])
        assert rc == 2


class TestBenchCommand:
    def test_grid_expansion_and_resume(self, tmp_path, capsys):
        out = tmp_path / "bench"
        args = ["bench", "--generator", "cbf", "--n", "60", "--length", "32",
                "--epochs", "1", "--seeds", "0,1",
                "--noise-types", "symmetric,flip", "--noise-ratios", "0.1,0.3",
                "--out", str(out)]
        rc = main(args)
        assert rc == 0
        text = capsys.readouterr().out
        assert "8 runs scheduled" in text
        lines = (out / "results.jsonl").read_text().strip().split("\n")
        assert len(lines) == 8
        # rerun: everything is marker-complete, nothing appended
        rc = main(args)
        assert rc == 0
        assert "8 skipped" in capsys.readouterr().out
        assert len((out / "results.jsonl").read_text().strip().split("\n")) == 8

    def test_worker_count_does_not_change_results(self, tmp_path):
        results = []
        for workers, name in ((1, "w1"), (4, "w4")):
            out = tmp_path / name
            os.environ["SREA_THREADS"] = str(workers)
            try:
                main(["bench", "--generator", "cbf", "--n", "60", "--length", "32",
                      "--epochs", "1", "--seeds", "0,1", "--noise-types", "symmetric",
                      "--noise-ratios", "0.2,0.4", "--out", str(out)])
            finally:
                del os.environ["SREA_THREADS"]
            runs = sorted((out / "runs").iterdir())
            results.append(b"".join((r / "result.json").read_bytes() for r in runs))
        assert results[0] == results[1]


class TestExitCodes:
    def test_usage_error_is_2(self, tmp_path):
        assert main(["train", "--out", str(tmp_path)]) == 2  # no dataset/generator

    def test_runtime_failure_is_1(self, tmp_path):
        # corrupt dataset file triggers a runtime failure inside the pipeline
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"SREA" + b"\x00" * 16)
        assert main(["train", "--dataset", str(bad), "--out", str(tmp_path / "r")]) == 1

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
