import csv
import json
import os

import numpy as np
import pytest

from _cli_runs import primary_files, run_pipeline, write_config
from metasampler.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_FORMAT, EXIT_OK, main
from metasampler.metamodel import init_meta_params
from metasampler.persist import load_meta, load_samples, save_reference


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    return run_pipeline(root)


class TestPipeline:
    def test_exit_codes(self, pipeline):
        _, codes = pipeline
        assert set(codes.values()) == {EXIT_OK}

    def test_manifests(self, pipeline):
        outs, _ = pipeline
        for command, out in outs.items():
            m = json.loads(open(os.path.join(out, "manifest.json")).read())
            assert m["status"] == "ok" and m["seed"] == 0 and len(m["config_hash"]) == 64
            assert m["version"] and m["started"] <= m["finished"]
            for path in m["artifacts"].values():
                paths = path if isinstance(path, list) else [path]
                assert all(os.path.exists(p) and p.startswith(out) for p in paths)

    def test_meta_train_outputs(self, pipeline):
        outs, _ = pipeline
        rows = list(csv.reader(open(os.path.join(outs["meta-train"], "meta_loss.csv"))))
        assert rows[0] == ["outer_iter", "task_id", "loss_plus", "loss_minus", "grad_norm", "wall_clock_s"]
        assert len(rows) == 1 + 3
        ckpts = sorted(os.listdir(os.path.join(outs["meta-train"], "checkpoints")))
        assert ckpts == ["meta_000002.bin", "meta_000002.bin.json"]

    def test_sample_set(self, pipeline):
        outs, _ = pipeline
        s = load_samples(os.path.join(outs["sample"], "samples.bin"))
        assert s.K == 12 and s.steps == list(range(110, 221, 10))
        assert s.wall_clock_per_interval > 0 and len(s.delta_sq) == 220

    def test_evaluate(self, pipeline):
        outs, _ = pipeline
        m = json.load(open(os.path.join(outs["evaluate"], "metrics.json")))
        assert set(m) >= {"accuracy", "nll", "ece", "pairwise_kld", "agreement", "total_variation"}
        rows = list(csv.reader(open(os.path.join(outs["evaluate"], "bma_curve.csv"))))
        assert len(rows) == 1 + 12

    def test_diagnose(self, pipeline):
        outs, _ = pipeline
        d = json.load(open(os.path.join(outs["diagnose"], "diagnostics.json")))
        assert d["kappa"] == 2 and 0 <= d["proportion_below_threshold"] <= 1
        t = json.load(open(os.path.join(outs["diagnose"], "diagnostics_timing.json")))
        assert t["ess_per_second"] > 0

    def test_probe(self, pipeline):
        outs, _ = pipeline
        rows = list(csv.reader(open(os.path.join(outs["probe"], "linear_paths.csv"))))
        assert len(rows) == 1 + 11 * 5
        cos = np.loadtxt(os.path.join(outs["probe"], "cosine.csv"), delimiter=",")
        assert cos.shape == (12, 12)

    def test_export(self, pipeline):
        outs, _ = pipeline
        meta = json.load(open(os.path.join(outs["export"], "meta.json")))
        assert np.asarray(meta["w1"]).shape == (9, 32)

    def test_rerun_identical(self, pipeline, tmp_path):
        outs, _ = pipeline
        again, _ = run_pipeline(tmp_path)
        for command in outs:
            assert primary_files(outs[command]) == primary_files(again[command]), command


class TestMetaTrainZero:
    def test_zero_iterations_is_init(self, tmp_path):
        cfg = write_config(tmp_path / "run.toml", seed=5)
        text = open(cfg).read().replace("outer_iters = 3", "outer_iters = 0")
        open(cfg, "w").write(text)
        assert main(["meta-train", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
        meta = load_meta(tmp_path / "o" / "meta.bin")
        np.testing.assert_array_equal(meta.flat(), init_meta_params(5).flat())
        assert len(open(tmp_path / "o" / "meta_loss.csv").readlines()) == 1


class TestErrors:
    def test_unknown_key(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("seed = 0\n[sampler]\nstepsize = 0.1\n")
        assert main(["sample", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_learned_needs_checkpoint(self, tmp_path):
        cfg = write_config(tmp_path / "run.toml", kind="l2e")
        assert main(["sample", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_divergence(self, tmp_path):
        cfg = write_config(tmp_path / "run.toml", kind="sgld", step=1e6)
        out = tmp_path / "o"
        assert main(["sample", "--config", cfg, "--out", str(out)]) == EXIT_DIVERGED
        m = json.load(open(out / "manifest.json"))
        assert m["status"] == "diverged" and m["divergence_step"] >= 1
        assert load_samples(out / "samples.bin").diverged

    def test_corrupt_samples(self, tmp_path):
        cfg = write_config(tmp_path / "run.toml")
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"MSSS\x01\x00\x00\x00garbage")
        assert main(["evaluate", "--config", cfg, "--out", str(tmp_path / "o"), "--samples", str(bad)]) \
            == EXIT_FORMAT

    def test_missing_samples(self, tmp_path):
        cfg = write_config(tmp_path / "run.toml")
        assert main(["diagnose", "--config", cfg, "--out", str(tmp_path / "o"),
                     "--samples", str(tmp_path / "none.bin")]) == EXIT_FORMAT

    def test_reference_shape_mismatch(self, tmp_path, pipeline):
        outs, _ = pipeline
        cfg = write_config(tmp_path / "run.toml")
        ref = tmp_path / "ref.json"
        save_reference(ref, np.full((27, 2), 0.5))
        code = main(["evaluate", "--config", cfg, "--out", str(tmp_path / "o"),
                     "--samples", os.path.join(outs["sample"], "samples.bin"), "--reference", str(ref)])
        assert code == EXIT_CONFIG

    def test_bad_threads(self, tmp_path):
        cfg = write_config(tmp_path / "run.toml")
        assert main(["meta-train", "--config", cfg, "--out", str(tmp_path / "o"), "--threads", "0"]) \
            == EXIT_CONFIG

    def test_seed_override(self, tmp_path):
        cfg = write_config(tmp_path / "run.toml")
        main(["sample", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "7"])
        assert json.load(open(tmp_path / "a" / "manifest.json"))["seed"] == 7
