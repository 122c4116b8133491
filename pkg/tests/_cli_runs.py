"""A tiny end-to-end CLI pipeline shared by the CLI and acceptance tests."""
import csv
import io
import os

import numpy as np

from metasampler.cli import main
from metasampler.persist import save_reference

TINY = """
seed = {seed}

[model]
channels = 4
depth = 1
batch_size = 16

[model.dataset]
kind = "blobs"
num_classes = 3
n = 90

[sampler]
kind = "{kind}"
step_size = {step}
momentum_decay = 0.05
total_steps = 220
burnin = 100
thin = 10
num_samples = 12
record_trace = true

[meta_train]
outer_iters = 3
inner_steps = 60
thin = 10
samples = 3
val_batch_size = 16
checkpoint_every = 2
channels = [4]
depths = [1]

[probe]
num_points = 5
"""

# Files whose content depends on wall-clock time rather than (config, seed, version).
NON_PRIMARY = {"manifest.json", "diagnostics_timing.json"}


def write_config(path, seed=0, kind="sghmc", step=1e-3):
    with open(path, "w") as fh:
        fh.write(TINY.format(seed=seed, kind=kind, step=step))
    return str(path)


def run_pipeline(root, seed=0):
    """Run every command once under ``root``; returns ``{command: out_dir}``."""
    root = str(root)
    os.makedirs(root, exist_ok=True)
    cfg = write_config(os.path.join(root, "run.toml"), seed)
    l2e_cfg = write_config(os.path.join(root, "l2e.toml"), seed, kind="l2e", step=0.01)
    outs = {c: os.path.join(root, c) for c in ("meta-train", "sample", "sample-l2e", "evaluate",
                                               "diagnose", "probe", "export")}
    codes = {}
    codes["meta-train"] = main(["meta-train", "--config", cfg, "--out", outs["meta-train"]])
    meta = os.path.join(outs["meta-train"], "meta.bin")
    codes["sample"] = main(["sample", "--config", cfg, "--out", outs["sample"]])
    codes["sample-l2e"] = main(["sample", "--config", l2e_cfg, "--out", outs["sample-l2e"],
                                "--checkpoint", meta])
    samples = os.path.join(outs["sample"], "samples.bin")
    ref = os.path.join(root, "ref.bin")
    save_reference(ref, np.random.default_rng(seed).dirichlet(np.ones(3), size=27))
    codes["evaluate"] = main(["evaluate", "--config", cfg, "--out", outs["evaluate"], "--samples", samples,
                              "--reference", ref])
    codes["diagnose"] = main(["diagnose", "--config", cfg, "--out", outs["diagnose"], "--samples", samples])
    codes["probe"] = main(["probe", "--config", cfg, "--out", outs["probe"], "--samples", samples])
    codes["export"] = main(["export", "--config", cfg, "--out", outs["export"], "--samples", samples,
                            "--checkpoint", meta])
    return outs, codes


def strip_column(data, column):
    rows = list(csv.reader(io.StringIO(data.decode())))
    idx = rows[0].index(column)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([r[:idx] + r[idx + 1:] for r in rows])
    return buf.getvalue().encode()


def primary_files(out_dir):
    """Relative path -> bytes for every primary artifact under ``out_dir``."""
    files = {}
    for dirpath, _, names in os.walk(out_dir):
        for name in names:
            if name in NON_PRIMARY or name.endswith(".timing.json"):
                continue
            full = os.path.join(dirpath, name)
            with open(full, "rb") as fh:
                data = fh.read()
            if name == "meta_loss.csv":
                data = strip_column(data, "wall_clock_s")
            files[os.path.relpath(full, out_dir)] = data
    return files
