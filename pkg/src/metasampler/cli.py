"""Command-line entry point: ``metasampler <command> --config run.toml``.

Exit codes: 0 success, 2 configuration error, 3 divergence, 4 format error.
Every command writes ``manifest.json`` next to its artifacts in ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import os
import subprocess
import sys

import numpy as np

from . import __version__
from .config import load_config, resolve_steps, save_config
from .diagnostics import (chain_split_rhat, coordinate_subset, ess_many, ess_per_second,
                          rhat_summary)
from .errors import (ChainDivergence, ConfigurationError, ContractError, FormatError,
                     MetaTrainingDiverged)
from .metamodel import MetaParams, init_meta_params, warm_start_meta_params
from .metatrain import meta_train, write_loss_csv
from .metrics import accuracy, agreement, bma_curve, ece, member_probs, nll, pairwise_kld, total_variation
from .model import EnergyModel, init_params
from .persist import load_meta, load_reference, load_samples, save_meta, save_samples
from .probe import PathSpec, barrier, classification_evaluator, linear_path_losses, pairwise_cosine, write_path_csv
from .samplers import SamplerConfig, ScheduleSpec, run_chain
from .tasks import batch_iterator, make_arch, split_dataset

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_FORMAT = 0, 2, 3, 4


def code_version():
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=os.path.dirname(__file__), timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


class Run:
    """Output directory, manifest bookkeeping and artifact paths for one command."""

    def __init__(self, command, config, out):
        self.command = command
        self.config = config
        self.out = out
        os.makedirs(out, exist_ok=True)
        self.started = _now()
        self.artifacts = {}
        self.extra = {}

    def path(self, key, name):
        p = os.path.join(self.out, name)
        self.artifacts[key] = p
        return p

    def finish(self, status="ok"):
        save_config(self.path("config", "config.json"), self.config)
        manifest = {
            "command": self.command,
            "status": status,
            "config_hash": self.config.digest(),
            "seed": self.config.seed,
            "version": code_version(),
            "started": self.started,
            "finished": _now(),
            "artifacts": self.artifacts,
            **self.extra,
        }
        _write_json(os.path.join(self.out, "manifest.json"), manifest)


# -- task helpers -----------------------------------------------------------


def build_task(cfg):
    m = cfg.model
    ds = m.dataset.spec().build(m.data_seed)
    train, val = split_dataset(ds, m.val_fraction, m.data_seed + 1)
    arch = make_arch(train, m.channels, m.depth, m.residual)
    return train, val, EnergyModel(arch, m.prior_precision, 1.0)


def sampler_config(section, total):
    schedule = None
    if section.schedule != "constant":
        schedule = ScheduleSpec(section.schedule, section.step_size, total, section.num_cycles,
                                section.exploration_ratio)
    return SamplerConfig(section.step_size, section.friction, section.momentum_decay, section.mass,
                         section.psgld_alpha, section.psgld_lambda, section.temperature, schedule)


def _samples_path(args, cfg):
    path = args.samples or cfg.paths.samples
    if not path:
        raise ConfigurationError("no sample set given (use --samples or paths.samples)")
    return path


# -- commands ---------------------------------------------------------------


def cmd_meta_train(args, cfg, run):
    mt = cfg.meta_train
    es = mt.es_config()
    dist = mt.task_distribution(cfg.seed)
    make_init = warm_start_meta_params if mt.init == "identity" else init_meta_params
    init = make_init(cfg.seed, mt.normalization)
    ckpt_dir = os.path.join(run.out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    saved = []

    def on_checkpoint(it, meta):
        p = os.path.join(ckpt_dir, f"meta_{it:06d}.bin")
        save_meta(p, meta)
        saved.append(p)

    run.extra["resolved"] = {"burnin": es.burnin_steps, "inner_steps": es.inner_steps}
    try:
        result = meta_train(dist, es, mt.outer_iters, cfg.seed, init=init,
                            checkpoint_every=mt.checkpoint_every, on_checkpoint=on_checkpoint,
                            threads=args.threads)
    except MetaTrainingDiverged as exc:
        run.extra["error"] = str(exc)
        run.finish("diverged")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_meta(run.path("meta", "meta.bin"), result.meta)
    write_loss_csv(run.path("loss_csv", "meta_loss.csv"), result.records)
    run.artifacts["checkpoints"] = saved
    run.finish()
    return EXIT_OK


def cmd_sample(args, cfg, run):
    s = cfg.sampler
    meta = None
    if s.kind in ("l2e", "kinetic_l2e"):
        ckpt = args.checkpoint or cfg.paths.checkpoint
        if not ckpt:
            raise ConfigurationError(f"sampler {s.kind} needs a meta-parameter checkpoint (--checkpoint)")
        meta = load_meta(ckpt)
    train, _, model = build_task(cfg)
    total, burnin, thin = resolve_steps(s, train.n, cfg.model.batch_size)
    run.extra["resolved"] = {"total_steps": total, "burnin": burnin, "thin": thin,
                             "steps_per_epoch": max(1, train.n // cfg.model.batch_size)}
    batches = batch_iterator(train, min(cfg.model.batch_size, train.n), cfg.seed)
    theta0 = init_params(model.arch, cfg.seed).values
    samples = run_chain(s.kind, model, sampler_config(s, total), total, burnin, thin, s.num_samples,
                        cfg.seed, batches=batches, theta0=theta0, meta=meta, trace=s.record_trace)
    samples.metadata.update({"arch": model.arch.to_dict(), "config_hash": cfg.digest()})
    save_samples(run.path("samples", "samples.bin"), samples)
    run.artifacts["timing"] = run.artifacts["samples"] + ".timing.json"
    if samples.diverged:
        run.extra["divergence_step"] = samples.divergence_step
        run.finish("diverged")
        print(f"error: chain diverged at step {samples.divergence_step}; "
              f"{samples.K} snapshots written", file=sys.stderr)
        return EXIT_DIVERGED
    run.finish()
    return EXIT_OK


def cmd_evaluate(args, cfg, run):
    samples = load_samples(_samples_path(args, cfg))
    if samples.K < 1:
        raise ContractError("sample set is empty")
    _, val, model = build_task(cfg)
    members = member_probs(samples, model, val.inputs)
    pred = members.mean(axis=0)
    out = {"K": samples.K, "n_eval": val.n, "accuracy": accuracy(pred, val.labels),
           "nll": nll(pred, val.labels), "ece": ece(pred, val.labels)}
    out["pairwise_kld"] = pairwise_kld(members, val.labels) if samples.K >= 2 else None
    ref_path = args.reference or cfg.paths.reference
    if ref_path:
        ref = load_reference(ref_path)
        if ref.shape != pred.shape:
            raise ContractError(f"reference has shape {ref.shape}, predictions {pred.shape}")
        out["agreement"] = agreement(pred, ref)
        out["total_variation"] = total_variation(pred, ref)
    _write_json(run.path("metrics", "metrics.json"), out)
    with open(run.path("bma_curve", "bma_curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("num_samples", "accuracy", "nll"))
        for k, acc, loss in bma_curve(members, val.labels):
            w.writerow((k, repr(acc), repr(loss)))
    run.finish()
    return EXIT_OK


def cmd_diagnose(args, cfg, run):
    samples = load_samples(_samples_path(args, cfg))
    d = cfg.diagnostics
    if samples.K < 4:
        raise ContractError(f"diagnostics need at least 4 snapshots, got {samples.K}")
    coords = (coordinate_subset(samples.layout, d.max_coords) if samples.layout is not None
              else np.arange(min(samples.snapshots.shape[1], d.max_coords)))
    traces = samples.snapshots[:, coords]
    rhat = chain_split_rhat(traces, d.kappa, d.rank_normalize)
    summary = rhat_summary(rhat, samples.layout, coords, d.threshold)
    ess_values, degenerate = (ess_many(traces) if samples.K >= 10
                              else (np.full(len(coords), np.nan), np.ptp(traces, axis=0) == 0))
    out = {
        "K": samples.K,
        "kappa": d.kappa,
        "num_coords": int(len(coords)),
        "rhat": summary,
        "proportion_below_threshold": summary["proportion"],
        "ess_median": None if samples.K < 10 else float(np.median(ess_values)),
        "degenerate_coords": int(degenerate.sum()),
    }
    _write_json(run.path("diagnostics", "diagnostics.json"), out)
    timing = {"ess_per_second": None}
    if samples.K >= 10 and samples.wall_clock_per_interval:
        timing["ess_per_second"] = ess_per_second(samples, coords, d.report_scale)
        timing["report_scale"] = d.report_scale
    _write_json(run.path("timing", "diagnostics_timing.json"), timing)
    if samples.delta_sq is not None:
        with open(run.path("update_norms", "update_norms.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("step", "delta_sq"))
            for i, v in enumerate(samples.delta_sq, start=1):
                w.writerow((i, repr(float(v))))
    run.finish()
    return EXIT_OK


def _pairs(k, mode):
    if mode == "first_last":
        return [(0, k - 1)] if k > 1 else []
    if mode == "all":
        return [(i, j) for i in range(k) for j in range(i + 1, k)]
    return [(i, i + 1) for i in range(k - 1)]


def cmd_probe(args, cfg, run):
    samples = load_samples(_samples_path(args, cfg))
    _, val, model = build_task(cfg)
    evaluate = classification_evaluator(model, val.inputs, val.labels)
    paths, barriers = {}, {}
    for i, j in _pairs(samples.K, cfg.probe.pairs):
        key = f"{i}-{j}"
        paths[key] = linear_path_losses(evaluate, PathSpec(samples.snapshots[i], samples.snapshots[j],
                                                           cfg.probe.num_points))
        barriers[key] = barrier(paths[key])
    write_path_csv(run.path("paths", "linear_paths.csv"), paths)
    cos, zero = pairwise_cosine(samples)
    np.savetxt(run.path("cosine", "cosine.csv"), cos, delimiter=",", fmt="%.17g")
    _write_json(run.path("probe", "probe.json"), {"barriers": barriers, "zero_norm": zero.tolist()})
    run.finish()
    return EXIT_OK


def cmd_export(args, cfg, run):
    if args.checkpoint or cfg.paths.checkpoint:
        meta = load_meta(args.checkpoint or cfg.paths.checkpoint)
        obj = {name: np.asarray(getattr(meta, name)).tolist() for name, _ in MetaParams.SHAPES}
        obj["normalization"] = meta.normalization
        _write_json(run.path("meta_json", "meta.json"), obj)
    if args.samples or cfg.paths.samples:
        samples = load_samples(_samples_path(args, cfg))
        with open(run.path("samples_csv", "samples.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step"] + [f"theta{i}" for i in range(samples.snapshots.shape[1])])
            for step, row in zip(samples.steps, samples.snapshots):
                w.writerow([step] + [repr(float(v)) for v in row])
    if not run.artifacts:
        raise ConfigurationError("export needs --checkpoint and/or --samples")
    run.finish()
    return EXIT_OK


COMMANDS = {
    "meta-train": cmd_meta_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
    "probe": cmd_probe,
    "export": cmd_export,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="metasampler", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML or JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (default: paths.out)")
        p.add_argument("--checkpoint", help="meta-parameter checkpoint")
        p.add_argument("--reference", help="reference predictive (JSON or binary)")
        p.add_argument("--samples", help="sample-set file")
        p.add_argument("--threads", type=int, default=1, help="worker processes for ES rollouts")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        cfg = load_config(args.config, args.seed)
        run = Run(args.command, cfg, args.out or cfg.paths.out)
        return COMMANDS[args.command](args, cfg, run)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ChainDivergence, MetaTrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
