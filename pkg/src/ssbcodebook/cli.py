"""Command-line entry point: ``generate``, ``train``, ``eval`` and ``beams``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .array_geometry import angular_grid, array_gain_grid, dft_codebook
from .config import ConfigError, load_config
from .evaluation import (POLICIES, EncoderPolicy, beam_histogram, gap_recovery, policy_mean_db,
                         run_scenario, similarity_report, write_histogram_csv, write_report_csv,
                         write_similarity_csv)
from .channel import generate_episodes
from .formats import DatasetFormatError, read_episodes, write_episodes
from .neural_core import ModelFormatError, load_model, save_model
from .seeding import substream
from .ssb_encoder import TrainingDivergedError, build_dataset, build_model, train

log = logging.getLogger("ssbcodebook")
MANIFEST = "manifest.json"


class CliError(Exception):
    def __init__(self, message, code=2):
        super().__init__(message)
        self.code = code


def _say(args, *parts):
    if not args.quiet:
        print(*parts)


def _dft(cfg):
    return dft_codebook(cfg.scenario.geometry, sector=cfg.scenario.sector, l_max=cfg.encoder.l_max)


def _load_dataset(data_dir):
    manifest_path = os.path.join(data_dir, MANIFEST)
    if not os.path.isfile(manifest_path):
        raise CliError(f"no dataset at {data_dir!r} (missing {MANIFEST})")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    episodes = []
    try:
        for shard in manifest["shards"]:
            eps, _ = read_episodes(os.path.join(data_dir, shard["file"]), manifest.get("dt", 0.005))
            episodes += eps
    except (OSError, DatasetFormatError, KeyError) as exc:
        raise CliError(f"cannot read dataset in {data_dir!r}: {exc}") from None
    return manifest, episodes


def cmd_generate(args, cfg):
    out = args.out or "data"
    run = cfg.run
    try:
        os.makedirs(out, exist_ok=True)
        probe = os.path.join(out, ".write-test")
        with open(probe, "wb"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise CliError(f"output directory {out!r} is not writable: {exc}") from None
    digest = cfg.scenario.digest()
    shards = []
    first, last = run.first_index, run.first_index + run.n_episodes
    try:
        for k, start in enumerate(range(first, last, run.shard_size)):
            count = min(run.shard_size, last - start)
            eps = generate_episodes(cfg.scenario, count, seed=run.seed, first_index=start)
            name = f"episodes-{k:04d}.ssbd"
            write_episodes(os.path.join(out, name), eps, digest)
            shards.append({"file": name, "first_index": start, "count": count})
            log.info("wrote %s (%d episodes)", name, count)
        manifest = {"format": "SSBD", "version": 1, "n_episodes": run.n_episodes, "seed": run.seed,
                    "config_digest": digest, "run_digest": cfg.digest(), "dt": cfg.scenario.dt,
                    "shards": shards}
        tmp = os.path.join(out, MANIFEST + ".tmp")
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, os.path.join(out, MANIFEST))
    except OSError as exc:
        raise CliError(f"failed writing dataset: {exc}") from None
    _say(args, f"generated {run.n_episodes} episodes in {out}")


def cmd_train(args, cfg):
    manifest, episodes = _load_dataset(args.data)
    if manifest.get("config_digest") != cfg.scenario.digest():
        log.warning("dataset scenario digest differs from the active configuration")
    enc = cfg.encoder
    dft = _dft(cfg)
    dataset = build_dataset(episodes, dft, cfg.observation, enc, cfg.scenario.noise_var,
                            seed=cfg.run.seed)
    model = build_model(enc, substream(cfg.run.seed, "init"))
    epochs = enc.max_epochs if args.epochs is None else args.epochs
    if epochs < 0:
        raise CliError("--epochs must be >= 0")
    try:
        result = train(model, dataset, enc, seed=cfg.run.seed, max_epochs=epochs)
    except TrainingDivergedError as exc:
        raise CliError(f"training diverged: {exc}", code=3) from None
    out = args.out or "model.ssbm"
    try:
        os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
        save_model(result.model, out)
        hist_path = args.history or os.path.join(os.path.dirname(os.path.abspath(out)), "history.csv")
        with open(hist_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "val_mse", "lr"])
            for h in result.history:
                w.writerow([h["epoch"], f"{h['train_mse']:.9g}", f"{h['val_mse']:.9g}", f"{h['lr']:.9g}"])
    except OSError as exc:
        raise CliError(f"failed writing model: {exc}") from None
    n_tr, n_va = int((~dataset.is_val).sum()), int(dataset.is_val.sum())
    if result.history:
        last = result.history[-1]
        _say(args, f"samples train={n_tr} val={n_va}; final train_mse={last['train_mse']:.6g} "
                   f"val_mse={last['val_mse']:.6g}; best epoch {result.best_epoch}")
    else:
        _say(args, f"samples train={n_tr} val={n_va}; no epochs run, initial val_mse="
                   f"{result.initial_val_mse:.6g}")
    _say(args, f"model written to {out}")


def cmd_eval(args, cfg):
    policies = [p.strip() for p in (args.policies or ",".join(cfg.run.policies)).split(",") if p.strip()]
    unknown = [p for p in policies if p not in POLICIES]
    if unknown or not policies:
        raise CliError(f"unknown policy {', '.join(unknown) or '(none)'}; choose from {', '.join(POLICIES)}")
    model = None
    if "encoder" in policies:
        if not args.model:
            raise CliError("the encoder policy needs --model")
        try:
            model = load_model(args.model)
        except (OSError, ModelFormatError) as exc:
            raise CliError(f"cannot load model {args.model!r}: {exc}") from None
    _, episodes = _load_dataset(args.data)
    dft = _dft(cfg)
    out = args.out or "report"
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out!r}: {exc}") from None
    rows, means, hists, sims = [], {}, {}, {}
    for policy in policies:
        r = run_scenario(episodes, policy, dft, cfg.observation, model, cfg.scenario.noise_var,
                         seed=cfg.run.seed, inference=cfg.encoder.inference)
        rows += r
        means[policy] = policy_mean_db(r)
        if policy == "dft":
            hists[policy] = beam_histogram([b for x in r for b in x.beam_indices], len(dft))
            sims[policy] = similarity_report(dft)[0]
        elif policy == "encoder":
            hists[policy] = beam_histogram([b for x in r for b in x.beam_indices], len(dft))
            cb = EncoderPolicy(model, dft, cfg.observation).initial_codebook()
            sims[policy] = similarity_report(cb)[0]
    rows.sort(key=lambda x: (x.episode, x.t, POLICIES.index(x.policy)))
    violations = sum(x.bound_violations for x in rows)
    try:
        write_report_csv(os.path.join(out, "report.csv"), rows)
        write_histogram_csv(os.path.join(out, "histogram.csv"), hists)
        write_similarity_csv(os.path.join(out, "similarity.csv"), sims)
    except OSError as exc:
        raise CliError(f"failed writing report: {exc}") from None
    _say(args, "summary")
    for policy in policies:
        _say(args, f"  {policy:8s} mean RSRP {means[policy]:.3f} dB")
    if {"dft", "encoder", "svd"} <= set(policies):
        frac = gap_recovery(means["dft"], means["encoder"], means["svd"])
        _say(args, "  gap recovery " + ("n/a (no gap)" if frac is None else f"{frac:.3f}"))
    _say(args, f"  bound violations {violations}")
    _say(args, f"report written to {out}")


def cmd_beams(args, cfg):
    geom = cfg.scenario.geometry
    if args.dft == bool(args.model):
        raise CliError("choose exactly one of --dft or --model")
    dft = _dft(cfg)
    if args.dft:
        codebook = dft
    else:
        try:
            model = load_model(args.model)
        except (OSError, ModelFormatError) as exc:
            raise CliError(f"cannot load model {args.model!r}: {exc}") from None
        codebook = EncoderPolicy(model, dft, cfg.observation).initial_codebook()
    if not 0 <= args.index < len(codebook):
        raise CliError(f"beam index {args.index} outside [0, {len(codebook)})")
    if args.refine < 1:
        raise CliError("--refine must be >= 1")
    grid = angular_grid(geom, cfg.scenario.sector, refine=args.refine)
    gain = array_gain_grid(codebook[args.index], geom, grid)
    out = args.out or "beam.csv"
    try:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["az_deg", "el_deg", "gain_db"])
            for i, az in enumerate(grid.azimuth):
                for j, el in enumerate(grid.elevation):
                    w.writerow([f"{np.rad2deg(az):.6f}", f"{np.rad2deg(el):.6f}", f"{gain[i, j]:.6f}"])
    except OSError as exc:
        raise CliError(f"failed writing {out!r}: {exc}") from None
    _say(args, f"beam {args.index}: peak {gain.max():.3f} dB, written to {out}")


def _global_flags(parser, suppress=False):
    # Subcommand copies use SUPPRESS so they never overwrite a flag given
    # before the subcommand name.
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", help="INI configuration file", **kw)
    parser.add_argument("--seed", type=int, help="master seed (overrides [run] seed)", **kw)
    parser.add_argument("--out", help="output path", **kw)
    parser.add_argument("--quiet", action="store_true", help="suppress progress output", **kw)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    parser = argparse.ArgumentParser(prog="ssbcodebook", description="SSB codebook learning toolkit")
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate episodes into SSBD files")
    p = sub.add_parser("train", parents=[common], help="train the encoder on a dataset")
    p.add_argument("--data", default="data", help="dataset directory")
    p.add_argument("--epochs", type=int, help="override max epochs (0 saves the initial model)")
    p.add_argument("--history", help="history CSV path (default: next to the model)")
    p = sub.add_parser("eval", parents=[common], help="compare policies on a dataset")
    p.add_argument("--data", default="data", help="dataset directory")
    p.add_argument("--model", help="SSBM model file")
    p.add_argument("--policies", help="comma-separated subset of dft,encoder,svd")
    p = sub.add_parser("beams", parents=[common], help="export a beam's gain over the angular grid")
    p.add_argument("--dft", action="store_true", help="use the DFT codebook")
    p.add_argument("--model", help="use the encoder's cold-start codebook from this model")
    p.add_argument("--index", type=int, default=0, help="beam index")
    p.add_argument("--refine", type=int, default=1, help="grid oversampling factor")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise CliError("--seed must be an unsigned 64-bit integer")
            cfg = cfg.with_seed(args.seed)
        # always echoed, even with --quiet, so outputs stay attributable
        print(f"config digest {cfg.digest()}")
        {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "beams": cmd_beams}[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
