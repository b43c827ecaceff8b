"""Command line entry point: ``sb2rb <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import numerics as nx
from .channel import ScenarioUnreachable, SimConfig
from .codebook import dumps_reports
from .harness import (ConfigError, DataError, EvalConfig, Scheme, encode_dataset, generate_dataset,
                      load_dataset, run_experiment, sampled_precoders, split_indices, srpnet_hyper,
                      train_srpnet_on, upsample_all)
from .switch import SwitchTrainConfig, train_switch
from .upsample import NumericalFailure, SrpnetConfig, TrainConfig, per_rb_gain

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("sb2rb")


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def cmd_gen(args) -> None:
    conf = _read_config(args.config)
    n_ue = conf.pop("n_ue", args.n_ue)
    if args.scenario:
        conf["ds_scenario"] = args.scenario
    if args.seed is not None:
        conf["seed"] = args.seed
    try:
        cfg = SimConfig.from_dict(conf)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    ds = generate_dataset(cfg, n_ue, _out(args, "dataset"), args.threads)
    print(json.dumps({c: ds.labels.count(c) for c in ("low", "medium", "high")}))


def _scheme(conf: dict) -> Scheme:
    return Scheme.from_dict(conf.get("scheme", {"kind": "etype2"}))


def cmd_encode(args) -> None:
    conf = _read_config(args.config)
    ds = load_dataset(args.dataset)
    reports, _ = encode_dataset(ds, _scheme(conf), args.threads)
    out = _out(args, "reports.json")
    out.write_text(dumps_reports(reports))


def _train_config(conf: dict, seed: int | None) -> TrainConfig:
    t = dict(conf.get("train", {}))
    net = SrpnetConfig(**{k: tuple(v) if k == "refine_kernel" else v for k, v in conf.get("net", {}).items()})
    if seed is not None:
        t["seed"] = seed
    try:
        return TrainConfig(net=net, **t)
    except TypeError as exc:
        raise ConfigError(f"bad training config: {exc}") from exc


def cmd_train_srpnet(args) -> None:
    conf = _read_config(args.config)
    ds = load_dataset(args.dataset)
    scheme, tc = _scheme(conf), _train_config(conf, args.seed)
    params, tlog = train_srpnet_on(ds, scheme, tc, args.threads)
    out = _out(args, "srpnet_ckpt")
    nx.save_checkpoint(out, params, srpnet_hyper(scheme, tc))
    tlog.to_csv(out / "train_log.csv")
    print(json.dumps({"best_epoch": tlog.best_epoch, "best_val_loss": tlog.best_val}))


def cmd_train_switch(args) -> None:
    conf = _read_config(args.config)
    ds = load_dataset(args.dataset)
    params, hyper = nx.load_checkpoint(args.checkpoint)
    scheme = Scheme.from_dict(hyper.get("scheme", conf.get("scheme", {"kind": "etype2"})))
    seed = args.seed if args.seed is not None else conf.get("seed", 0)
    tr, va, _ = split_indices(len(ds), seed)
    fit = {}
    for name, idx in (("train", tr), ("val", va)):
        sub = ds.subset(idx)
        sps, _, _ = sampled_precoders(sub, scheme, args.threads)
        pd = sub.ul_pdps
        gs = per_rb_gain(upsample_all(sps, pd, "srpnet", params, args.threads), sub.dl).mean(axis=1)
        gi = per_rb_gain(upsample_all(sps, pd, "interp", None, args.threads), sub.dl).mean(axis=1)
        fit[name] = (pd, gs, gi)
    sw = conf.get("switch", {})
    tc = SwitchTrainConfig(**{k: sw[k] for k in ("iters", "lr", "cost_scale") if k in sw})
    lp = train_switch(fit["train"], fit["val"], args.lam, tc)
    out = _out(args, "switch_ckpt")
    nx.save_checkpoint(out, lp.to_tensors(), {"lambda": args.lam, **asdict(tc)})


def cmd_eval(args) -> None:
    conf = _read_config(args.config)
    if args.out:
        conf["out"] = args.out
    if args.seed is not None:
        conf["seed"] = args.seed
    conf["threads"] = args.threads
    if "dataset" not in conf:
        raise ConfigError("eval config needs a 'dataset' entry")
    rep = run_experiment(EvalConfig.from_dict(conf))
    print(json.dumps(rep.meta["cluster_sizes"]))


def cmd_report(args) -> None:
    src = Path(args.results)
    summary = {}
    for name in ("fig4", "fig5", "fig6"):
        f = src / f"{name}.csv"
        if not f.exists():
            raise DataError(f"missing {f}")
        with open(f, newline="") as fh:
            summary[name] = list(csv.DictReader(fh))
    out = _out(args, str(src / "summary.json"))
    out.write_text(json.dumps(summary, indent=1, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sb2rb", description="Subband-to-RB precoder upsampling simulator")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic channel dataset")
    g.add_argument("--n-ue", type=int, default=512)
    g.add_argument("--scenario", choices=["low", "medium", "high", "mixed"])
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("encode", parents=[common], help="encode feedback reports for a dataset")
    e.add_argument("--dataset", required=True)
    e.set_defaults(func=cmd_encode)

    t = sub.add_parser("train-srpnet", parents=[common], help="train the SRPNet upsampler")
    t.add_argument("--dataset", required=True)
    t.set_defaults(func=cmd_train_srpnet)

    s = sub.add_parser("train-switch", parents=[common], help="train the learned PDP switch")
    s.add_argument("--dataset", required=True)
    s.add_argument("--checkpoint", required=True, help="SRPNet checkpoint directory")
    s.add_argument("--lam", type=float, default=1e-4)
    s.set_defaults(func=cmd_train_switch)

    v = sub.add_parser("eval", parents=[common], help="run the evaluation experiment")
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", parents=[common], help="merge experiment CSVs into one JSON summary")
    r.add_argument("--results", default="results")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, ScenarioUnreachable) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
