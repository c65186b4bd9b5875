"""Command-line entry point: ``ssmicl <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import harness as hx
from .accounting import count_flops, count_params
from .checkpoint import load_checkpoint, save_checkpoint


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _load_config(args) -> hx.ExperimentConfig:
    cfg = hx.ExperimentConfig()
    if getattr(args, "config", None):
        cfg = hx.ExperimentConfig.from_dict(json.loads(Path(args.config).read_text()))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "steps", None) is not None:
        cfg.train.steps = args.steps
    return cfg


def _write_rows(rows, out, cfg, command):
    text = hx.results_to_csv(rows)
    if out:
        Path(out).write_text(text)
        meta = {"command": command, "config": cfg.to_dict(),
                "wall_time_s": {f"{r.model}/b={r.bits}/snr={r.snr_db}": r.wall_time_s
                                for r in rows}}
        Path(str(out) + ".meta.json").write_text(json.dumps(meta, indent=1))
    else:
        sys.stdout.write(text)


def cmd_gen_data(args):
    cfg = _load_config(args)
    lsf = hx.Dataset.load(args.lsf_from).lsf if args.lsf_from else None
    data = cfg.data if args.split == "train" else cfg.test_data()
    ds = hx.generate_dataset(data, cfg.seed if args.data_seed is None else args.data_seed,
                             args.split, lsf)
    ds.save(args.out)
    _log(f"wrote {len(ds)} prompts to {args.out}")


def cmd_train(args):
    cfg = _load_config(args)
    if args.data:
        ds = hx.Dataset.load(args.data)
    else:
        ds = hx.generate_dataset(cfg.data, cfg.seed, "train")
    model = hx.build_model(args.model, cfg.ssm if args.model == "ssm" else cfg.ticl,
                           ds.config, cfg.seed)
    meta = {"data": asdict(ds.config), "train": asdict(cfg.train)}
    try:
        res = hx.train(model, ds, cfg.train, log=_log)
        meta["final_loss"] = res.loss_curve[-1]
        meta["wall_time_s"] = res.wall_time
        curve = res.loss_curve
    except hx.TrainingAborted as exc:
        meta["aborted"] = str(exc)
        curve = exc.loss_curve
        _log(f"training aborted: {exc}; saving last good parameters")
    save_checkpoint(args.out, model, ds.lsf, hx.codebook_for(ds.config.bits), meta)
    if args.loss_curve:
        Path(args.loss_curve).write_text("\n".join(repr(v) for v in curve) + "\n")
    return 1 if "aborted" in meta else 0


def cmd_eval(args):
    ds = hx.Dataset.load(args.data)
    out = {"prompts": len(ds), "lmmse": asdict(hx.evaluate_mse("lmmse", ds))}
    if args.checkpoint:
        model, lsf, _, _ = load_checkpoint(args.checkpoint)
        if (lsf.mean, lsf.std) != (ds.lsf.mean, ds.lsf.std):
            _log("warning: dataset LSF standardisation differs from the checkpoint's")
        out["model"] = asdict(hx.evaluate_mse(model, ds))
    print(json.dumps(out, indent=1))


def cmd_count(args):
    cfg = _load_config(args)
    rows = []
    for kind in args.model:
        model = hx.build_model(kind, cfg.ssm if kind == "ssm" else cfg.ticl, cfg.data, 0)
        for L in args.lengths:
            rows.append({"model": kind, "L": L, "params": count_params(model),
                         "flops": count_flops(model, L)})
    w = csv.DictWriter(sys.stdout, ["model", "L", "params", "flops"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


def cmd_sweep_b(args):
    cfg = _load_config(args)
    _write_rows(hx.sweep_fronthaul(cfg, log=_log), args.out, cfg, "sweep-b")


def cmd_sweep_snr(args):
    cfg = _load_config(args)
    _write_rows(hx.sweep_snr(cfg, log=_log), args.out, cfg, "sweep-snr")


def cmd_scale_study(args):
    rows = hx.scale_study(layers=args.layers, widths=args.widths, lengths=args.lengths)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.DictWriter(fh, list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.out:
        fh.close()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssmicl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("gen-data", help="generate and save a prompt dataset"))
    sp.add_argument("--split", choices=["train", "test"], default="train")
    sp.add_argument("--data-seed", type=int)
    sp.add_argument("--lsf-from", help="reuse the LSF standardisation of this dataset")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("train", help="train one model and write a checkpoint"))
    sp.add_argument("--model", choices=["ssm", "ticl"], default="ssm")
    sp.add_argument("--data", help="training dataset (.npz); generated from the config if absent")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--loss-curve", help="write per-step losses to this file")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="test MSE of a checkpoint and of LMMSE on a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("count", help="parameter and FLOP counts"))
    sp.add_argument("--model", nargs="+", choices=["ssm", "ticl"], default=["ssm", "ticl"])
    sp.add_argument("--lengths", nargs="+", type=int, default=[13])
    sp.set_defaults(func=cmd_count)

    for name, fn, helptext in (("sweep-b", cmd_sweep_b, "MSE versus fronthaul bits"),
                               ("sweep-snr", cmd_sweep_snr, "MSE versus SNR")):
        sp = common(sub.add_parser(name, help=helptext))
        sp.add_argument("--steps", type=int)
        sp.add_argument("--out", help="CSV path (stdout if absent)")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("scale-study", help="params / FLOPs over a config grid")
    sp.add_argument("--layers", nargs="+", type=int, default=[1, 2, 4, 6])
    sp.add_argument("--widths", nargs="+", type=int, default=[16, 32, 64])
    sp.add_argument("--lengths", nargs="+", type=int, default=[8, 13, 16, 32, 64, 128])
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_scale_study)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args) or 0


if __name__ == "__main__":
    raise SystemExit(main())
