"""Command line: gen, prep, pretrain, export, eval, ablate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .city import (
    generate_pois,
    generate_road_network,
    read_network,
    simulate_trajectories,
    write_network,
    write_pois,
    write_trajectories,
)
from .evaluation import ProbeConfig, build_report, evaluate, write_predictions, write_report
from .pipeline import (
    EXPORT_MODES,
    TrainConfig,
    config_to_text,
    export_static_segment_embeddings,
    export_trajectory_embeddings,
    load_config,
    load_model,
    load_prepared,
    prepare_dir,
    pretrain,
    save_model,
)

log = logging.getLogger("trajviews")

ABLATIONS = ("full", "no_inter_modal", "no_grid_view", "no_align_loss", "no_mlm_loss")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; explicit flags override it")
    for f in fields(TrainConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type in (bool, "bool"):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            kind = {"int": int, "float": float}.get(f.type, f.type)
            p.add_argument(flag, dest=f.name, type=kind, default=None)


def _train_config(args) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(TrainConfig)}
    return load_config(args.config, **overrides)


def _probe_config(args) -> ProbeConfig:
    return ProbeConfig(epochs=args.probe_epochs, hidden=args.probe_hidden)


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net = generate_road_network(args.seed, args.rows, args.cols, args.drop_rate)
    pois = generate_pois(net, args.seed + 1, args.zones, args.pois_per_zone)
    trajs = simulate_trajectories(net, args.seed + 2, args.n, args.sample_period, args.noise, args.min_trip)
    write_network(net, out / "network.json")
    write_pois(pois, out / "pois.csv")
    write_trajectories(trajs, out / "traj.jsonl")
    print(f"wrote {len(net)} segments, {len(pois)} POIs, {len(trajs)} trajectories to {out}")
    return 0


def cmd_prep(args) -> int:
    data = prepare_dir(args.data, seed=args.seed, cell_size=args.cell_size, sigma=args.sigma,
                       transition_penalty=args.penalty)
    r = data.report
    print(f"kept {r.kept} samples (dropped {r.dropped}); splits "
          f"{len(data.train)}/{len(data.val)}/{len(data.test)}; {len(data.vocab.segments)} segments in vocabulary")
    return 0


def cmd_pretrain(args) -> int:
    config = _train_config(args).replace(seed=args.seed)
    data = load_prepared(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_to_text(config))
    result = pretrain(config, data, metrics_path=out / "metrics.csv")
    save_model(out / "model.ckpt", result, data)
    print(f"best epoch {result.best_epoch} (val loss {result.best_val:.4f}); checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_export(args) -> int:
    data = load_prepared(args.data)
    model, _ = load_model(args.checkpoint, data.network)
    if args.mode == "static":
        table = export_static_segment_embeddings(model, data.items("train"))
        keys = np.array(sorted(table))
        np.savez(args.out, ids=keys, vectors=np.stack([table[k] for k in keys]))
        print(f"{len(keys)} segment vectors -> {args.out}")
        return 0
    tab = export_trajectory_embeddings(model, data, data.split(args.split), args.mode)
    np.savez(args.out, ids=np.array(tab.ids), vectors=tab.vectors, labels=np.array(tab.labels))
    print(f"{len(tab.ids)} trajectory vectors ({tab.skipped} skipped) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    data = load_prepared(args.data)
    model, _ = load_model(args.checkpoint, data.network)
    model.store.freeze()
    ev = evaluate(model, data, args.seed, _probe_config(args))
    report = build_report(ev, args.seed)
    write_report(report, args.out)
    if args.predictions:
        Path(args.predictions).unlink(missing_ok=True)
        write_predictions(ev["learned"], args.predictions, "learned")
        write_predictions(ev["control"], args.predictions, "random_control")
    print(json.dumps(report["tasks"], indent=2))
    return 0


def cmd_ablate(args) -> int:
    base = _train_config(args).replace(seed=args.seed)
    data = load_prepared(args.data)
    rows = {}
    for variant in args.variants:
        flags = {} if variant == "full" else {variant: True}
        config = base.replace(**flags)
        result = pretrain(config, data)
        ev = evaluate(result.model, data, args.seed, _probe_config(args))
        rows[variant] = build_report(ev, args.seed)["tasks"]
        print(variant, json.dumps({t: {k: round(v, 4) for k, v in m.items()} for t, m in rows[variant].items()}))
    Path(args.out).write_text(json.dumps({"seed": args.seed, "variants": rows}, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajviews", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic city and trajectories")
    p.add_argument("--out", required=True)
    p.add_argument("--rows", type=int, default=24)
    p.add_argument("--cols", type=int, default=24)
    p.add_argument("--drop-rate", type=float, default=0.1)
    p.add_argument("--zones", type=int, default=8)
    p.add_argument("--pois-per-zone", type=int, default=200)
    p.add_argument("-n", "--n", type=int, default=2000)
    p.add_argument("--sample-period", type=float, default=5.0)
    p.add_argument("--noise", type=float, default=10.0)
    p.add_argument("--min-trip", type=float, default=2500.0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("prep", help="derive views, filter and split")
    p.add_argument("--data", required=True)
    p.add_argument("--cell-size", type=float, default=250.0)
    p.add_argument("--sigma", type=float, default=15.0)
    p.add_argument("--penalty", type=float, default=1.0)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory for checkpoint, metrics and config")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("export", help="export segment or trajectory embeddings (.npz)")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("static",) + EXPORT_MODES, default="full")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    for name, func, helptext in (("eval", cmd_eval, "frozen-probe evaluation"),
                                 ("ablate", cmd_ablate, "pretrain and evaluate ablation variants")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--probe-epochs", type=int, default=50)
        p.add_argument("--probe-hidden", type=int, default=64)
        p.set_defaults(func=func)
    sub.choices["eval"].add_argument("--checkpoint", required=True)
    sub.choices["eval"].add_argument("--predictions")
    _add_train_flags(sub.choices["ablate"])
    sub.choices["ablate"].add_argument("--variants", nargs="+", choices=ABLATIONS,
                                       default=["full", "no_inter_modal", "no_align_loss", "no_mlm_loss"])

    for p in sub.choices.values():
        p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
