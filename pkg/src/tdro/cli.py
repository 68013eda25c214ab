"""Command-line interface: generate | cluster | train | evaluate | report.

Every value has three sources, later ones winning: built-in defaults, a JSON
config file (``--config``), and explicit flags. Each run writes a
``manifest.json`` with the fully resolved config; passing that manifest back
via ``--config`` replays the run bit-for-bit.

Output directories come from ``--out``, falling back to
``$TDRO_OUT/<command>`` when the environment variable is set.

Exit codes: 0 success, 2 usage or configuration error, 3 unreadable or
inconsistent data.
"""

import argparse
import json
import os
import sys

import numpy as np

from .data import (IntegrityError, ParseError, chronological_split,
                   load_dataset, write_features, write_interactions)
from .evaluate import SETTINGS, EvalReport, build_report
from .grouping import build_group_period_index, write_item_groups
from .model import init_model, load_checkpoint, save_checkpoint
from .optim import TdroConfig, save_state, train
from .synth import SynthConfig, generate

OUT_ENV = "TDRO_OUT"

_GENERATE_DEFAULTS = {
    "out": None,
    "seed": 0,
    "num_users": 500,
    "num_items": 2000,
    "num_concepts": 4,
    "d_feat": 16,
    "periods": 10,
    "interactions_per_period": 5000,
    "drift": 0.6,
    "feature_noise": 0.3,
    "temperature": 0.5,
}

_SPLIT_DEFAULTS = {
    "ratios": "0.8,0.1,0.1",
    "split_mode": "chronological",
}

_CLUSTER_DEFAULTS = {
    "data": None,
    "out": None,
    "seed": 0,
    "num_groups": 3,
    "num_periods": 3,
    "p": 0.2,
    "max_iters": 100,
    "tol": 1e-6,
    **_SPLIT_DEFAULTS,
}

_TRAIN_DEFAULTS = {
    "data": None,
    "out": None,
    "mode": "tdro",
    "dim": 128,
    "hidden": 256,
    "alpha": 0.5,
    "gamma": 0.1,
    "num_groups": 3,
    "num_periods": 3,
    "lam": 0.3,
    "p": 0.2,
    "mu": 0.2,
    "eta_w": 0.1,
    "eta": 5.0,
    "normalize_gradients": False,
    "ema_decay": 0.9,
    "drop_worst_case": False,
    "inner_extractor_only": False,
    "epochs": 60,
    "batch_size": 128,
    "seed": 0,
    "patience": None,
    "k_metric": 20,
    "warm_mode": "hybrid",
    **_SPLIT_DEFAULTS,
}

_EVALUATE_DEFAULTS = {
    "data": None,
    "checkpoint": None,
    "out": None,
    "settings": "all,warm,cold",
    "k": 20,
    "part": "test",
    "warm_mode": "hybrid",
    "user_shift_groups": 3,
    "item_pop_groups": 4,
    "label": None,
    "seed": 0,
    **_SPLIT_DEFAULTS,
}


def _load_config_file(path):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    # a manifest from a previous run is also accepted
    if "config" in obj and isinstance(obj["config"], dict):
        return obj["config"]
    return obj


def _resolve(defaults, args):
    """defaults < config file < flags; unknown file keys are an error."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _load_config_file(args.config)
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _resolve_out(cfg, command):
    if cfg["out"] is None:
        root = os.environ.get(OUT_ENV)
        if not root:
            raise ValueError(
                f"no output directory: pass --out or set ${OUT_ENV}")
        cfg["out"] = os.path.join(root, command)
    os.makedirs(cfg["out"], exist_ok=True)
    return cfg["out"]


def _write_manifest(out_dir, command, cfg):
    with open(os.path.join(out_dir, "manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"command": command, "config": cfg}, fh, indent=2,
                  sort_keys=True)
        fh.write("\n")


def _parse_ratios(text):
    parts = [float(x) for x in str(text).split(",")]
    if len(parts) != 3:
        raise ValueError(f"ratios must be three comma-separated numbers, "
                         f"got {text!r}")
    return tuple(parts)


def _load_split(cfg):
    if cfg["data"] is None:
        raise ValueError("no data directory: pass --data")
    data_dir = cfg["data"]
    dataset = load_dataset(os.path.join(data_dir, "interactions.tsv"),
                           os.path.join(data_dir, "features.tsv"))
    return chronological_split(dataset, _parse_ratios(cfg["ratios"]),
                               mode=cfg["split_mode"], seed=cfg["seed"])


def _cmd_generate(args):
    cfg = _resolve(_GENERATE_DEFAULTS, args)
    out = _resolve_out(cfg, "generate")
    synth_cfg = SynthConfig(**{k: cfg[k] for k in _GENERATE_DEFAULTS
                               if k not in ("out",)})
    result = generate(synth_cfg)
    ds = result.dataset
    write_interactions(os.path.join(out, "interactions.tsv"),
                       ds.users, ds.items, ds.timestamps)
    write_features(os.path.join(out, "features.tsv"), ds.features)
    with open(os.path.join(out, "provenance.json"), "w",
              encoding="utf-8") as fh:
        json.dump(result.provenance(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "generate", cfg)
    print(f"generated {len(ds.users)} interactions, {ds.num_items} items, "
          f"{ds.num_users} users -> {out}")
    return 0


def _cmd_cluster(args):
    cfg = _resolve(_CLUSTER_DEFAULTS, args)
    out = _resolve_out(cfg, "cluster")
    split = _load_split(cfg)
    index = build_group_period_index(
        split, cfg["num_groups"], cfg["num_periods"], cfg["p"],
        seed=cfg["seed"], max_iters=cfg["max_iters"], tol=cfg["tol"])
    groups_path = os.path.join(out, "groups.tsv")
    write_item_groups(groups_path, index)
    _write_manifest(out, "cluster", cfg)
    sizes = np.bincount(index.item_group[index.item_group >= 0],
                        minlength=cfg["num_groups"])
    print(f"clustered {int(sizes.sum())} warm items into "
          f"{cfg['num_groups']} groups (sizes {sizes.tolist()}) "
          f"-> {groups_path}")
    return 0


def _cmd_train(args):
    cfg = _resolve(_TRAIN_DEFAULTS, args)
    out = _resolve_out(cfg, "train")
    mode = {"dro": "group_dro"}.get(cfg["mode"], cfg["mode"])
    cfg["mode"] = mode
    split = _load_split(cfg)
    index = build_group_period_index(split, cfg["num_groups"],
                                     cfg["num_periods"], cfg["p"],
                                     seed=cfg["seed"])
    opt_cfg = TdroConfig(
        mode=mode, K=cfg["num_groups"], E=cfg["num_periods"],
        lam=cfg["lam"], p=cfg["p"], mu=cfg["mu"], eta_w=cfg["eta_w"],
        eta=cfg["eta"], normalize_gradients=cfg["normalize_gradients"],
        ema_decay=cfg["ema_decay"], drop_worst_case=cfg["drop_worst_case"],
        inner_extractor_only=cfg["inner_extractor_only"]).validate()
    model = init_model(split.data.num_users, split.data.num_items,
                       split.warm_items, split.data.d_feat,
                       d=cfg["dim"], h=cfg["hidden"], alpha=cfg["alpha"],
                       gamma=cfg["gamma"], seed=cfg["seed"])
    result = train(split, index, model, opt_cfg, epochs=cfg["epochs"],
                   batch_size=cfg["batch_size"], seed=cfg["seed"],
                   k_metric=cfg["k_metric"], patience=cfg["patience"],
                   warm_mode=cfg["warm_mode"])
    save_checkpoint(os.path.join(out, "model.ckpt"), result.model)
    save_checkpoint(os.path.join(out, "final.ckpt"), result.final_model)
    save_state(os.path.join(out, "state.npz"), result.state)
    result.log.to_csv(os.path.join(out, "train_log.csv"))
    _write_manifest(out, "train", cfg)
    print(f"trained mode={mode} for {len(result.log.rows)} epochs; best "
          f"epoch {result.best_epoch} "
          f"val recall@{cfg['k_metric']} {result.best_val_recall:.4f} "
          f"-> {out}")
    return 0


def _cmd_evaluate(args):
    cfg = _resolve(_EVALUATE_DEFAULTS, args)
    out = _resolve_out(cfg, "evaluate")
    if cfg["checkpoint"] is None:
        raise ValueError("no checkpoint: pass --checkpoint")
    split = _load_split(cfg)
    model = load_checkpoint(cfg["checkpoint"])
    if model.num_items != split.data.num_items:
        raise ValueError(
            f"checkpoint expects {model.num_items} items but the dataset "
            f"has {split.data.num_items}")
    if model.d_feat != split.data.d_feat:
        raise ValueError(
            f"checkpoint expects {model.d_feat}-dim features but the "
            f"dataset has {split.data.d_feat}-dim features")
    settings = tuple(s.strip() for s in cfg["settings"].split(","))
    bad = [s for s in settings if s not in SETTINGS]
    if bad:
        raise ValueError(f"unknown settings: {', '.join(bad)}")
    label = cfg["label"]
    if label is None:
        label = os.path.basename(os.path.dirname(
            os.path.abspath(cfg["checkpoint"]))) or "run"
        cfg["label"] = label
    report = build_report(model, split, label=label, part=cfg["part"],
                          k=cfg["k"], warm_mode=cfg["warm_mode"],
                          settings=settings,
                          shift_groups=cfg["user_shift_groups"],
                          pop_groups=cfg["item_pop_groups"])
    report.to_json(os.path.join(out, "report.json"))
    report.to_csv(os.path.join(out, "report.csv"))
    _write_manifest(out, "evaluate", cfg)
    for s in settings:
        agg = report.settings[s]
        print(f"{label} {s}: recall@{cfg['k']} {agg['recall']:.4f} "
              f"ndcg@{cfg['k']} {agg['ndcg']:.4f} "
              f"({agg['num_users']} users, {agg['skipped']} skipped)")
    return 0


def _improvement(value, base):
    if base == 0:
        return float("nan")
    return (value - base) / base


def _cmd_report(args):
    reports = []
    for run_dir in args.runs:
        path = os.path.join(run_dir, "report.json")
        if not os.path.isfile(path):
            raise ValueError(f"no report.json in {run_dir}; run evaluate first")
        reports.append(EvalReport.from_json(path))
    reports.sort(key=lambda r: r.label)
    labels = [r.label for r in reports]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate run labels: {labels}")

    baseline = args.baseline
    if baseline is None and "erm" in labels and len(labels) > 1:
        baseline = "erm"
    if baseline is not None and baseline not in labels:
        raise ValueError(f"baseline {baseline!r} not among runs {labels}")
    base = next((r for r in reports if r.label == baseline), None)

    settings = sorted(set.intersection(*(set(r.settings) for r in reports)))
    k = reports[0].k
    header = ["run"]
    for s in settings:
        header += [f"{s}_recall@{k}", f"{s}_ndcg@{k}"]
        if base is not None:
            header.append(f"{s}_recall_vs_{base.label}")
    rows = []
    for r in reports:
        row = [r.label]
        for s in settings:
            row.append(f"{r.settings[s]['recall']:.4f}")
            row.append(f"{r.settings[s]['ndcg']:.4f}")
            if base is not None:
                imp = _improvement(r.settings[s]["recall"],
                                   base.settings[s]["recall"])
                row.append(f"{imp:+.1%}" if np.isfinite(imp) else "n/a")
        rows.append(row)

    widths = [max(len(header[i]), *(len(row[i]) for row in rows))
              for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    for row in rows:
        lines.append("  ".join(v.ljust(w)
                               for v, w in zip(row, widths)).rstrip())
    table = "\n".join(lines)
    print(table)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(row) + "\n")
    return 0


def _add_bool(parser, name):
    parser.add_argument(name, action=argparse.BooleanOptionalAction,
                        default=None)


def _add_split_args(parser):
    parser.add_argument("--ratios", help="train,valid,test fractions")
    parser.add_argument("--split-mode", choices=("chronological", "random"))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tdro",
        description="Temporally robust group-weighted training for "
                    "cold-start recommendation.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic shifted dataset")
    g.add_argument("--config", help="JSON config or manifest file")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.add_argument("--num-users", type=int)
    g.add_argument("--num-items", type=int)
    g.add_argument("--num-concepts", type=int)
    g.add_argument("--d-feat", type=int)
    g.add_argument("--periods", type=int)
    g.add_argument("--interactions-per-period", type=int)
    g.add_argument("--drift", type=float)
    g.add_argument("--feature-noise", type=float)
    g.add_argument("--temperature", type=float)
    g.set_defaults(func=_cmd_generate)

    c = sub.add_parser("cluster", help="cluster warm items into groups")
    c.add_argument("--config")
    c.add_argument("--data", help="directory with interactions.tsv and "
                                  "features.tsv")
    c.add_argument("--out")
    c.add_argument("--seed", type=int)
    c.add_argument("--num-groups", type=int)
    c.add_argument("--num-periods", type=int)
    c.add_argument("--p", type=float)
    c.add_argument("--max-iters", type=int)
    c.add_argument("--tol", type=float)
    _add_split_args(c)
    c.set_defaults(func=_cmd_cluster)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--mode",
                   choices=("erm", "dro", "group_dro", "tdro", "sdro"))
    t.add_argument("--dim", type=int, help="embedding dimension")
    t.add_argument("--hidden", type=int, help="extractor hidden width")
    t.add_argument("--alpha", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--num-groups", type=int)
    t.add_argument("--num-periods", type=int)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--p", type=float)
    t.add_argument("--mu", type=float)
    t.add_argument("--eta-w", type=float)
    t.add_argument("--eta", type=float)
    _add_bool(t, "--normalize-gradients")
    t.add_argument("--ema-decay", type=float)
    _add_bool(t, "--drop-worst-case")
    _add_bool(t, "--inner-extractor-only")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--k-metric", type=int)
    t.add_argument("--warm-mode", choices=("hybrid", "cf_only"))
    _add_split_args(t)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("evaluate", help="rank and score one checkpoint")
    e.add_argument("--config")
    e.add_argument("--data")
    e.add_argument("--checkpoint")
    e.add_argument("--out")
    e.add_argument("--settings", help="comma list from all,warm,cold")
    e.add_argument("--k", type=int)
    e.add_argument("--part", choices=("valid", "test"))
    e.add_argument("--warm-mode", choices=("hybrid", "cf_only"))
    e.add_argument("--user-shift-groups", type=int)
    e.add_argument("--item-pop-groups", type=int)
    e.add_argument("--label")
    e.add_argument("--seed", type=int)
    _add_split_args(e)
    e.set_defaults(func=_cmd_evaluate)

    r = sub.add_parser("report", help="tabulate evaluation reports")
    r.add_argument("runs", nargs="+",
                   help="run directories containing report.json")
    r.add_argument("--baseline",
                   help="label to compute relative improvements against "
                        "(defaults to the run labelled 'erm' if present)")
    r.add_argument("--out", help="also write the table as CSV")
    r.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ParseError, IntegrityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
