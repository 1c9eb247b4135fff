"""Command-line experiment orchestration.

Commands: synth, pretrain, eval, ablate, plot. Every command writes its
fully resolved configuration into the output directory before computing,
so a run directory is self-contained. Config files are YAML; command-line
flags override file values.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import yaml

from .contrastive import TrainConfig, pretrain
from .data import (
    SynthSpec,
    load_dataset_cache,
    save_dataset_cache,
    synth_generate,
)
from .encoder import EncoderConfig, load_checkpoint
from .errors import ConfigError, ParseError, SkelclError
from .evaluate import (
    DEFAULT_FUSION_WEIGHTS,
    FinetuneConfig,
    ProbeConfig,
    ensemble_fuse,
    extract_features,
    knn_eval,
    linear_eval,
    semi_supervised_eval,
    supervised_eval,
)

TRAIN_FIELDS = ("temperature", "momentum", "lambda_hier", "queue_size",
                "arrangement", "sim_function", "epochs", "batch_size",
                "learning_rate", "lr_schedule", "sgd_momentum", "weight_decay",
                "stream", "target_frames", "aug_overrides")
ENCODER_FIELDS = ("block_channels", "temporal_strides", "temporal_kernel",
                  "embed_dim")

ABLATION_PRESETS = {
    "arrangements": [
        {"name": "ba_na_mask", "arrangement": ["BA", "NA", "Mask"]},
        {"name": "na_ba_mask", "arrangement": ["NA", "BA", "Mask"]},
        {"name": "mask_ba_na", "arrangement": ["Mask", "BA", "NA"]},
        {"name": "bana_mask", "arrangement": ["BA+NA", "Mask"]},
        {"name": "ba_namask", "arrangement": ["BA", "NA+Mask"]},
    ],
    "sims": [
        {"name": "sim_cosine", "sim_function": "cosine"},
        {"name": "sim_l1", "sim_function": "l1"},
        {"name": "sim_kl", "sim_function": "kl"},
    ],
}


def _write_yaml(payload: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(payload, f, sort_keys=True)


def _load_yaml(path) -> dict:
    with open(path) as f:
        loaded = yaml.safe_load(f)
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return loaded


def _load_split(data_dir: Path, split: str):
    path = data_dir / f"{split}.skc"
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    dataset, _ = load_dataset_cache(path)
    return dataset


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SynthSpec(class_count=args.classes, sequences_per_class=args.per_class,
                     num_joints=args.joints, raw_frames=args.frames,
                     noise_scale=args.noise)
    resolved = {"command": "synth", "seed": args.seed,
                "test_per_class": args.test_per_class, **asdict(spec)}
    _write_yaml(resolved, out / "synth_config.yaml")

    train = synth_generate(spec, args.seed, split="train")
    save_dataset_cache(train, out / "train.skc", seed=args.seed)
    test_spec = SynthSpec(**{**asdict(spec), "sequences_per_class": args.test_per_class})
    test = synth_generate(test_spec, args.seed, split="test")
    save_dataset_cache(test, out / "test.skc", seed=args.seed)
    print(f"wrote {len(train)} train / {len(test)} test sequences to {out}")
    return 0


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def _resolve_train_config(args) -> tuple[TrainConfig, EncoderConfig | None, dict]:
    file_cfg = _load_yaml(args.config) if args.config else {}
    merged = {k: v for k, v in file_cfg.items() if k in TRAIN_FIELDS}

    overrides = {
        "arrangement": tuple(args.arrangement) if args.arrangement else None,
        "lambda_hier": args.lambda_h,
        "sim_function": args.sim,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "queue_size": args.queue_size,
        "temperature": args.temperature,
        "momentum": args.momentum,
        "learning_rate": args.lr,
        "stream": args.stream,
        "target_frames": args.frames,
    }
    merged.update({k: v for k, v in overrides.items() if v is not None})
    if "arrangement" in merged:
        merged["arrangement"] = tuple(merged["arrangement"])
    train_cfg = TrainConfig(**merged)

    enc_cfg = None
    enc_file = {k: v for k, v in file_cfg.items() if k in ENCODER_FIELDS}
    if args.encoder_channels:
        enc_file["block_channels"] = tuple(args.encoder_channels)
        enc_file.setdefault("temporal_strides",
                            (1,) + (2,) * (len(args.encoder_channels) - 1))
    if args.embed_dim is not None:
        enc_file["embed_dim"] = args.embed_dim
    if enc_file:
        enc_file["block_channels"] = tuple(enc_file.get("block_channels", (16, 32, 64)))
        enc_file["temporal_strides"] = tuple(
            enc_file.get("temporal_strides",
                         (1,) + (2,) * (len(enc_file["block_channels"]) - 1)))
        enc_cfg = enc_file  # joints/persons resolved after the data loads
    return train_cfg, enc_cfg, file_cfg


def _run_pretrain(data_dir: Path, out: Path, train_cfg: TrainConfig,
                  enc_fields: dict | None, seed: int,
                  checkpoint_every: int | None) -> dict:
    train_set = _load_split(data_dir, "train")
    sample = train_set.sequences[0]
    enc_fields = dict(enc_fields or {})
    enc_fields.setdefault("num_joints", sample.num_joints)
    enc_fields.setdefault("num_persons", sample.num_persons)
    encoder_config = EncoderConfig(**enc_fields)

    out.mkdir(parents=True, exist_ok=True)
    variant = ("skeletonclr" if train_cfg.branch_count == 1
               and train_cfg.lambda_hier == 0 else "hierarchical")
    resolved = {"command": "pretrain", "data": str(data_dir), "seed": seed,
                "variant": variant, "train": asdict(train_cfg),
                "encoder": asdict(encoder_config)}
    _write_yaml(resolved, out / "config.yaml")

    log_path = out / "log.jsonl"
    with open(log_path, "w") as log_file:
        log_file.write(json.dumps({"event": "meta", "variant": variant,
                                   "seed": seed}) + "\n")

        def hook(record):
            log_file.write(json.dumps(record) + "\n")

        result = pretrain(train_set, train_cfg, seed, encoder_config=encoder_config,
                          out_dir=str(out), checkpoint_every=checkpoint_every,
                          log_hook=hook)
    final = result.log[-1] if result.log else {}
    print(f"pretrained {train_cfg.epochs} epochs ({len(result.log)} steps), "
          f"final total loss {final.get('total', float('nan')):.4f}; "
          f"checkpoint at {out / 'checkpoint.pt'}")
    return resolved


def cmd_pretrain(args) -> int:
    train_cfg, enc_fields, _ = _resolve_train_config(args)
    _run_pretrain(Path(args.data), Path(args.out), train_cfg, enc_fields,
                  args.seed, args.checkpoint_every)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = Path(args.data)
    payload = load_checkpoint(args.checkpoint)
    state = payload["state"]
    train_set = _load_split(data_dir, "train")
    test_set = _load_split(data_dir, "test")

    if args.fuse and len(args.streams) < 2:
        raise ConfigError("--fuse needs at least two streams")

    resolved = {"command": "eval", "checkpoint": str(args.checkpoint),
                "data": str(data_dir), "protocol": args.protocol,
                "streams": list(args.streams), "fuse": args.fuse,
                "k_neighbors": args.k, "fraction": args.fraction,
                "seed": args.seed, "target_frames": args.frames}
    _write_yaml(resolved, out / "eval_config.yaml")

    reports = []
    for stream in args.streams:
        if args.protocol == "knn":
            train_bank = extract_features(state, train_set, stream, args.frames)
            test_bank = extract_features(state, test_set, stream, args.frames)
            report = knn_eval(train_bank, test_bank, k_neighbors=args.k)
        elif args.protocol == "linear":
            report = linear_eval(state, train_set, test_set, ProbeConfig(),
                                 stream=stream, target_frames=args.frames,
                                 seed=args.seed)
        elif args.protocol == "semi":
            report = semi_supervised_eval(state, train_set, args.fraction, test_set,
                                          FinetuneConfig(), stream=stream,
                                          target_frames=args.frames, seed=args.seed)
        elif args.protocol == "finetune":
            report = supervised_eval(state, train_set, test_set, FinetuneConfig(),
                                     stream=stream, target_frames=args.frames,
                                     seed=args.seed)
        else:
            raise ConfigError(f"unknown protocol {args.protocol!r}")
        report.config["stream"] = stream
        path = out / f"report_{args.protocol}_{stream}.json"
        report.save(path)
        print(f"{args.protocol}/{stream}: top-1 {report.top1_accuracy:.4f} -> {path}")
        reports.append(report)

    if args.fuse:
        weights = [DEFAULT_FUSION_WEIGHTS.get(s, 1.0) for s in args.streams]
        fused = ensemble_fuse(reports, weights)
        path = out / f"report_{args.protocol}_fused.json"
        fused.save(path)
        print(f"{args.protocol}/fused{args.streams}: top-1 "
              f"{fused.top1_accuracy:.4f} -> {path}")
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def cmd_ablate(args) -> int:
    matrix = _load_yaml(args.config) if args.config else {}
    if args.preset:
        matrix.setdefault("runs", ABLATION_PRESETS[args.preset])
    runs = matrix.get("runs", [])
    if not runs:
        raise ConfigError("ablation matrix is empty: provide runs or --preset")
    names = [run.get("name") for run in runs]
    if len(set(names)) != len(names) or None in names:
        raise ConfigError(f"ablation run names must be unique and present, got {names}")

    data_dir = Path(args.data or matrix.get("data", ""))
    if not data_dir or not data_dir.exists():
        raise ConfigError(f"dataset directory not found: {data_dir!r}")
    seed = args.seed if args.seed is not None else int(matrix.get("seed", 0))
    base = dict(matrix.get("base", {}))
    enc_fields = {k: v for k, v in base.items() if k in ENCODER_FIELDS}
    base = {k: v for k, v in base.items() if k in TRAIN_FIELDS}
    if "block_channels" in enc_fields:
        enc_fields["block_channels"] = tuple(enc_fields["block_channels"])
        enc_fields.setdefault("temporal_strides",
                              (1,) + (2,) * (len(enc_fields["block_channels"]) - 1))
        enc_fields["temporal_strides"] = tuple(enc_fields["temporal_strides"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_yaml({"command": "ablate", "data": str(data_dir), "seed": seed,
                 "base": base, "runs": runs}, out / "ablate_config.yaml")

    rows = []
    for run in runs:
        name = run["name"]
        fields = {**base, **{k: v for k, v in run.items() if k != "name"}}
        if "arrangement" in fields:
            fields["arrangement"] = tuple(fields["arrangement"])
        cfg = TrainConfig(**fields)
        run_dir = out / name
        _run_pretrain(data_dir, run_dir, cfg, enc_fields, seed, None)
        payload = load_checkpoint(run_dir / "checkpoint.pt")
        state = payload["state"]
        train_set = _load_split(data_dir, "train")
        test_set = _load_split(data_dir, "test")
        train_bank = extract_features(state, train_set, cfg.stream, cfg.target_frames)
        test_bank = extract_features(state, test_set, cfg.stream, cfg.target_frames)
        report = knn_eval(train_bank, test_bank, k_neighbors=args.k)
        report.save(run_dir / "report_knn.json")
        rows.append({"name": name, "arrangement": list(cfg.arrangement),
                     "sim": cfg.sim_function, "lambda_hier": cfg.lambda_hier,
                     "knn_top1": report.top1_accuracy})

    table_path = out / "summary.tsv"
    with open(table_path, "w") as f:
        f.write("name\tarrangement\tsim\tlambda_hier\tknn_top1\n")
        for row in rows:
            f.write(f"{row['name']}\t{'+'.join(row['arrangement'])}\t{row['sim']}"
                    f"\t{row['lambda_hier']}\t{row['knn_top1']:.4f}\n")
    _plot_ablation(rows, out)
    for row in rows:
        print(f"{row['name']:>16}: knn top-1 {row['knn_top1']:.4f}")
    print(f"summary -> {table_path}")
    return 0


def _plot_ablation(rows, out: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(11, 4))
    names = [r["name"] for r in rows]
    ax_acc.bar(names, [r["knn_top1"] for r in rows], color="steelblue")
    ax_acc.set_ylabel("knn top-1 accuracy")
    ax_acc.set_ylim(0, 1)
    ax_acc.tick_params(axis="x", rotation=30)

    for row in rows:
        log = read_log(out / row["name"] / "log.jsonl")
        steps = [r["step"] for r in log]
        ax_loss.plot(steps, [r["total"] for r in log], label=row["name"])
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("total loss")
    ax_loss.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "ablation.png", dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------

def read_log(path) -> list[dict]:
    records = []
    with open(path) as f:
        for line in f:
            record = json.loads(line)
            if record.get("event") != "meta":
                records.append(record)
    return records


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(args.run)
    log = read_log(run_dir / "log.jsonl")
    if not log:
        raise ConfigError(f"no step records in {run_dir / 'log.jsonl'}")
    steps = [r["step"] for r in log]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r["total"] for r in log], label="total")
    ax.plot(steps, [r["info_nce"] for r in log], label="contrastive")
    ax.plot(steps, [r["hierarchical"] for r in log], label="consistency")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    out = Path(args.out) if args.out else run_dir / "loss.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(f"plot -> {out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skelcl",
        description="Self-supervised skeleton contrastive learning experiments.",
        epilog="exit codes: 0 ok, 2 config error, 3 data parse error, 1 other")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset cache")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--test-per-class", type=int, default=25)
    p.add_argument("--joints", type=int, default=11, choices=(11, 25))
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="contrastive pretraining")
    p.add_argument("--data", required=True, help="dataset directory with train.skc")
    p.add_argument("--config", help="YAML config; flags override file values")
    p.add_argument("--arrangement", nargs="+", metavar="GROUP",
                   help="augmentation groups, e.g. BA NA Mask")
    p.add_argument("--lambda-h", type=float, dest="lambda_h")
    p.add_argument("--sim", choices=("kl", "cosine", "l1"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--queue-size", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--stream", choices=("joint", "bone", "motion"))
    p.add_argument("--frames", type=int)
    p.add_argument("--encoder-channels", type=int, nargs="+")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--checkpoint-every", type=int, help="epochs between checkpoints")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", required=True,
                   choices=("knn", "linear", "semi", "finetune"))
    p.add_argument("--streams", nargs="+", default=["joint"],
                   choices=("joint", "bone", "motion"))
    p.add_argument("--fuse", action="store_true")
    p.add_argument("--k", type=int, default=20, help="knn neighbors")
    p.add_argument("--fraction", type=float, default=0.1,
                   help="labeled fraction for the semi protocol")
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a config matrix and tabulate results")
    p.add_argument("--config", help="YAML matrix: data, seed, base, runs")
    p.add_argument("--preset", choices=tuple(ABLATION_PRESETS))
    p.add_argument("--data", help="dataset directory (overrides matrix)")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="plot loss curves from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except ParseError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except (SkelclError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
