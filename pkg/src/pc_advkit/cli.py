"""Command-line interface.

Subcommands mirror the pipeline stages: gen-data, train, attack,
learn-transform, transfer-eval, defend, adv-train, metrics, report.
Exit codes: 0 success, 1 invalid input or usage, 2 internal error.
"""

import argparse
import json
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness, io as cloud_io, metrics as metrics_mod
from .attack import AttackConfig, run_ita
from .defense import AdvTrainConfig, adversarial_train
from .errors import InvalidInputError
from .harness import (
    SyntheticDatasetSpec,
    apply_defense,
    config_from_json,
    generate_dataset,
    load_dataset,
    run_experiment,
    save_dataset,
)
from .nn import build_classifier, forward, load_checkpoint, save_checkpoint, train_classifier
from .transform import (
    ANALYTIC_KINDS,
    AdvLearnConfig,
    AnalyticEnsemble,
    adversarial_learn_T,
    load_transform,
    save_transform,
)


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise InvalidInputError(message)


def _read_cloud(path):
    path = str(path)
    if path.endswith(".ply"):
        return cloud_io.read_ply(path)
    return cloud_io.read_xyz(path)


def _write_cloud(path, cloud):
    path = str(path)
    if path.endswith(".xyz"):
        cloud_io.write_xyz(path, cloud)
    else:
        cloud_io.write_ply(path, cloud)


def _add_common(parser):
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", help="output file or directory")
    parser.add_argument("--jobs", type=int, default=1)


def build_parser():
    parser = _Parser(prog="pc-advkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[], help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--classes", help="comma-separated shape class names")
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--jitter", type=float, default=0.01)

    p = sub.add_parser("train", help="train a classifier on a dataset directory")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--arch", default="arch-A")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=16)

    p = sub.add_parser("attack", help="attack one cloud or dataset instance")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clean", help="clean cloud file (.xyz/.ply)")
    p.add_argument("--data", help="dataset directory (with --instance)")
    p.add_argument("--instance", type=int, help="test-set index into --data")
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--bound", type=float, default=0.02)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--lambda1", type=float, default=0.1)
    p.add_argument("--lambda2", type=float, default=1.0)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--transform", help="learned transform checkpoint to attack through")
    p.add_argument("--analytic-scope", choices=["cloud", "point"],
                   help="attack through a random analytic ensemble of this scope")
    p.add_argument("--analytic-kinds", default=",".join(ANALYTIC_KINDS),
                   help="comma-separated analytic kinds for the ensemble")

    p = sub.add_parser("learn-transform", help="learn the adversarial transform")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--working-set", type=int, default=24)
    p.add_argument("--l1", type=int, default=10)
    p.add_argument("--l2", type=int, default=500)
    p.add_argument("--l3", type=int, default=50)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--lambda3", type=float, default=10.0)
    p.add_argument("--lr-t", type=float, default=0.001)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--bound", type=float, default=0.02)
    p.add_argument("--iterations", type=int, default=500)

    p = sub.add_parser("transfer-eval", help="evaluate saved adversarial clouds on victims")
    _add_common(p)
    p.add_argument("--victim-ckpt", action="append", required=True)
    p.add_argument("--adv", required=True, help="directory of adversarial .ply/.xyz clouds")
    p.add_argument("--target-from-name", action="store_true",
                   help="parse the target class from the _t<N> filename suffix")

    p = sub.add_parser("defend", help="apply an input defense to a cloud file")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--defense", required=True, choices=["srs", "sor", "noise"])
    p.add_argument("--keep", type=float, default=0.875)
    p.add_argument("--sor-k", type=int, default=2)
    p.add_argument("--std-mult", type=float, default=1.1)
    p.add_argument("--sigma-frac", type=float, default=0.01)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--ckpt", help="optionally classify the defended cloud")

    p = sub.add_parser("adv-train", help="adversarially train a classifier")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--arch", default="arch-B")
    p.add_argument("--mode", choices=["vanilla", "constraint"], default="constraint")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--j", type=int, default=2)
    p.add_argument("--inter-targets", type=int, default=1)
    p.add_argument("--inner-bound", type=float, default=0.02)
    p.add_argument("--inner-iterations", type=int, default=50)
    p.add_argument("--omega5", type=float, default=0.1)
    p.add_argument("--omega6", type=float, default=0.1)

    p = sub.add_parser("metrics", help="metric CSV row between two cloud files")
    _add_common(p)
    p.add_argument("--clean", required=True)
    p.add_argument("--adv", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--instance-id", default="pair0")

    p = sub.add_parser("report", help="run a full experiment config end to end")
    _add_common(p)

    return parser


def _cmd_gen_data(args):
    if args.config:
        cfg = config_from_json(args.config)
        spec = cfg.dataset
        if args.seed:
            spec = replace(spec, seed=args.seed)
        out = args.out or str(Path(cfg.out_dir) / "dataset")
    else:
        classes = tuple(args.classes.split(",")) if args.classes else None
        spec = SyntheticDatasetSpec(
            classes=classes or SyntheticDatasetSpec.classes,
            points_per_cloud=args.points,
            instances_per_class=args.per_class,
            jitter_sigma=args.jitter,
            seed=args.seed,
        )
        out = args.out
    if not out:
        raise InvalidInputError("gen-data needs --out (or a config with out_dir)")
    dataset = generate_dataset(spec)
    save_dataset(dataset, out)
    print(f"wrote {len(dataset.train)} train / {len(dataset.test)} test clouds to {out}")
    return 0


def _cmd_train(args):
    if not args.out:
        raise InvalidInputError("train needs --out for the checkpoint")
    dataset = load_dataset(args.data)
    model = build_classifier(args.arch, len(dataset.classes), args.seed)
    model, history = train_classifier(
        model,
        dataset.train,
        args.epochs,
        args.seed,
        test_set=dataset.test,
        lr=args.lr,
        batch_size=args.batch_size,
    )
    save_checkpoint(args.out, model, args.seed)
    last = history[-1] if history else {}
    print(
        f"saved {args.arch} to {args.out}"
        + (
            f" (train acc {last.get('train_accuracy', 0):.3f},"
            f" test acc {last.get('test_accuracy', 0):.3f})"
            if last
            else ""
        )
    )
    return 0


def _load_attack_inputs(args):
    model, _ = load_checkpoint(args.ckpt)
    if args.clean:
        clean = _read_cloud(args.clean)
        name = Path(args.clean).stem
    elif args.data is not None and args.instance is not None:
        dataset = load_dataset(args.data)
        if not 0 <= args.instance < len(dataset.test):
            raise InvalidInputError(f"--instance {args.instance} out of range")
        clean = dataset.test[args.instance]
        name = f"test{args.instance:04d}"
    else:
        raise InvalidInputError("attack needs --clean or (--data and --instance)")
    return model, clean, name


def _cmd_attack(args):
    model, clean, name = _load_attack_inputs(args)
    transform = None
    if args.transform and args.analytic_scope:
        raise InvalidInputError("--transform and --analytic-scope are mutually exclusive")
    if args.transform:
        transform, _ = load_transform(args.transform)
    elif args.analytic_scope:
        kinds = tuple(k for k in args.analytic_kinds.split(",") if k)
        transform = AnalyticEnsemble(scope=args.analytic_scope, kinds=kinds, seed=args.seed)
    cfg = AttackConfig(
        target_class=args.target,
        bound_B=args.bound,
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        iterations=args.iterations,
        lr=args.lr,
        k_neighbors=args.k,
        transform=transform,
    )
    result = run_ita(model, clean, cfg, seed=args.seed)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    instance_id = f"{name}_t{args.target}"
    _write_cloud(out / f"{instance_id}.ply", result.adversarial)
    (out / f"{instance_id}.csv").write_text(
        metrics_mod.METRIC_CSV_HEADER + "\n" + result.metrics.csv_row(instance_id) + "\n"
    )
    record = {
        "instance_id": instance_id,
        "target_class": args.target,
        "success": result.success,
        "iterations_used": result.iterations_used,
        "losses": result.final_losses,
    }
    (out / f"{instance_id}.json").write_text(json.dumps(record, sort_keys=True, indent=1) + "\n")
    print(f"success={result.success} iterations_used={result.iterations_used} -> {out}")
    return 0


def _cmd_learn_transform(args):
    if not args.out:
        raise InvalidInputError("learn-transform needs --out for the checkpoint")
    model, _ = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    working = [c for c in dataset.train if harness._predicts(model, c)][: args.working_set]
    cfg = AdvLearnConfig(
        l1_rounds=args.l1,
        l2_delta_steps=args.l2,
        l3_t_steps=args.l3,
        beta=args.beta,
        lambda3=args.lambda3,
        lr_t=args.lr_t,
        hidden=args.hidden,
    )
    attack_cfg = AttackConfig(
        target_class=0, bound_B=args.bound, iterations=args.iterations
    )
    t_model = adversarial_learn_T(model, working, cfg, attack_cfg, seed=args.seed)
    save_transform(args.out, t_model, args.seed)
    print(f"saved transform to {args.out}")
    return 0


def _cmd_transfer_eval(args):
    adv_dir = Path(args.adv)
    files = sorted(list(adv_dir.glob("*.ply")) + list(adv_dir.glob("*.xyz")))
    if not files:
        raise InvalidInputError(f"no .ply/.xyz clouds under {adv_dir}")
    victims = {}
    for path in args.victim_ckpt:
        model, header = load_checkpoint(path)
        victims[Path(path).stem] = model
    lines = ["cloud,target_class," + ",".join(sorted(victims))]
    hits = {name: 0 for name in victims}
    counted = 0
    for path in files:
        cloud = _read_cloud(path)
        target = None
        if args.target_from_name and "_t" in path.stem:
            try:
                target = int(path.stem.rsplit("_t", 1)[1])
            except ValueError:
                raise InvalidInputError(f"cannot parse target from {path.name}") from None
        cells = [path.name, "" if target is None else str(target)]
        for name in sorted(victims):
            logits, _ = forward(victims[name], cloud)
            pred = int(np.argmax(logits))
            hit = target is not None and pred == target
            hits[name] += int(hit)
            cells.append(str(pred) if target is None else str(int(hit)))
        counted += 1
        lines.append(",".join(cells))
    if args.target_from_name and counted:
        lines.append(
            "rate," + "," + ",".join(format(hits[n] / counted, ".9g") for n in sorted(victims))
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


def _cmd_defend(args):
    cloud = _read_cloud(args.input)
    entry = {
        "kind": args.defense,
        "keep": args.keep,
        "k": args.sor_k if args.defense == "sor" else args.k,
        "std_mult": args.std_mult,
        "sigma_frac": args.sigma_frac,
    }
    defended = apply_defense(entry, cloud, seed=args.seed)
    if args.out:
        _write_cloud(args.out, defended)
        print(f"wrote {args.out} ({defended.n} points)")
    if args.ckpt:
        model, _ = load_checkpoint(args.ckpt)
        logits, _ = forward(model, defended)
        print(f"prediction={int(np.argmax(logits))}")
    if not args.out and not args.ckpt:
        raise InvalidInputError("defend needs --out and/or --ckpt")
    return 0


def _cmd_adv_train(args):
    if not args.out:
        raise InvalidInputError("adv-train needs --out for the checkpoint")
    dataset = load_dataset(args.data)
    model = build_classifier(args.arch, len(dataset.classes), args.seed)
    inner = AttackConfig(
        target_class=0, bound_B=args.inner_bound, iterations=args.inner_iterations
    )
    cfg = AdvTrainConfig(
        omega5=args.omega5 if args.mode == "constraint" else 0.0,
        omega6=args.omega6 if args.mode == "constraint" else 0.0,
        J=args.j,
        inner_attack=inner,
        inter_targets=args.inter_targets,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
    )
    hardened = adversarial_train(model, dataset.train, cfg)
    save_checkpoint(args.out, hardened, args.seed, extra={"mode": args.mode})
    print(f"saved {args.mode} adversarially trained {args.arch} to {args.out}")
    return 0


def _cmd_metrics(args):
    clean = _read_cloud(args.clean)
    adv = _read_cloud(args.adv)
    report = metrics_mod.full_report(adv, clean, args.k)
    text = metrics_mod.METRIC_CSV_HEADER + "\n" + report.csv_row(args.instance_id) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


def _cmd_report(args):
    if not args.config:
        raise InvalidInputError("report needs --config")
    cfg = config_from_json(args.config)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.jobs != 1:
        cfg = replace(cfg, jobs=args.jobs)
    report = run_experiment(cfg)
    for tag, acc in sorted(report.accuracies.items()):
        print(f"clean accuracy {tag}: {acc:.3f}")
    for variant, agg in sorted(report.aggregates.items()):
        rate = agg.get("whitebox_rate")
        print(f"{variant}: n={agg['n_instances']} whitebox_rate={rate:.3f}")
    print(f"reports written under {cfg.out_dir}")
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "attack": _cmd_attack,
    "learn-transform": _cmd_learn_transform,
    "transfer-eval": _cmd_transfer_eval,
    "defend": _cmd_defend,
    "adv-train": _cmd_adv_train,
    "metrics": _cmd_metrics,
    "report": _cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            return 1
        return _HANDLERS[args.command](args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # internal failure
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
