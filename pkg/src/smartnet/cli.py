"""``smartnet`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from smartnet import accounting
from smartnet.attacks import AttackConfig
from smartnet.checkpoint import load_checkpoint, save_checkpoint, save_masks
from smartnet.config import RunConfig, load_config, parse_overrides
from smartnet.data import Dataset, load_dataset
from smartnet.errors import (
    CheckpointVersionError,
    ConfigError,
    DataError,
    InfeasiblePlanError,
    InvalidPlanError,
    NumericError,
    ParseError,
)
from smartnet.masks import MaskPlan
from smartnet.model import ResNet, desk_resnet
from smartnet.sensitivity import SensitivityConfig, sensitivity_run
from smartnet.training import TrainConfig, evaluate, pgd_at_train, smart_train

log = logging.getLogger("smartnet")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5


# ---------------------------------------------------------------- builders


def attack_config(cfg: RunConfig) -> AttackConfig:
    try:
        return AttackConfig(
            epsilon=cfg["attack.epsilon"],
            steps=cfg["attack.steps"],
            attack_step=cfg["attack.step_size"],
            random_start=cfg["attack.random_start"],
            kind=cfg["attack.kind"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"],
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        seed=cfg["seed"],
        attack=attack_config(cfg),
        augment=cfg["data.augment"],
        eval_samples=cfg["train.eval_samples"],
    )


def datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    train, test = load_dataset(
        cfg["data.kind"],
        cfg["data.train_images"], cfg["data.train_labels"],
        cfg["data.test_images"], cfg["data.test_labels"],
        cfg["data.cifar_train"], cfg["data.cifar_test"],
        subset=cfg["data.subset"], seed=cfg["seed"],
    )
    if cfg["data.test_samples"]:
        test = test.head(cfg["data.test_samples"])
    return train, test


def build_model(cfg: RunConfig, train: Dataset) -> ResNet:
    _, c, h, w = train.images.shape
    conditional = cfg["train.method"] == "smart"
    mask_seed = cfg["masks.seed"] if cfg["masks.seed"] is not None else cfg["seed"]
    return desk_resnet(
        conditional=conditional,
        pattern=cfg["masks.pattern"],
        c_clean=cfg["masks.c_clean"],
        c_adv=cfg["masks.c_adv"],
        c_shared=cfg["masks.c_shared"],
        widths=cfg["model.widths"],
        in_channels=c,
        num_classes=train.num_classes,
        input_hw=(h, w),
        seed=cfg["seed"],
        mask_seed=mask_seed,
        dtype=np.dtype(cfg["model.dtype"]),
    )


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.yaml").write_text(cfg.to_yaml())
    return out


def format_table(rows: list[dict], columns: Sequence[str]) -> str:
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.2f}"
        return str(v)

    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def write_kv(path: Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig, args) -> int:
    out = _outdir(cfg)
    train, test = datasets(cfg)
    model = build_model(cfg, train)
    tcfg = train_config(cfg)
    history_path = out / "history.jsonl"
    history_path.unlink(missing_ok=True)
    every = max(1, cfg["train.checkpoint_every"])

    def on_epoch(epoch, m):
        if (epoch + 1) % every == 0:
            save_checkpoint(out / f"checkpoint-epoch{epoch + 1}.smrt", m, epoch + 1)

    if cfg["train.method"] == "smart":
        model, _ = smart_train(model, train, tcfg, heldout=test, history_path=history_path, on_epoch=on_epoch)
    else:
        model, _ = pgd_at_train(model, train, tcfg, cfg["train.lambda_fixed"], heldout=test,
                                history_path=history_path)
    save_checkpoint(out / "checkpoint.smrt", model, tcfg.epochs, {"config": cfg.as_dict()})
    (out / "parameter_hash.txt").write_text(model.parameter_hash() + "\n")
    print(f"wrote {out / 'checkpoint.smrt'}")
    return EXIT_OK


def _sweep(model: ResNet, test: Dataset, cfg: RunConfig, attack: AttackConfig) -> list[dict]:
    lambdas = cfg["eval.lambdas"] if model.conditional else [0.0]
    return [
        evaluate(model, test, lam, attack, seed=cfg["eval.seed"], batch_size=cfg["eval.batch_size"])
        for lam in lambdas
    ]


def cmd_eval(cfg: RunConfig, args) -> int:
    out = _outdir(cfg)
    _, test = datasets(cfg)
    model, _ = load_checkpoint(args.checkpoint)
    rows = _sweep(model, test, cfg, attack_config(cfg))
    text = format_table(rows, ["lambda", "CA", "RA"])
    (out / "eval.txt").write_text(text)
    write_kv(out / "eval.jsonl", rows)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_attack(cfg: RunConfig, args) -> int:
    out = _outdir(cfg)
    _, test = datasets(cfg)
    model, _ = load_checkpoint(args.checkpoint)
    attack = attack_config(cfg)
    rows = []
    for r in _sweep(model, test, cfg, attack):
        rows.append({"attack": attack.kind, "epsilon": attack.epsilon, "lambda": r["lambda"],
                     "CA": r["CA"], "RA": r["RA"]})
    text = format_table(rows, ["attack", "epsilon", "lambda", "CA", "RA"])
    (out / f"attack-{attack.kind}.txt").write_text(text)
    write_kv(out / f"attack-{attack.kind}.jsonl", rows)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sensitivity(cfg: RunConfig, args) -> int:
    out = _outdir(cfg)
    train, _ = datasets(cfg)
    _, c, h, w = train.images.shape

    def make_model(seed):
        return desk_resnet(conditional=False, widths=cfg["model.widths"], in_channels=c,
                           num_classes=train.num_classes, input_hw=(h, w), seed=seed)

    rows = []
    for seed in cfg["sensitivity.seeds"]:
        scfg = SensitivityConfig(epochs=cfg["sensitivity.epochs"], batch_size=cfg["train.batch_size"],
                                 lr=cfg["train.lr"], seed=seed)
        for d in cfg["sensitivity.densities"]:
            table = sensitivity_run(train, d, scfg, make_model)
            rows += table.rows()
            log.info("d=%s seed=%s spearman=%.3f", d, seed, table.spearman)
    text = format_table(rows, ["density", "seed", "depth", "layer", "params", "utility"])
    (out / "sensitivity.txt").write_text(text)
    write_kv(out / "sensitivity.jsonl", rows)
    sys.stdout.write(text)
    return EXIT_OK


def _account_arch(cfg: RunConfig) -> accounting.ArchSpec:
    if cfg["account.arch"] == "resnet34":
        return accounting.resnet34_cifar()
    return accounting.desk_arch(cfg["model.widths"])


def cmd_account(cfg: RunConfig, args) -> int:
    out = _outdir(cfg)
    arch = _account_arch(cfg)
    seed = cfg["masks.seed"] if cfg["masks.seed"] is not None else cfg["seed"]
    plan = arch.plan(cfg["masks.pattern"], cfg["masks.c_clean"], cfg["masks.c_adv"], cfg["masks.c_shared"], seed)
    report = accounting.cost_report(arch, plan)
    costs = {k: cfg[f"account.{k}"] for k in ("mac_cost", "add_cost", "shift_add_cost")}
    if costs["mac_cost"] is not None or costs["add_cost"] is not None:
        if costs["shift_add_cost"] is None:
            costs["shift_add_cost"] = costs["add_cost"]
        accounting.energy_estimate(report, costs)
    text = report.to_text() + "\n"
    (out / "account.txt").write_text(text)
    write_kv(out / "account.jsonl", [{"key": k, "value": v} for k, v in report.records()])
    sys.stdout.write(text)
    return EXIT_OK


def cmd_masks(cfg: RunConfig, args) -> int:
    out = _outdir(cfg)
    train, _ = datasets(cfg)
    model = build_model(RunConfig({**cfg.as_dict(), "train.method": "smart"}), train)
    save_masks(out / "masks.smrt", model.masks(), {"plan": model.plan.to_dict()})
    rows = []
    from smartnet.masks import density, intersection_density

    for name, mc, ma in model.masks():
        rows.append({"layer": name, "size": mc.size, "C(M_C)": density(mc), "C(M_A)": density(ma),
                     "C(M_i)": intersection_density(mc, ma)})
    text = format_table(rows, ["layer", "size", "C(M_C)", "C(M_A)", "C(M_i)"])
    (out / "masks.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "sensitivity": cmd_sensitivity,
    "account": cmd_account,
    "masks": cmd_masks,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smartnet", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat YAML file with dotted keys")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--checkpoint", help="checkpoint file for eval/attack")
    parser.add_argument("--out", help="output directory (output.dir)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--eps", type=float, help="attack.epsilon")
    parser.add_argument("--steps", type=int, help="attack.steps")
    parser.add_argument("--step-size", type=float, help="attack.step_size")
    parser.add_argument("--attack", choices=["pgd", "fgsm"], help="attack.kind")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(args.overrides)
        flags = {"output.dir": args.out, "seed": args.seed, "attack.epsilon": args.eps,
                 "attack.steps": args.steps, "attack.step_size": args.step_size, "attack.kind": args.attack}
        overrides.update({k: v for k, v in flags.items() if v is not None})
        cfg = load_config(args.config, overrides)
        if args.command in ("eval", "attack") and not args.checkpoint:
            raise ConfigError(f"{args.command} needs --checkpoint")
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, InvalidPlanError, InfeasiblePlanError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointVersionError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataError, ParseError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
