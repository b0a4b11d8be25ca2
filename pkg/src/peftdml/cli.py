"""Command-line entry point: data generation, pretraining, training, evaluation, sweeps, reports."""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

from . import report
from .config import RunConfig, load_config_file, to_jsonable
from .errors import ManifestError, PeftDmlError
from .evaluate import eval_dropout, eval_standard, eval_weather, eval_zero_shot
from .params import ParameterSet
from .peft import trainability_report
from .train import Checkpoint, pretrain_backbones, train
from .world import build_dataset, read_manifest

DEFAULT_OUT = "peftdml_out"
PROTOCOLS = ("standard", "dropout", "weather", "zeroshot")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="peftdml", description="Multi-modal PEFT detection on a synthetic world.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (partial configs are merged onto defaults)")
    common.add_argument("--seed", type=int, help="global seed; overrides the config file")
    common.add_argument("--out", help=f"output directory (else $PEFTDML_OUT, else ./{DEFAULT_OUT})")
    sub.add_parser("gen-data", parents=[common], help="generate train/val/test manifests")
    sub.add_parser("pretrain", parents=[common], help="pretrain and freeze the modality backbones")
    p = sub.add_parser("train", parents=[common], help="joint PEFT training")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    p = sub.add_parser("eval", parents=[common], help="run an evaluation protocol")
    p.add_argument("--protocol", required=True, choices=PROTOCOLS)
    p = sub.add_parser("sweep", parents=[common], help="train and score one model per LoRA rank")
    p.add_argument("--ranks", required=True, help="comma-separated ranks, e.g. 4,8,16")
    p.add_argument("--max-steps", type=int, help="stop each run after this many optimizer steps")
    p = sub.add_parser("report", parents=[common], help="write the summary table and digest manifest")
    p.add_argument("--verify", action="store_true", help="re-hash existing artifacts instead of writing")
    return parser


# ------------------------------------------------------------------ run layout


class Run:
    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out

    @property
    def data_dir(self) -> Path:
        return self.out / "data"

    @property
    def pretrained_path(self) -> Path:
        return self.out / "pretrained.json"

    @property
    def checkpoint_path(self) -> Path:
        return self.out / "checkpoint.json"

    def manifest(self, split: str):
        path = self.data_dir / f"{split}.jsonl"
        if not path.exists():
            raise ManifestError(f"{path} not found; run gen-data first")
        man = read_manifest(path, world=self.cfg.world)
        if man.config_hash != self.cfg.dataset_hash() or man.seed != self.cfg.seed:
            raise ManifestError(
                f"config hash mismatch: {path} was generated with dataset hash {man.config_hash} (seed {man.seed}), "
                f"this config has {self.cfg.dataset_hash()} (seed {self.cfg.seed})"
            )
        return man

    def pretrained(self) -> ParameterSet:
        path = self.pretrained_path
        if not path.exists():
            raise ManifestError(f"{path} not found; run pretrain first")
        payload = json.loads(path.read_text())
        if payload["dataset_hash"] != self.cfg.dataset_hash():
            raise ManifestError(f"config hash mismatch: {path} was pretrained on dataset {payload['dataset_hash']}")
        return ParameterSet.from_dict(payload["params"])

    def checkpoint(self) -> Checkpoint:
        path = self.checkpoint_path
        if not path.exists():
            raise ManifestError(f"{path} not found; run train first")
        ck = Checkpoint.load(path)
        if ck.config.hash() != self.cfg.hash():
            raise ManifestError(
                f"config hash mismatch: checkpoint was trained with {ck.config.hash()}, this config has {self.cfg.hash()}"
            )
        return ck


def resolve_out(flag: str | None, env=None) -> Path:
    env = os.environ if env is None else env
    return Path(flag or env.get("PEFTDML_OUT") or DEFAULT_OUT)


def load_run(args) -> Run:
    cfg = load_config_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return Run(cfg, resolve_out(args.out))


# ------------------------------------------------------------------ commands


def cmd_gen_data(run: Run, args) -> str:
    build_dataset(run.cfg, run.data_dir)
    report.write_json(run.out / "config.json", {"config_hash": run.cfg.hash(), "seed": run.cfg.seed, "config": to_jsonable(run.cfg)})
    return f"wrote manifests to {run.data_dir}"


def cmd_pretrain(run: Run, args) -> str:
    params = pretrain_backbones(run.manifest("train"), run.cfg)
    payload = {
        "config_hash": run.cfg.hash(),
        "dataset_hash": run.cfg.dataset_hash(),
        "seed": run.cfg.seed,
        "params": params.to_dict(),
    }
    run.out.mkdir(parents=True, exist_ok=True)
    run.pretrained_path.write_text(json.dumps(payload, sort_keys=True))
    return f"wrote {run.pretrained_path}"


def cmd_train(run: Run, args) -> str:
    ck = train(run.cfg, run.manifest("train"), run.pretrained(), max_steps=args.max_steps)
    ck.save(run.checkpoint_path)
    report.write_csv(run.out / "curves.csv", report.CURVE_HEADER, report.curve_rows(ck.curve), run.cfg.hash(), run.cfg.seed)
    return f"wrote {run.checkpoint_path} after {len(ck.curve)} steps"


def cmd_eval(run: Run, args) -> str:
    ck = run.checkpoint()
    model = ck.model()
    test = run.manifest("test")
    if args.protocol == "standard":
        rep = eval_standard(model, run.cfg, test)
    elif args.protocol == "dropout":
        rep = eval_dropout(model, run.cfg, test)
    elif args.protocol == "weather":
        rep = eval_weather(model, run.cfg, test)
        rows = [[k, v] for k, v in rep.per_condition.items()]
        report.write_csv(run.out / "weather.csv", report.WEATHER_HEADER, rows, run.cfg.hash(), run.cfg.seed)
    else:
        rep = eval_zero_shot(model, run.cfg, run.manifest("train"), test)
    path = run.out / f"metrics_{args.protocol}.json"
    report.write_json(path, rep.to_json())
    return f"wrote {path}"


def parse_ranks(text: str) -> list[int]:
    parts = [p for p in text.split(",") if p.strip()]
    try:
        ranks = [int(p) for p in parts]
    except ValueError as exc:
        raise UsageError(f"--ranks must be comma-separated integers, got {text!r}") from exc
    if any(r < 1 for r in ranks):
        raise UsageError("--ranks must be positive")
    return ranks


def sweep_ranks(cfg: RunConfig, ranks: list[int], train_man, test_man, pretrained: ParameterSet, max_steps=None) -> list[list]:
    """(rank, trainable fraction, composite) per rank, sharing data, seed and pretrained backbones."""
    rows = []
    for r in ranks:
        rcfg = copy.deepcopy(cfg)
        rcfg.model.lora_rank = r
        ck = train(rcfg, train_man, pretrained, max_steps=max_steps)
        model = ck.model()
        rep = eval_standard(model, rcfg, test_man)
        rows.append([r, trainability_report(model.params).fraction, rep.composite])
    return rows


def cmd_sweep(run: Run, args) -> str:
    ranks = parse_ranks(args.ranks)
    rows = []
    if ranks:
        rows = sweep_ranks(run.cfg, ranks, run.manifest("train"), run.manifest("test"), run.pretrained(), args.max_steps)
    path = run.out / "sweep.csv"
    report.write_csv(path, report.SWEEP_HEADER, rows, run.cfg.hash(), run.cfg.seed)
    return f"wrote {path}"


def cmd_report(run: Run, args) -> str:
    if args.verify:
        problems = report.verify_report(run.out, run.cfg.hash())
        if problems:
            raise ManifestError("verification failed:\n  " + "\n  ".join(problems))
        return f"verified {run.out}"
    path = report.emit_report(run.out, run.cfg.hash(), run.cfg.seed, run.cfg.dataset_hash())
    return f"wrote {path}"


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv: list[str] | None = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(sys.argv[1:] if argv is None else argv)
        if args.command is None:
            raise UsageError(parser.format_help().rstrip())
        run = load_run(args)
        message = COMMANDS[args.command](run, args)
    except UsageError as exc:
        print(exc, file=stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except (PeftDmlError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"peftdml: error: {exc}", file=stderr)
        return 2
    print(message, file=stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
