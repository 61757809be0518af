"""Command-line entry point: ``python -m dvsp <command> [flags]``.

Settings resolve as: built-in defaults < ``--config`` file < command-line
flags.  The config file is flat ``key = value`` text (``#`` starts a
comment); values are parsed with the type of the matching field, lists are
comma-separated.  Every command writes ``config_echo.cfg`` into ``--out-dir``;
passing it back through ``--config`` reruns the command exactly.

Exit status: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import datasets
from .advtrain import TrainConfig, train
from .attacks import AttackConfig
from .bottleneck import IbHyperparams
from .datasets import LabeledSet, attack_schedule, load_mnist, make_pairs
from .metrics import RobustnessReport, heatmap_export
from .model import ArchitectureConfig, load_checkpoint, save_checkpoint
from .numerics import Rng
from .pipeline import assemble_report, attack_campaign, evaluate

log = logging.getLogger("dvsp")

CHECKPOINT = "checkpoint.ckpt"
TRAIN_LOG = "train_log.jsonl"
TIMING = "timing.json"
ECHO = "config_echo.cfg"
EER_REPORT = "eer_report.json"
ATTACKS = "attacks.jsonl"
ROBUSTNESS = "robustness_report.json"
HEATMAP = "heatmap.csv"
SWEEP = "sweep.csv"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data_dir: str = ""
    train_size: int = 50_000
    test_size: int = 10_000
    holdout_start: int = 50_000
    # model / objective
    objective: str = "dvsp"
    latent_dim: int = 16
    beta: float = 0.01
    radius: float = 1.0
    epsilon: float = 0.1
    mc_samples: int = 12
    adversarial: bool = True
    adv_mode: str = "l2"
    deterministic: bool = False
    # optimization
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    # evaluation
    checkpoint: str = ""
    eer_pairs: int = 100
    threshold: float | None = None
    # attacks
    pairs_per_class: int = 3
    ceiling: float = 10.0
    attack_rounds: int = 8
    attack_steps: int = 300
    attack_lr: float = 1e-2
    attack_abort_early: bool = True
    workers: int = 0
    chunk_size: int = 128
    records: str = ""
    report: str = ""
    # sweep
    betas: list[float] = field(default_factory=lambda: [0.01])
    radii: list[float] = field(default_factory=lambda: [1.0])
    folds: int = 5

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            objective=self.objective,
            hp=IbHyperparams(self.beta, self.radius, self.mc_samples, self.epsilon),
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            lr=self.lr,
            adversarial=self.adversarial,
            adv_mode=self.adv_mode,
            deterministic=self.deterministic,
        )

    def attack_config(self) -> AttackConfig:
        return AttackConfig(
            rounds=self.attack_rounds, steps=self.attack_steps, lr=self.attack_lr, abort_early=self.attack_abort_early
        )

    def arch(self) -> ArchitectureConfig:
        return ArchitectureConfig(latent_dim=self.latent_dim)


_HINTS = typing.get_type_hints(RunConfig)


def _parse_value(name: str, text: str):
    hint = _HINTS[name]
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    text = text.strip()
    try:
        if origin is list:
            return [args[0](t) for t in text.split(",") if t.strip()]
        if type(None) in args:  # optional scalar
            if text.lower() in ("", "none"):
                return None
            hint = next(a for a in args if a is not type(None))
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return hint(text)
    except ValueError:
        raise UsageError(f"bad value for {name}: {text!r}") from None


def _format_value(v) -> str:
    if isinstance(v, list):
        return ",".join(repr(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_config_file(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _HINTS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, val)
    return out


def write_config_echo(cfg: RunConfig, path, command: str):
    lines = [f"# dvsp {command}; resolved settings"]
    lines += [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dvsp", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value settings file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kw = {"dest": f.name, "default": argparse.SUPPRESS, "type": str}
        if f.name == "objective":
            kw["choices"] = ["softmax", "dvib", "dvsp"]
        common.add_argument(flag, **kw)
    common.add_argument("-v", "--verbose", action="store_true")
    for name, help_ in [
        ("train", "train a feature extractor"),
        ("evaluate", "EER of a checkpoint on test pairs"),
        ("attack", "feature-space attack campaign and robustness report"),
        ("sweep", "grid over (beta, radius) with k-fold splits"),
        ("heatmap", "re-export the heatmap from saved attack records"),
    ]:
        sub.add_parser(name, parents=[common], help=help_)
    return p


def resolve(ns: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(ns, "config", None):
        if not Path(ns.config).exists():
            raise UsageError(f"config file {ns.config} not found")
        values.update(read_config_file(ns.config))
    for f in fields(RunConfig):
        if hasattr(ns, f.name):
            values[f.name] = _parse_value(f.name, getattr(ns, f.name))
    cfg = RunConfig(**values)
    if cfg.objective not in ("softmax", "dvib", "dvsp"):
        raise UsageError(f"invalid objective {cfg.objective!r}")
    return cfg


def _load_data(cfg: RunConfig):
    data_dir = cfg.data_dir or datasets.default_data_dir()
    try:
        return load_mnist(data_dir, cfg.train_size, cfg.test_size, cfg.holdout_start)
    except (FileNotFoundError, ValueError) as e:
        raise UsageError(str(e)) from None


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _eer_pairs(cfg: RunConfig, data: LabeledSet, n_c: int):
    if cfg.eer_pairs < 1:
        raise UsageError("eer_pairs must be >= 1 (empty pair schedule)")
    return make_pairs(data.labels, n_c, cfg.eer_pairs, Rng(cfg.seed).spawn(10))


def _load_ckpt(cfg: RunConfig, out: Path):
    path = Path(cfg.checkpoint) if cfg.checkpoint else out / CHECKPOINT
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def cmd_train(cfg: RunConfig) -> dict:
    out = _out(cfg)
    split = _load_data(cfg)
    write_config_echo(cfg, out / ECHO, "train")
    ckpt, tlog = train(split.train, cfg.arch(), cfg.train_config())
    save_checkpoint(out / CHECKPOINT, ckpt)
    (out / TRAIN_LOG).write_text(tlog.to_jsonl())
    (out / TIMING).write_text(json.dumps({"train_seconds": tlog.wall_time}) + "\n")
    return {"checkpoint": str(out / CHECKPOINT), "final": tlog.epochs[-1] if tlog.epochs else None}


def cmd_evaluate(cfg: RunConfig) -> dict:
    out = _out(cfg)
    ckpt = _load_ckpt(cfg, out)
    split = _load_data(cfg)
    write_config_echo(cfg, out / ECHO, "evaluate")
    res = evaluate(ckpt, split.test, _eer_pairs(cfg, split.test, split.n_c))
    (out / EER_REPORT).write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    return res


def cmd_attack(cfg: RunConfig) -> dict:
    out = _out(cfg)
    ckpt = _load_ckpt(cfg, out)
    split = _load_data(cfg)
    write_config_echo(cfg, out / ECHO, "attack")
    ev = evaluate(ckpt, split.test, _eer_pairs(cfg, split.test, split.n_c))
    T = ev["T"] if cfg.threshold is None else cfg.threshold
    jobs = attack_schedule(split.test.labels, split.n_c, cfg.pairs_per_class, Rng(cfg.seed).spawn(20))
    echo = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    echo["objective_in_checkpoint"] = ckpt.objective
    echo["pair_schedule"] = f"{cfg.pairs_per_class} source x {cfg.pairs_per_class} target images per ordered class pair"

    def progress(done, total):
        log.info("attack chunks %d/%d", done, total)

    try:
        report, records = attack_campaign(
            ckpt, split.test, jobs, split.n_c, ev["EER"], T, cfg.attack_config(), cfg.ceiling,
            cfg.workers or None, cfg.chunk_size, echo, progress,
        )
    except Exception as e:
        (out / "partial_manifest.json").write_text(
            json.dumps({"error": repr(e), "jobs": len(jobs)}, indent=2) + "\n"
        )
        raise
    with open(out / ATTACKS, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    report.save(out / ROBUSTNESS)
    heatmap_export(report, out / HEATMAP)
    return {"RI": report.RI, "EER": report.EER, "T": report.T, "failures": int(report.failures.sum())}


def cmd_heatmap(cfg: RunConfig) -> dict:
    out = _out(cfg)
    rec_path = Path(cfg.records) if cfg.records else out / ATTACKS
    if not rec_path.exists():
        raise FileNotFoundError(f"attack records {rec_path} not found")
    recs = [json.loads(line) for line in rec_path.read_text().splitlines() if line.strip()]
    eer, T, config = float("nan"), float("nan"), {}
    rep_path = Path(cfg.report) if cfg.report else rec_path.with_name(ROBUSTNESS)
    if rep_path.exists():
        prior = RobustnessReport.load(rep_path)
        eer, T, config = prior.EER, prior.T, prior.config
    n_c = 1 + max(max(r["source_class"], r["target_class"]) for r in recs)
    jobs = [datasets.AttackJob(r["source"], r["target"], r["source_class"], r["target_class"]) for r in recs]

    class _R:  # minimal view of an AttackResult
        def __init__(self, r):
            self.perturbation_norm, self.success = r["perturbation_norm"], r["success"]

    report = assemble_report(jobs, [_R(r) for r in recs], n_c, eer, T, cfg.ceiling, config)
    heatmap_export(report, out / HEATMAP)
    return {"RI": report.RI, "heatmap": str(out / HEATMAP)}


def _fold_split(train_set: LabeledSet, folds: int, j: int):
    n = len(train_set)
    size = n // folds
    lo, hi = j * size, (j + 1) * size
    keep = torch.cat([torch.arange(0, lo), torch.arange(hi, n)])
    return train_set.subset(keep), train_set.subset(slice(lo, hi))


def cmd_sweep(cfg: RunConfig) -> dict:
    if not cfg.betas or not cfg.radii:
        raise UsageError("sweep grid is empty")
    if cfg.folds < 1:
        raise UsageError("folds must be >= 1")
    out = _out(cfg)
    split = _load_data(cfg)
    write_config_echo(cfg, out / ECHO, "sweep")
    rows = []
    for beta in cfg.betas:
        for radius in cfg.radii:
            sub = dataclasses.replace(cfg, beta=beta, radius=radius)
            if cfg.folds == 1:
                parts = [(split.train, split.test)]
            else:
                parts = [_fold_split(split.train, cfg.folds, j) for j in range(cfg.folds)]
            eers, ris = [], []
            for fold, (tr, va) in enumerate(parts):
                ckpt, _ = train(tr, sub.arch(), sub.train_config())
                ev = evaluate(ckpt, va, _eer_pairs(sub, va, split.n_c))
                jobs = attack_schedule(va.labels, split.n_c, sub.pairs_per_class, Rng(sub.seed).spawn(20))
                rep, _ = attack_campaign(
                    ckpt, va, jobs, split.n_c, ev["EER"], ev["T"], sub.attack_config(), sub.ceiling,
                    sub.workers or None, sub.chunk_size,
                )
                eers.append(ev["EER"])
                ris.append(rep.RI)
                log.info("beta=%g radius=%g fold %d: EER %.4f RI %.4f", beta, radius, fold, ev["EER"], rep.RI)
            rows.append({
                "beta": beta, "radius": radius, "folds": len(parts),
                "eer_mean": float(np.mean(eers)), "eer_std": float(np.std(eers)),
                "ri_mean": float(np.mean(ris)), "ri_std": float(np.std(ris)),
            })
    with open(out / SWEEP, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return {"rows": rows}


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "attack": cmd_attack,
    "sweep": cmd_sweep,
    "heatmap": cmd_heatmap,
}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)  # exits with status 2 on bad flags
    logging.basicConfig(
        level=logging.INFO if ns.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    try:
        cfg = resolve(ns)
        result = COMMANDS[ns.command](cfg)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"dvsp: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"dvsp: {ns.command} failed: {e}", file=sys.stderr)
        if ns.verbose:
            raise
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
