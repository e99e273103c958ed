"""Command-line front end.

Configuration comes from an INI file (``--config``) with the sections
below, then ``--set section.key=value`` overrides, then the dedicated
flags. Unknown sections or keys are rejected by name.

    [run]       command, seed
    [paths]     model, data, out
    [train]     lr, epochs, batch_size, accum_steps, gns, qas, select, blocks, timing
    [perturb]   mode, queries, mu, share_wp_across_batch, per_sample_np
    [profile]   n, L, d_a, d_w
    [grad_check] samples
"""
from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from qzo import plotting
from qzo.io import FormatError, checkpoint_load, checkpoint_save, load_dataset
from qzo.model import ModelError, QModel, accuracy, make_batch, partition_blocks
from qzo.oracle import LayerQuality, grad_check
from qzo.optimizer import TrainConfig
from qzo.profiler import ProfileReport, profile, profile_model, render_table
from qzo.quant import QuantError
from qzo.sparse import SelectionReport, heldout_split, select_block, set_trainable
from qzo.trainer import METRICS_HEADER, train
from qzo.zo import PerturbConfig, ZOError

COMMANDS = ("train", "select-block", "profile", "grad-check", "eval")


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str):
    return None if text.strip() == "" else int(text)


SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {"command": (str, "train"), "seed": (int, 1)},
    "paths": {"model": (str, ""), "data": (str, ""), "out": (str, "out")},
    "train": {
        "lr": (float, 0.01), "epochs": (int, 1), "batch_size": (int, 1), "accum_steps": (int, 100),
        "gns": (_bool, True), "qas": (_bool, True), "select": (_bool, False), "blocks": (int, 4),
        "timing": (_bool, True),
    },
    "perturb": {
        "mode": (str, "adaptive"), "queries": (int, 10), "mu": (int, 1),
        "share_wp_across_batch": (_bool, True), "per_sample_np": (_bool, True),
    },
    "profile": {"n": (int, 1), "L": (_opt_int, None), "d_a": (_opt_int, None), "d_w": (_opt_int, None)},
    "grad_check": {"samples": (int, 64)},
}


def _lookup(key: str) -> tuple[str, str]:
    """Resolve ``section.key`` or a bare key that is unique across sections."""
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        if name not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {key!r}")
        return section, name
    hits = [s for s in SCHEMA if key in SCHEMA[s]]
    if not hits:
        raise ConfigError(f"unknown config key {key!r}")
    return hits[0], key


def _parse(section: str, key: str, text: str):
    conv = SCHEMA[section][key][0]
    try:
        return conv(text)
    except ValueError as e:
        raise ConfigError(f"bad value for {section}.{key}: {text!r} ({e})") from None


@dataclass
class RunConfig:
    values: dict[tuple[str, str], object]

    def __getitem__(self, key: str):
        return self.values[_lookup(key)]

    @property
    def command(self) -> str:
        return self["run.command"]

    @property
    def seed(self) -> int:
        return self["run.seed"]

    def path(self, key: str, must_exist: bool = True) -> Path:
        text = self[f"paths.{key}"]
        if not text:
            raise ConfigError(f"paths.{key} is required for command {self.command!r}")
        p = Path(text)
        if must_exist and not p.exists():
            raise FileNotFoundError(f"{key} file not found: {p}")
        return p

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(self["train.lr"], self["train.epochs"], self["train.batch_size"],
                               self["train.accum_steps"], self["train.gns"], self["train.qas"])
        except ValueError as e:
            raise ConfigError(f"[train] {e}") from None

    def perturb_config(self) -> PerturbConfig:
        return PerturbConfig(self["perturb.mode"], self["perturb.queries"], self["perturb.mu"], self.seed,
                             self["perturb.share_wp_across_batch"], self["perturb.per_sample_np"])


def load_config(path=None, overrides=(), flags: dict | None = None) -> RunConfig:
    values = {(s, k): spec[1] for s, keys in SCHEMA.items() for k, spec in keys.items()}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        cp.optionxform = str
        try:
            cp.read(path)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}] in {path}")
            for key, text in cp.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown config key {key!r} in [{section}] of {path}")
                values[(section, key)] = _parse(section, key, text)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        section, name = _lookup(key.strip())
        values[(section, name)] = _parse(section, name, text.strip())
    for key, value in (flags or {}).items():
        if value is not None:
            values[_lookup(key)] = value
    cfg = RunConfig(values)
    if cfg.command not in COMMANDS:
        raise ConfigError(f"unknown command {cfg.command!r}; expected one of {COMMANDS}")
    if not 0 < cfg.seed < 2**32:
        raise ConfigError(f"seed must be a nonzero unsigned 32-bit integer, got {cfg.seed}")
    return cfg


# -- commands ----------------------------------------------------------------


def _load(cfg: RunConfig):
    model = checkpoint_load(cfg.path("model"))
    x, labels = load_dataset(cfg.path("data"))
    if labels.max() >= model.n_classes:
        raise FormatError(f"dataset label {labels.max()} out of range for {model.n_classes} classes")
    return model, make_batch(model, x, labels)


def _write_lines(path: Path, header: str, rows) -> None:
    path.write_text("\n".join([header, *rows]) + "\n")


def _select(cfg: RunConfig, model: QModel, data, out: Path) -> SelectionReport:
    if model.n_blocks != cfg["train.blocks"]:
        partition_blocks(model, cfg["train.blocks"])
    tr, ho = heldout_split(data.labels)
    if tr.size == 0 or ho.size == 0:
        raise ModelError("dataset too small for a held-out split")
    report = select_block(model, data.subset(tr), data.subset(ho), cfg.train_config(), cfg.perturb_config())
    _write_lines(out / "selection.csv", SelectionReport.CSV_HEADER, report.csv_rows())
    print(f"selected block {report.chosen} (gains {', '.join(f'{g:+.4f}' for g in report.gains)})")
    return report


def cmd_train(cfg: RunConfig, out: Path) -> None:
    model, data = _load(cfg)
    tconf, pconf = cfg.train_config(), cfg.perturb_config()
    if cfg["train.select"]:
        set_trainable(model, _select(cfg, model, data, out).chosen)
    with open(out / "metrics.csv", "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        rows = train(model, data, tconf, pconf, on_step=lambda r: fh.write(r.csv_row() + "\n"),
                     timing=cfg["train.timing"])
    model.trainable_block = None
    checkpoint_save(model, out / "model.qzot")
    plotting.plot_loss(rows, out / "loss.png")
    print(f"{len(rows)} steps, final loss {rows[-1].loss:.4f}, train accuracy {accuracy(model, data):.4f}")


def cmd_select(cfg: RunConfig, out: Path) -> None:
    model, data = _load(cfg)
    _select(cfg, model, data, out)


def cmd_profile(cfg: RunConfig, out: Path) -> None:
    n, q = cfg["profile.n"], cfg["perturb.queries"]
    declared = [cfg[f"profile.{k}"] for k in ("L", "d_a", "d_w")]
    if any(v is not None for v in declared):
        if any(v is None for v in declared):
            raise ConfigError("profile.L, profile.d_a and profile.d_w must be given together")
        L, d_a, d_w = declared
        # declared dims carry no layer shapes: cost each weight as one MAC
        reports = profile(L, d_a, d_w, n, q, L * d_w)
    else:
        reports = profile_model(checkpoint_load(cfg.path("model")), n, q)
    _write_lines(out / "profile.csv", ProfileReport.CSV_HEADER, [r.csv_row() for r in reports])
    table = render_table(reports)
    (out / "profile.txt").write_text(table + "\n")
    plotting.plot_profile(reports, out / "profile.png")
    print(table)


def cmd_grad_check(cfg: RunConfig, out: Path) -> None:
    model, data = _load(cfg)
    k = min(len(data), cfg["grad_check.samples"])
    qualities = grad_check(model, data.subset(np.arange(k)), cfg["perturb.queries"], cfg.seed, cfg["perturb.mu"])
    _write_lines(out / "grad_check.csv", LayerQuality.CSV_HEADER, [q.csv_row() for q in qualities])
    plotting.plot_grad_check(qualities, out / "grad_check.png")
    for q in qualities:
        print(q.csv_row())


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    model, data = _load(cfg)
    acc = accuracy(model, data)
    _write_lines(out / "eval.csv", "metric,value", [f"accuracy,{acc:.6f}", f"samples,{len(data)}"])
    print(f"accuracy {acc:.4f} on {len(data)} samples")


HANDLERS = {"train": cmd_train, "select-block": cmd_select, "profile": cmd_profile,
            "grad-check": cmd_grad_check, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qzo", description="BP-free training of INT8 networks")
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--model")
    ap.add_argument("--data")
    ap.add_argument("--out")
    ap.add_argument("--command", choices=COMMANDS)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")
    return ap


def run(cfg: RunConfig) -> None:
    out = Path(cfg["paths.out"])
    out.mkdir(parents=True, exist_ok=True)
    HANDLERS[cfg.command](cfg, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {"run.command": args.command, "run.seed": args.seed, "paths.model": args.model,
             "paths.data": args.data, "paths.out": args.out}
    try:
        cfg = load_config(args.config, args.overrides, flags)
        run(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, FormatError, ModelError, QuantError, ZOError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
