"""Command-line entry point: synth, prep, train, encode, eval, audit."""
from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import yaml

from . import checkpoint, evaluation, signal, synthgen
from .model import Autoencoder, ModelConfig, audit_report
from .train import AdamState, TrainConfig, train_epoch

BUNDLED_CONFIG = Path(__file__).with_name("configs") / "small.yaml"
SHARED_KEYS = ("seed",)
TASK_FIELDS = {"subject": "subject_id", "stimulus": "stimulus_id", "dataset": "dataset_id"}
REPR_META = ("trial_id", "subject_id", "stimulus_id", "dataset_id")

# command -> key -> (default, help); the default's type is the key's type
DEFAULTS: dict[str, dict[str, tuple[Any, str]]] = {
    "synth": {
        "subjects": (4, "number of synthetic subjects"),
        "classes": (3, "number of stimulus classes"),
        "trials": (10, "trials per (subject, class) cell"),
        "duration_s": (4.0, "trial length in seconds"),
        "rate_hz": (500, "sampling rate of generated trials (250, 500 or 1000)"),
        "blinks": (False, "inject blinks as negative coordinates"),
        "seed": (0, "generator seed"),
        "out": ("", "output directory for trial files"),
    },
    "prep": {
        "in": ("", "directory of raw trial files"),
        "out": ("", "output directory for canonical 500 Hz trial files"),
    },
    "train": {
        "modality": ("vel", "pos or vel"),
        "in": ("", "directory of preprocessed trials"),
        "out": ("", "checkpoint path"),
        "filters": (0, "encoder width; 0 keeps the full-size preset"),
        "epochs": (0, "number of epochs; 0 uses the preset (14 pos, 25 vel)"),
        "batch_size": (0, "batch size; 0 uses the preset (256 pos, 128 vel)"),
        "max_windows": (0, "train on a seeded subset of at most this many windows; 0 uses all"),
        "lr": (5e-4, "Adam learning rate"),
        "seed": (0, "seed for weights, shuffling and destroy masks"),
        "resume": ("", "checkpoint to resume from"),
        "log": ("", "append epoch,mean_loss,wall_s lines to this file"),
    },
    "encode": {
        "ckpt_pos": ("", "position checkpoint"),
        "ckpt_vel": ("", "velocity checkpoint"),
        "in": ("", "directory of preprocessed trials"),
        "out": ("", "representation CSV"),
    },
    "eval": {
        "repr": ("", "representation CSV written by encode"),
        "task": ("subject", "label to predict: subject, stimulus, dataset or a metadata column"),
        "cv": ("kfold:5", "kfold:K, loocv, or fixed"),
        "source": ("all", "z_p, z_v, z_pv, pca_pv or all"),
        "trials": ("", "trial directory; enables the pca_pv baseline"),
        "test_fraction": (0.2, "held-out share for --cv fixed"),
        "permutation": (True, "also report a label-shuffled baseline"),
        "importance": (True, "report top-20%% weight counts for z_pv"),
        "seed": (0, "fold and shuffle seed"),
        "out": ("", "report path"),
    },
    "audit": {
        "ckpt": ("", "checkpoint to audit"),
        "preset": ("", "audit a preset instead: pos, vel or both"),
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def echo(self) -> str:
        return f"# {self.command} " + " ".join(f"{k}={self.values[k]!r}" for k in sorted(self.values))


def _coerce(command: str, key: str, value: Any) -> Any:
    default = DEFAULTS[command][key][0]
    want = type(default)
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is str and value is None:
        return ""
    if type(value) is not want:
        raise ConfigError(f"{command}.{key}: expected {want.__name__}, got {type(value).__name__} ({value!r})")
    return value


def parse_config(path: str | Path | None, flags: dict[str, Any], command: str) -> RunConfig:
    """Merge defaults < config file < explicit flags.

    The file is a YAML mapping holding shared keys (``seed``) and one section
    per command. Unknown keys and type mismatches are errors.
    """
    if command not in DEFAULTS:
        raise ConfigError(f"unknown command {command!r}")
    values = {k: d for k, (d, _) in DEFAULTS[command].items()}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {p}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {p} must be a mapping")
        for key in doc:
            if key not in DEFAULTS and key not in SHARED_KEYS:
                raise ConfigError(f"unknown config key {key!r} in {p}")
        for key in SHARED_KEYS:
            if key in doc and key in values:
                values[key] = _coerce(command, key, doc[key])
        section = doc.get(command) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"section {command!r} in {p} must be a mapping")
        for key, value in section.items():
            if key not in values:
                raise ConfigError(f"unknown config key {key!r} in section {command!r} of {p}")
            values[key] = _coerce(command, key, value)
    for key, value in flags.items():
        if key not in values:
            raise ConfigError(f"unknown option {key!r} for {command}")
        values[key] = _coerce(command, key, value)
    return RunConfig(command, values)


def _require(cfg: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if not cfg[k]]
    if missing:
        raise ConfigError(f"{cfg.command}: missing required setting(s) {', '.join('--' + k.replace('_', '-') for k in missing)}")


# commands


def cmd_synth(cfg: RunConfig, log: Callable[[str], None]) -> None:
    _require(cfg, "out")
    trials = synthgen.generate_dataset(cfg["subjects"], cfg["classes"], cfg["trials"], cfg["seed"],
                                       duration_s=cfg["duration_s"], rate_hz=cfg["rate_hz"], blinks=cfg["blinks"])
    for t in trials:
        signal.write_trial(t, cfg["out"])
    log(f"wrote {len(trials)} trials to {cfg['out']}")


def cmd_prep(cfg: RunConfig, log: Callable[[str], None]) -> None:
    _require(cfg, "in", "out")
    trials = signal.read_trials(cfg["in"])
    for t in trials:
        signal.write_trial(signal.preprocess(t), cfg["out"])
    log(f"preprocessed {len(trials)} trials into {cfg['out']}")


def _modality(name: str) -> str:
    key = {"pos": "position", "vel": "velocity"}.get(name, name)
    if key not in ("position", "velocity"):
        raise ConfigError(f"modality must be pos or vel, got {name!r}")
    return key


def _check_canonical(trials: Sequence[signal.GazeTrial]) -> None:
    bad = [t.meta.trial_id for t in trials if t.rate_hz != signal.CANONICAL_HZ]
    if bad:
        raise ValueError(f"{len(bad)} trial(s) are not at {signal.CANONICAL_HZ} Hz (run prep first): {bad[:3]}")


def cmd_train(cfg: RunConfig, log: Callable[[str], None]) -> None:
    _require(cfg, "in", "out")
    modality = _modality(cfg["modality"])
    trials = signal.read_trials(cfg["in"])
    _check_canonical(trials)
    windows = signal.windows_array(trials, modality)
    if cfg["max_windows"] and len(windows) > cfg["max_windows"]:
        keep = np.sort(np.random.default_rng([cfg["seed"], 13]).permutation(len(windows))[:cfg["max_windows"]])
        windows = windows[keep]
    preset = TrainConfig.position() if modality == "position" else TrainConfig.velocity()
    tcfg = TrainConfig(batch_size=cfg["batch_size"] or preset.batch_size, epochs=cfg["epochs"] or preset.epochs,
                       seed=cfg["seed"])
    if cfg["resume"]:
        ck = checkpoint.load_checkpoint(cfg["resume"])
        if ck.model.config.modality != modality:
            raise ValueError(f"resume checkpoint is a {ck.model.config.modality} model, not {modality}")
        model, adam, start = ck.model, ck.adam, ck.epoch
        log(f"resuming from {cfg['resume']} at epoch {start}")
    else:
        mcfg = ModelConfig.preset(modality)
        if cfg["filters"]:
            mcfg = mcfg.reduced(cfg["filters"])
        model, adam, start = Autoencoder(mcfg, seed=cfg["seed"]), AdamState(lr=cfg["lr"]), 0
    out = Path(cfg["out"])
    manifest = {
        "trial_files": sorted(f"{t.meta.trial_id}.csv" for t in trials),
        "modality": modality,
        "n_windows": int(len(windows)),
        "train_config": {"batch_size": tcfg.batch_size, "epochs": tcfg.epochs, "seed": tcfg.seed,
                         "shuffle": tcfg.shuffle, "lr": adam.lr},
        "model_config": model.config.to_dict(),
    }
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_name(out.name + ".train.yaml").write_text(yaml.safe_dump(manifest, sort_keys=True), encoding="utf-8")
    log(f"training {modality} model on {len(windows)} windows, epochs {start + 1}..{tcfg.epochs}")
    log_file = Path(cfg["log"]) if cfg["log"] else None
    for epoch in range(start, tcfg.epochs):
        t0 = time.perf_counter()
        loss = train_epoch(model, windows, tcfg, adam, epoch)
        line = f"{epoch + 1},{loss:.9g},{time.perf_counter() - t0:.3f}"
        log(line)
        if log_file is not None:
            with log_file.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        checkpoint.save_checkpoint(out, model, adam, epoch + 1)
    if start >= tcfg.epochs:
        checkpoint.save_checkpoint(out, model, adam, start)
    log(f"saved {out}")


def _format_float(v: float) -> str:
    return f"{v:.9g}"


def write_representation_table(path: str | Path, table: evaluation.RepresentationTable) -> Path:
    """CSV of metadata columns then z_0..z_{d-1}; a sidecar records column ranges per source."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = table.z.shape[1]
    lines = [",".join(REPR_META + tuple(f"z_{i}" for i in range(dim)))]
    for meta, row in zip(table.meta, table.z):
        lines.append(",".join([meta[k] for k in REPR_META] + [_format_float(v) for v in row]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    sources = ",".join(f"{k}={a}:{b}" for k, (a, b) in table.sources.items())
    path.with_name(path.name + signal.MANIFEST_SUFFIX).write_text(f"sources: {sources}\n", encoding="utf-8")
    return path


def read_representation_table(path: str | Path) -> evaluation.RepresentationTable:
    path = Path(path)
    rows = path.read_text(encoding="utf-8").splitlines()
    if not rows:
        raise ValueError(f"{path}: empty representation table")
    header = rows[0].split(",")
    if tuple(header[:len(REPR_META)]) != REPR_META:
        raise ValueError(f"{path}: expected leading columns {','.join(REPR_META)}")
    n_meta = len(REPR_META)
    meta, z = [], []
    for lineno, line in enumerate(rows[1:], 2):
        cells = line.split(",")
        if len(cells) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(cells)}")
        meta.append(dict(zip(REPR_META, cells[:n_meta])))
        z.append([float(c) for c in cells[n_meta:]])
    z_arr = np.asarray(z, dtype=np.float64).reshape(len(meta), len(header) - n_meta)
    side = path.with_name(path.name + signal.MANIFEST_SUFFIX)
    sources: dict[str, tuple[int, int]] = {}
    if side.exists():
        for item in signal.read_manifest(side).get("sources", "").split(","):
            if item:
                name, rng = item.split("=")
                a, b = rng.split(":")
                sources[name] = (int(a), int(b))
    else:
        sources["z"] = (0, z_arr.shape[1])
    return evaluation.RepresentationTable(z_arr, meta, sources)


def cmd_encode(cfg: RunConfig, log: Callable[[str], None]) -> None:
    _require(cfg, "in", "out")
    if not cfg["ckpt_pos"] and not cfg["ckpt_vel"]:
        raise ConfigError("encode needs --ckpt-pos and/or --ckpt-vel")
    pos = checkpoint.load_checkpoint(cfg["ckpt_pos"]).model if cfg["ckpt_pos"] else None
    vel = checkpoint.load_checkpoint(cfg["ckpt_vel"]).model if cfg["ckpt_vel"] else None
    trials = signal.read_trials(cfg["in"])
    _check_canonical(trials)
    table = evaluation.extract_representations(trials, pos, vel)
    write_representation_table(cfg["out"], table)
    log(f"encoded {len(trials)} trials into {table.z.shape[1]}-dim rows: {cfg['out']}")


def cmd_eval(cfg: RunConfig, log: Callable[[str], None]) -> None:
    _require(cfg, "repr", "out")
    table = read_representation_table(cfg["repr"])
    label_field = TASK_FIELDS.get(cfg["task"], cfg["task"])
    if label_field not in REPR_META:
        raise ConfigError(f"unknown task {cfg['task']!r}; use subject, stimulus, dataset or one of {REPR_META}")
    y = table.labels(label_field)
    features = {name: table.select(name) for name in table.sources}
    if cfg["trials"]:
        trials = {t.meta.trial_id: t for t in signal.read_trials(cfg["trials"])}
        ordered = [trials[m["trial_id"]] for m in table.meta]
        features["pca_pv"] = evaluation.pca_pv_features(ordered)
    wanted = list(features) if cfg["source"] == "all" else [cfg["source"]]
    for name in wanted:
        if name not in features:
            raise ConfigError(f"representation {name!r} not available; have {sorted(features)}")
    train_mask = None
    if cfg["cv"] == "fixed":
        fold = evaluation.stratified_folds(y, max(2, int(round(1 / cfg["test_fraction"]))), cfg["seed"])
        train_mask = fold != 0
    reports = []
    for name in wanted:
        task = evaluation.EvalTask(cfg["task"], label_field, name, cfg["cv"], cfg["seed"])
        groups = evaluation.ZPV_GROUPS if cfg["importance"] and name == "z_pv" and features[name].shape[1] == 256 else None
        reports.append(evaluation.cross_validate(task, features[name], y, train_mask=train_mask, groups=groups))
        log(f"{cfg['task']} / {name}: mean accuracy {reports[-1].mean_accuracy:.4f}")
    if cfg["permutation"]:
        name = "z_v" if "z_v" in wanted else wanted[0]
        task = evaluation.EvalTask(cfg["task"] + " (shuffled labels)", label_field, name, cfg["cv"], cfg["seed"])
        reports.append(evaluation.permutation_baseline(task, features[name], y, seed=cfg["seed"], train_mask=train_mask))
        log(f"permutation baseline ({name}): mean accuracy {reports[-1].mean_accuracy:.4f}")
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(evaluation.format_report(reports), encoding="utf-8")
    log(f"report written to {out}")


def cmd_audit(cfg: RunConfig, log: Callable[[str], None]) -> None:
    if bool(cfg["ckpt"]) == bool(cfg["preset"]):
        raise ConfigError("audit needs exactly one of --ckpt or --preset")
    if cfg["ckpt"]:
        ck = checkpoint.load_checkpoint(cfg["ckpt"])
        log(audit_report(ck.model.config, ck.model))
        return
    names = {"pos": ["position"], "vel": ["velocity"], "both": ["position", "velocity"]}.get(cfg["preset"])
    if names is None:
        raise ConfigError(f"--preset must be pos, vel or both, got {cfg['preset']!r}")
    log("\n\n".join(audit_report(ModelConfig.preset(n)) for n in names))


COMMANDS = {"synth": cmd_synth, "prep": cmd_prep, "train": cmd_train, "encode": cmd_encode,
            "eval": cmd_eval, "audit": cmd_audit}
COMMAND_HELP = {
    "synth": "generate a labeled synthetic gaze dataset",
    "prep": "normalize trials to canonical 500 Hz files",
    "train": "train a position or velocity autoencoder",
    "encode": "extract representations for every trial",
    "eval": "linear-probe evaluation of a representation table",
    "audit": "parameter-count breakdown and receptive-field table",
}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gazerep", description="Micro-macro gaze representation toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, keys in DEFAULTS.items():
        p = sub.add_parser(name, help=COMMAND_HELP[name], description=COMMAND_HELP[name],
                           argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="YAML file with shared keys and per-command sections")
        for key, (default, text) in keys.items():
            kind = _parse_bool if isinstance(default, bool) else type(default)
            metavar = {bool: "BOOL", int: "N", float: "X"}.get(type(default), "VALUE")
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind, metavar=metavar,
                           help=f"{text} (default: {default!r})")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    command = args.pop("command")
    path = args.pop("config", None)

    def log(msg: str) -> None:
        print(msg, flush=True)

    try:
        cfg = parse_config(path, args, command)
        log(cfg.echo())
        COMMANDS[command](cfg, log)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        print(f"gazerep {command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
