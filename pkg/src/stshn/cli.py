"""Command-line entry point: gen, ingest, train, predict, eval, export-relevance.

Settings come from a ``key=value`` file (``--config``) with ``--set key=value``
overrides; ``--seed`` and ``--mode {cls,reg}`` are shortcuts for the two most
common keys. Failures print one JSON line ``{"error": kind, "message": ...}``
on stderr and exit with the code listed in ``EXIT_CODES``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .datapipe import DataError, GridSpec, ingest_csv, load_tensor, save_tensor
from .model import ConfigError, Hyperparams, Relevance, check_params, forward
from .synthgen import SynthSpec, lagged_spec, long_range_spec, planted_spec, write_synthetic
from .training import (CheckpointError, ForecastData, TrainConfig, TrainingDiverged, evaluate_model,
                       load_checkpoint, predict_windows, save_checkpoint, train)

EXIT_CODES = {
    "internal": 1,
    "usage": 2,
    "missing_file": 3,
    "config": 4,
    "shape_mismatch": 5,
    "data": 6,
    "diverged": 7,
}

BUILTIN_SPECS = {"planted": planted_spec, "lagged": lagged_spec, "long-range": long_range_spec}
MODE_ALIASES = {"cls": "classification", "reg": "regression"}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass
class RunConfig:
    """Everything a run needs. Defaults are the library defaults.

    data             tensor cache written by ``ingest`` (or ``gen --tensor``)
    checkpoint       model file written by ``train`` and read by the others
    split            train+val : test ratio of target slots, e.g. ``7:1``
    frozen           comma-separated parameter names Adam must not update
    d ... hypergraph architecture, see :class:`stshn.model.Hyperparams`
    mode ... seed    optimization, see :class:`stshn.training.TrainConfig`
    """

    data: str = ""
    checkpoint: str = "model.ckpt"
    split: str = "7:1"
    frozen: str = ""
    d: int = 16
    heads: int = 4
    spatial_layers: int = 2
    temporal_layers: int = 7
    hyperedges: int = 128
    scale: int = 3
    window: int = 30
    hypergraph: bool = True
    mode: str = "classification"
    epochs: int = 20
    learning_rate: float = 1e-3
    decay: float = 0.96
    weight_decay: float = 0.0
    seed: int = 0

    def hyperparams(self) -> Hyperparams:
        names = {f.name for f in fields(Hyperparams)}
        return Hyperparams(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def train_config(self) -> TrainConfig:
        frozen = tuple(s.strip() for s in self.frozen.split(",") if s.strip())
        return TrainConfig(self.mode, self.epochs, self.learning_rate, self.decay, self.weight_decay,
                           self.seed, frozen)

    def split_ratio(self) -> tuple[int, int]:
        try:
            a, b = (int(s) for s in self.split.split(":"))
        except ValueError:
            raise CliError("config", f"split must look like '7:1', got {self.split!r}") from None
        if a <= 0 or b <= 0:
            raise CliError("config", f"split parts must be positive, got {self.split!r}")
        return a, b


def _coerce(key: str, text: str, kind):
    text = text.strip()
    try:
        if kind is bool:
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        return kind(text)
    except ValueError:
        raise CliError("config", f"{key}: cannot read {text!r} as {kind.__name__}") from None


def parse_assignments(lines, source: str) -> dict:
    """``key=value`` lines (``#`` comments allowed) into typed values; unknown keys rejected."""
    types = {f.name: type(f.default) for f in fields(RunConfig)}
    out = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise CliError("config", f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        if key not in types:
            raise CliError("config", f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value, types[key])
    return out


def load_run_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError("missing_file", f"config file not found: {path}")
        values.update(parse_assignments(path.read_text().splitlines(), str(path)))
    values.update(parse_assignments(getattr(args, "set", None) or [], "--set"))
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "mode", None):
        values["mode"] = MODE_ALIASES[args.mode]
    cfg = RunConfig(**values)
    if cfg.mode not in MODE_ALIASES.values():
        raise CliError("config", f"mode must be classification or regression, got {cfg.mode!r}")
    return cfg


def _require(path: str, what: str) -> Path:
    if not path:
        raise CliError("config", f"no {what} path configured")
    p = Path(path)
    if not p.is_file():
        raise CliError("missing_file", f"{what} not found: {p}")
    return p


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _load_data(cfg: RunConfig, hp: Hyperparams) -> ForecastData:
    ct = load_tensor(_require(cfg.data, "data"))
    return ForecastData.from_tensor(ct, hp, cfg.split_ratio())


def _load_model(cfg: RunConfig):
    hp = cfg.hyperparams()
    data = _load_data(cfg, hp)
    params, meta = load_checkpoint(_require(cfg.checkpoint, "checkpoint"))
    try:
        check_params(params, hp, data.n_regions, data.n_categories)
    except ConfigError as exc:
        raise CliError("shape_mismatch", f"checkpoint {cfg.checkpoint} does not fit the configuration: {exc}")
    if meta.get("mode", cfg.mode) != cfg.mode:
        raise CliError("config", f"checkpoint was trained for {meta['mode']}, configuration asks for {cfg.mode}")
    return hp, data, params


def _target_slot(data: ForecastData, hp: Hyperparams, target) -> int:
    T = data.counts.shape[1]
    if target is None:
        return T
    if not hp.window <= target <= T:
        raise CliError("data", f"target slot must lie in [{hp.window}, {T}], got {target}")
    return target


# commands

def cmd_gen(args) -> int:
    if args.spec in BUILTIN_SPECS:
        builder = BUILTIN_SPECS[args.spec]
        spec = builder() if args.seed is None else builder(seed=args.seed)
    else:
        path = Path(args.spec)
        if not path.is_file():
            raise CliError("missing_file", f"spec not found: {path} (builtins: {', '.join(BUILTIN_SPECS)})")
        try:
            spec = SynthSpec.from_json(path)
        except (json.JSONDecodeError, TypeError) as exc:
            raise CliError("config", f"{path}: malformed spec ({exc})") from None
        if args.seed is not None:
            spec.seed = args.seed
    ct = write_synthetic(spec, args.out)
    if args.tensor:
        save_tensor(ct, args.tensor)
    _emit({"events": int(ct.counts.sum()), "shape": list(ct.shape), "csv": str(args.out)})
    return 0


def _grid_from_args(args) -> tuple[GridSpec, list[str]]:
    if args.spec:
        path = _require(args.spec, "spec")
        spec = SynthSpec.from_json(path)
        return spec.grid, list(spec.categories)
    if not args.bbox or not args.categories:
        raise CliError("config", "ingest needs --spec, or both --bbox and --categories")
    try:
        lat_min, lat_max, lon_min, lon_max = (float(v) for v in args.bbox.split(","))
    except ValueError:
        raise CliError("config", f"--bbox needs lat_min,lat_max,lon_min,lon_max, got {args.bbox!r}") from None
    grid = GridSpec(lat_min, lat_max, lon_min, lon_max, args.cell_km, args.slot_hours, args.t_start, args.t_end)
    return grid, [c.strip() for c in args.categories.split(",") if c.strip()]


def cmd_ingest(args) -> int:
    src = _require(args.csv, "event csv")
    grid, categories = _grid_from_args(args)
    ct = ingest_csv(src, grid, categories)
    save_tensor(ct, args.out)
    _emit({"shape": list(ct.shape), "dropped": ct.dropped, "tensor": str(args.out)})
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    hp, tcfg = cfg.hyperparams(), cfg.train_config()
    data = _load_data(cfg, hp)
    result = train(data, hp, tcfg)
    meta = {"mode": cfg.mode, "hyperparams": hp.to_dict(), "categories": data.categories,
            "best_epoch": result.best_epoch, "history": result.history, "seed": cfg.seed}
    save_checkpoint(cfg.checkpoint, result.params, meta)
    _emit({"checkpoint": cfg.checkpoint, "best_epoch": result.best_epoch, "history": result.history})
    return 0


def cmd_predict(args) -> int:
    cfg = load_run_config(args)
    hp, data, params = _load_model(cfg)
    t = _target_slot(data, hp, args.target)
    pred = predict_windows(params, data, [t], hp, cfg.mode)[0]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["region", "category", "probability" if cfg.mode == "classification" else "count"])
        for r in range(pred.shape[0]):
            for k, name in enumerate(data.categories):
                w.writerow([r, name, "%.10g" % pred[r, k]])
    finally:
        if args.out:
            out.close()
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    hp = cfg.hyperparams()
    if args.baseline:
        data = _load_data(cfg, hp)
        report = _baseline_report(data, cfg.mode)
    else:
        hp, data, params = _load_model(cfg)
        report = evaluate_model(params, data, ev.horizon_targets(data.windows.test), hp, cfg.mode)
    if args.category_csv:
        report.write_category_csv(args.category_csv)
    print(report.to_json())
    return 0


def _baseline_report(data: ForecastData, mode: str) -> ev.MetricsReport:
    targets = ev.horizon_targets(data.windows.test)
    truth = data.counts[:, targets, :].transpose(1, 0, 2)
    ha = ev.historical_average_baseline(data.counts, data.windows.train)
    if mode == "classification":
        return ev.classification_report(ha.predict_occurrence(len(targets)), truth, data.categories)
    return ev.regression_report(ha.predict_counts(len(targets)), truth, data.categories)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _attention_rows(alpha: np.ndarray, categories):
    mean = Relevance.head_summary(alpha)
    for h in range(mean.shape[0]):
        for i, tgt in enumerate(categories):
            for j, src in enumerate(categories):
                yield [h, tgt, src, "%.10g" % mean[h, i, j]]


def cmd_export_relevance(args) -> int:
    cfg = load_run_config(args)
    hp, data, params = _load_model(cfg)
    t = _target_slot(data, hp, args.target if args.target is not None else int(data.windows.test[0]))
    _, rel = forward(data.window_input(t), params, hp, data.topo, cfg.mode)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["head", "category", "source_category", "mean_attention"]
    written = []
    for layer, alpha in enumerate(rel.spatial):
        path = out / f"attention_spatial_l{layer}.csv"
        _write_rows(path, header, _attention_rows(alpha, data.categories))
        written.append(path.name)
    if args.temporal:
        for layer, alpha in enumerate(rel.temporal):
            path = out / f"attention_temporal_l{layer}.csv"
            _write_rows(path, header, _attention_rows(alpha, data.categories))
            written.append(path.name)
    psi = rel.incidence
    _write_rows(out / "hyperedge_incidence.csv", ["hyperedge", "region", "weight"],
                ([e, r, "%.10g" % psi[e, r]] for e in range(psi.shape[0]) for r in range(psi.shape[1])))
    written.append("hyperedge_incidence.csv")
    _emit({"target_slot": t, "files": written})
    return 0


# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=sorted(MODE_ALIASES))
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")

    p = argparse.ArgumentParser(prog="stshn", description="Crime occurrence forecasting on region grids.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write a synthetic event CSV")
    g.add_argument("spec", help=f"spec JSON file or one of: {', '.join(BUILTIN_SPECS)}")
    g.add_argument("out", help="event CSV to write (a .spec.json sidecar is written next to it)")
    g.add_argument("--tensor", help="also write the count tensor cache here")
    g.set_defaults(func=cmd_gen)

    i = sub.add_parser("ingest", parents=[common], help="bin an event CSV into a tensor cache")
    i.add_argument("csv")
    i.add_argument("out")
    i.add_argument("--spec", help="take grid and categories from a synthetic spec JSON")
    i.add_argument("--bbox", help="lat_min,lat_max,lon_min,lon_max")
    i.add_argument("--categories", help="comma-separated category labels, in tensor order")
    i.add_argument("--cell-km", type=float, default=3.0)
    i.add_argument("--slot-hours", type=float, default=24.0)
    i.add_argument("--t-start", type=float)
    i.add_argument("--t-end", type=float)
    i.set_defaults(func=cmd_ingest)

    t = sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", parents=[common], help="forecast one slot from the preceding window")
    pr.add_argument("--target", type=int, help="slot to forecast (default: the slot after the data)")
    pr.add_argument("--out", help="CSV path (default: stdout)")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", parents=[common], help="test-set metrics as JSON")
    e.add_argument("--baseline", action="store_true", help="score the historical average instead")
    e.add_argument("--category-csv", help="also write per-category F1 here")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-relevance", parents=[common], help="write learned attention and incidence")
    x.add_argument("out_dir")
    x.add_argument("--target", type=int, help="window target slot (default: first test slot)")
    x.add_argument("--temporal", action="store_true", help="also export temporal attention")
    x.set_defaults(func=cmd_export_relevance)
    return p


def _classify(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.kind
    if isinstance(exc, (FileNotFoundError, IsADirectoryError)):
        return "missing_file"
    if isinstance(exc, TrainingDiverged):
        return "diverged"
    if isinstance(exc, (DataError, CheckpointError)):
        return "data"
    if isinstance(exc, ValueError):  # Hyperparams / TrainConfig / SynthSpec validation
        return "config"
    return "internal"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        kind = _classify(exc)
        print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())
