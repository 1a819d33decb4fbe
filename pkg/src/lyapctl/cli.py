"""Command-line entry point: ``lyapctl COMMAND [--config FILE] [--set section.key=value]``.

Every command reads one INI file (sections below), resolves it against the
built-in defaults, and writes its outputs plus a ``*-run.json`` manifest with
the resolved config, its hash and a digest of each output file.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import dataset as dsmod
from . import mlp
from .closed_loop import SimConfig, batch_experiments, simulate, write_trace_csv, write_trace_jsonl
from .dynamics import available_models, estimate_constants, get_model, steady_state
from .exceptions import DivergenceError, LyapctlError
from .roa import (
    bound_report,
    cell_grid,
    estimate_roa,
    save_bitmap,
    write_bitmap_csv,
)
from .solver import IterativeLQRController, LQR1Controller, OSAPController, SolverConfig

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_GATE = 0, 2, 3, 4
OUTPUT_ENV = "LYAPCTL_OUTPUT_DIR"
CONTROLLERS = ("osap", "nn", "lqr1", "ilqr")

# Keys that only carry wall-clock measurements; blanked before hashing.
TIMING_KEYS = frozenset({"solve_ms", "mean_step_ms", "speedup", "wall_s"})


def _solver_defaults():
    out = []
    for f in fields(SolverConfig):
        out.append((f.name, str(f.default), "solver setting"))
    return out


SCHEMA: dict = {
    "model": [
        ("id", "pendulum", f"model id or comma-separated ids; one of {', '.join(available_models())}"),
        ("dt", "", "sampling period override (blank: model default)"),
        ("gravity", "", "pendulum override"),
        ("mass", "", "pendulum override"),
        ("length", "", "pendulum override"),
    ],
    "solver": _solver_defaults(),
    "grid": [
        ("x_lower", "", "state grid lower corner (blank: operating box)"),
        ("x_upper", "", "state grid upper corner (blank: operating box)"),
        ("x_step", "0.1", "state grid step, scalar or per axis"),
        ("r_lower", "", "reference grid lower corner (blank: admissible set)"),
        ("r_upper", "", "reference grid upper corner (blank: admissible set)"),
        ("r_step", "0.1", "reference grid step"),
        ("endpoint_mode", "inclusive", "inclusive or exclusive-upper"),
        ("subsample", "0", "seeded random subset size (0 keeps the full grid)"),
        ("max_failure_fraction", "0.05", "abort when more points fail"),
    ],
    "train": [
        ("hidden", ",".join(map(str, mlp.DEFAULT_HIDDEN)), "hidden widths (blank: no hidden layer)"),
        ("activation", "relu", "relu, tanh or linear"),
        ("dropout_rate", "0.1", "dropout per hidden layer"),
        ("lr0", "0.001", "initial Adam step"),
        ("epochs", "2000", "training epochs"),
        ("batch_size", "256", "minibatch size"),
        ("lr_min", "1e-6", "cosine schedule floor"),
        ("val_fraction", "0.1", "held-out share"),
        ("ladder", "", "';'-separated architectures tried smallest first"),
        ("mse_threshold", "0.1", "ladder stops at the first val MSE at or below this"),
    ],
    "sim": [
        ("controller", "osap", f"comma-separated subset of {', '.join(CONTROLLERS)}"),
        ("x0", "-2.3,5", "initial state"),
        ("r", "", "reference (blank: center of the admissible set)"),
        ("steps", "100", "horizon T"),
        ("safety_scale", "10", "divergence box as a multiple of the operating box"),
        ("gnuplot", "false", "also write a gnuplot script per trace"),
    ],
    "bench": [
        ("thetas", "0.0001,0.001,0.01", "decrease margins compared in the table"),
        ("controllers", ",".join(CONTROLLERS), "controllers in the table"),
        ("count", "100", "initial states per controller"),
        ("init_lower", "-1,-1", "initial-state box lower corner"),
        ("init_upper", "1,1", "initial-state box upper corner"),
        ("steps", "100", "horizon per run"),
        ("min_speedup", "50", "gate: solver/network per-step time ratio"),
        ("trend_slack", "0.02", "gate: relative slack on the PI trend"),
    ],
    "roa": [
        ("controller", "nn", "controller under test"),
        ("cells", "100", "cells per axis"),
        ("horizon", "500", "steps simulated per cell"),
        ("radius", "", "convergence radius (blank: max(sigma, 0.01))"),
    ],
    "bounds": [
        ("density", "201", "grid points per axis for delta and the Lipschitz constants"),
        ("pairs", "2000", "random point pairs for the Lipschitz constants"),
    ],
    "compare": [
        ("controllers", "nn,ilqr", "controllers compared on control effort"),
        ("x0", "", "';'-separated initial states, one per model (blank: 80% of the box)"),
        ("steps", "100", "horizon per run"),
    ],
    "run": [
        ("seed", "0", "seed for subsampling, splits, training and initial-state draws"),
        ("output_dir", "", f"output directory (blank: ${OUTPUT_ENV} or ./lyapctl-out)"),
        ("workers", "1", "process cap for parallel stages"),
        ("formats", "bin,csv", "dataset/bitmap formats written"),
        ("dataset", "", "dataset path (blank: <output>/<tag>-dataset.bin)"),
        ("checkpoint", "", "network path (blank: <output>/<tag>-net.ckpt)"),
    ],
}

# Settings that change where or how fast things run, not what is computed.
UNHASHED = {("run", "output_dir"), ("run", "workers")}


class ConfigError(Exception):
    pass


class GateFailure(Exception):
    pass


# -- config ------------------------------------------------------------------


class RunConfig:
    """Resolved settings: ``values[section][key]`` as strings, with typed getters."""

    def __init__(self, values: dict):
        self.values = values

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        values = {s: {k: d for k, d, _ in keys} for s, keys in SCHEMA.items()}
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except (OSError, configparser.Error) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            for section in parser.sections():
                for key, val in parser.items(section):
                    cls._assign(values, section, key, val)
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"--set expects section.key=value, got {item!r}")
            lhs, val = item.split("=", 1)
            section, key = lhs.split(".", 1)
            cls._assign(values, section.strip(), key.strip(), val)
        return cls(values)

    @staticmethod
    def _assign(values, section, key, val):
        if section not in values:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in values[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        values[section][key] = val.strip()

    def raw(self, section, key) -> str:
        return self.values[section][key]

    def _typed(self, section, key, conv):
        text = self.raw(section, key)
        try:
            return conv(text)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {section}.{key}: {text!r} ({exc})") from None

    def text(self, section, key) -> str:
        return self.raw(section, key)

    def integer(self, section, key) -> int:
        return self._typed(section, key, int)

    def number(self, section, key) -> float:
        return self._typed(section, key, float)

    def flag(self, section, key) -> bool:
        def conv(t):
            low = t.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")

        return self._typed(section, key, conv)

    def floats(self, section, key, optional=False):
        text = self.raw(section, key)
        if optional and not text:
            return None
        return self._typed(section, key, lambda t: [float(v) for v in t.split(",") if v.strip()])

    def names(self, section, key) -> list:
        return [v.strip() for v in self.raw(section, key).split(",") if v.strip()]

    def to_dict(self) -> dict:
        return {s: dict(sorted(kv.items())) for s, kv in self.values.items()}

    def config_hash(self) -> str:
        hashed = {s: {k: v for k, v in kv.items() if (s, k) not in UNHASHED} for s, kv in self.values.items()}
        return hashlib.sha256(json.dumps(hashed, sort_keys=True).encode()).hexdigest()[:16]

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_dict(self.to_dict())
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    # domain objects

    def model_ids(self) -> list:
        ids = self.names("model", "id")
        if not ids:
            raise ConfigError("model.id is empty")
        for mid in ids:
            if mid not in available_models():
                raise ConfigError(f"unknown model {mid!r} in model.id; choose from {available_models()}")
        return ids

    def model(self, model_id):
        overrides = {k: self.number("model", k) for k in ("dt", "gravity", "mass", "length") if self.raw("model", k)}
        try:
            return get_model(model_id, **overrides)
        except TypeError:
            raise ConfigError(f"model {model_id!r} does not accept overrides {sorted(overrides)}") from None

    def solver(self, **replace) -> SolverConfig:
        kw = {}
        for f in fields(SolverConfig):
            text = self.raw("solver", f.name)
            if f.name in ("Qx", "Qu"):
                vals = self.floats("solver", f.name)
                kw[f.name] = vals[0] if len(vals) == 1 else vals
            elif f.type in ("int", int):
                kw[f.name] = self.integer("solver", f.name)
            else:
                kw[f.name] = self._typed("solver", f.name, float) if text else f.default
        kw.update(replace)
        try:
            return SolverConfig(**kw)
        except ValueError as exc:
            raise ConfigError(f"invalid solver config: {exc}") from None

    def theta(self) -> float:
        return self.number("solver", "theta")

    def reference(self, model):
        r = self.floats("sim", "r", optional=True)
        if r is None:
            return 0.5 * (model.ref_lower + model.ref_upper)
        if len(r) != model.m:
            raise ConfigError(f"sim.r needs {model.m} entries for {model.name}")
        return np.array(r)

    def output_dir(self) -> Path:
        path = self.raw("run", "output_dir") or os.environ.get(OUTPUT_ENV) or "lyapctl-out"
        out = Path(path)
        out.mkdir(parents=True, exist_ok=True)
        return out

    def workers(self) -> int:
        w = self.integer("run", "workers")
        if w < 1:
            raise ConfigError("run.workers must be >= 1")
        return w

    def seed(self) -> int:
        return self.integer("run", "seed")


def _tag(model_id: str, theta: float) -> str:
    return f"{model_id}-theta{theta:g}"


def _dataset_path(cfg: RunConfig, out: Path, tag: str) -> Path:
    given = cfg.raw("run", "dataset")
    return Path(given.format(tag=tag)) if given else out / f"{tag}-dataset.bin"


def _checkpoint_path(cfg: RunConfig, out: Path, tag: str) -> Path:
    given = cfg.raw("run", "checkpoint")
    return Path(given.format(tag=tag)) if given else out / f"{tag}-net.ckpt"


def _ext(stem: Path, suffix: str) -> Path:
    # tags contain dots (theta0.01), so Path.with_suffix would truncate them
    return stem.parent / (stem.name + suffix)


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{path} not found; {hint}")
    return path


# -- digests and manifests ---------------------------------------------------


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: ("" if k in TIMING_KEYS else _strip_timing(v)) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def content_digest(path) -> str:
    """SHA-256 of a file with wall-clock fields blanked (CSV columns, JSON keys)."""
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".csv":
        rows = list(csv.reader(io.StringIO(data.decode())))
        if rows:
            drop = {i for i, name in enumerate(rows[0]) if name in TIMING_KEYS}
            rows = [[("" if i in drop else v) for i, v in enumerate(row)] for row in rows]
        data = json.dumps(rows).encode()
    elif path.suffix == ".json":
        data = json.dumps(_strip_timing(json.loads(data)), sort_keys=True).encode()
    elif path.suffix == ".jsonl":
        recs = [_strip_timing(json.loads(line)) for line in data.decode().splitlines() if line.strip()]
        data = json.dumps(recs, sort_keys=True).encode()
    return hashlib.sha256(data).hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _manifest(cfg: RunConfig, out: Path, command: str, stem: str, outputs: list) -> Path:
    ini = out / f"{stem}-{command}-config.ini"
    ini.write_text(cfg.to_ini())
    files = sorted({Path(p).name: Path(p) for p in [*outputs, ini]}.items())
    return _write_json(
        out / f"{stem}-{command}-run.json",
        {
            "command": command,
            "config_hash": cfg.config_hash(),
            "config": cfg.to_dict(),
            "outputs": {name: content_digest(p) for name, p in files},
        },
    )


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- controllers -------------------------------------------------------------


def make_controller(kind: str, cfg: RunConfig, model, out: Path, theta: float = None):
    """Build and fit one of the named controllers for ``model``."""
    theta = cfg.theta() if theta is None else theta
    Qx, Qu = cfg.solver().Qx, cfg.solver().Qu
    if kind == "osap":
        sc = cfg.solver(theta=theta).to_dict()
        return OSAPController(model=model, **sc).fit()
    if kind == "lqr1":
        return LQR1Controller(model=model, Qx=Qx, Qu=Qu).fit()
    if kind == "ilqr":
        return IterativeLQRController(model=model, Qx=Qx, Qu=Qu).fit()
    if kind == "nn":
        path = _require(_checkpoint_path(cfg, out, _tag(model.name, theta)), "run `lyapctl train` first")
        params, _ = mlp.load_checkpoint(path)
        if params.n_state != model.n:
            raise ConfigError(f"{path} was trained for a {params.n_state}-state model")
        return mlp.ImitationNetwork.from_params(params)
    raise ConfigError(f"unknown controller {kind!r}; choose from {CONTROLLERS}")


# -- commands ----------------------------------------------------------------


def _grid_specs(cfg: RunConfig, model):
    def box(key, default):
        vals = cfg.floats("grid", key, optional=True)
        return default if vals is None else np.array(vals)

    mode = cfg.text("grid", "endpoint_mode")
    try:
        xs = dsmod.GridSpec(
            box("x_lower", model.lower), box("x_upper", model.upper), cfg.floats("grid", "x_step"), mode
        )
        rs = dsmod.GridSpec(
            box("r_lower", model.ref_lower), box("r_upper", model.ref_upper), cfg.floats("grid", "r_step"), mode
        )
    except ValueError as exc:
        raise ConfigError(f"invalid grid: {exc}") from None
    if xs.ndim != model.n or rs.ndim != model.m:
        raise ConfigError(f"grid dimensions do not match {model.name} (n={model.n}, m={model.m})")
    return xs, rs


def cmd_dataset(cfg: RunConfig) -> list:
    out = cfg.output_dir()
    formats = cfg.names("run", "formats")
    written = []
    for mid in cfg.model_ids():
        model = cfg.model(mid)
        solver = cfg.solver()
        xs, rs = _grid_specs(cfg, model)
        points = dsmod.generate_grid(xs, rs)
        k = cfg.integer("grid", "subsample")
        if 0 < k < len(points):
            idx = np.sort(np.random.default_rng(cfg.seed()).choice(len(points), size=k, replace=False))
            points = points[idx]
        _log(f"{mid}: labelling {len(points)} points")
        meta = {
            "x_grid": xs.to_dict(),
            "r_grid": rs.to_dict(),
            "grid_size": xs.size() * rs.size(),
            "subsample": k,
            "subsample_seed": cfg.seed(),
        }
        ds = dsmod.build_dataset(
            model, points, solver, workers=cfg.workers(),
            max_failure_fraction=cfg.number("grid", "max_failure_fraction"), metadata=meta,
        )
        tag = _tag(mid, solver.theta)
        files = []
        path = _dataset_path(cfg, out, tag)
        path.parent.mkdir(parents=True, exist_ok=True)
        if "bin" in formats or not formats:
            dsmod.save(ds, path)
            files.append(path)
        if "csv" in formats:
            csv_path = path.parent / (path.name.removesuffix(".bin") + ".csv")
            dsmod.save_csv(ds, csv_path)
            files.append(csv_path)
        lam = np.linalg.eigvalsh(ds.P_matrices) if len(ds) else np.zeros((0, model.n))
        report = {
            "model": mid,
            "weights": {"Qx": solver.Qx, "Qu": solver.Qu, "theta": solver.theta},
            "grid_size": meta["grid_size"],
            "point_count": ds.metadata["point_count"],
            "labelled": len(ds),
            "failure_count": ds.metadata["failure_count"],
            "status_counts": {s: int(np.sum(ds.status == i)) for i, s in enumerate(("optimal", "feasible-suboptimal"))},
            "lambda_min": float(lam[:, 0].min()) if len(lam) else None,
            "lambda_max": float(lam[:, -1].max()) if len(lam) else None,
        }
        files.append(_write_json(out / f"{tag}-dataset-report.json", report))
        files.append(_manifest(cfg, out, "dataset", tag, files))
        written += files
        _log(f"{mid}: {len(ds)} labelled, {report['failure_count']} failed -> {path}")
    return written


def _parse_hidden(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _train_one(cfg: RunConfig, tr, val, hidden: tuple):
    net = mlp.ImitationNetwork(
        n_state=tr.n,
        hidden=hidden,
        activation=cfg.text("train", "activation"),
        dropout_rate=cfg.number("train", "dropout_rate"),
        lr0=cfg.number("train", "lr0"),
        epochs=cfg.integer("train", "epochs"),
        batch_size=cfg.integer("train", "batch_size"),
        lr_min=cfg.number("train", "lr_min"),
        seed=cfg.seed(),
    )
    net.fit_dataset(tr, val)
    return net, net.gap(val)


def cmd_train(cfg: RunConfig) -> list:
    out = cfg.output_dir()
    written = []
    try:
        ladder = [_parse_hidden(t) for t in cfg.raw("train", "ladder").split(";") if t.strip()]
        base = _parse_hidden(cfg.raw("train", "hidden"))
    except ValueError:
        raise ConfigError("train.hidden / train.ladder must be comma-separated integers") from None
    threshold = cfg.number("train", "mse_threshold")
    for mid in cfg.model_ids():
        tag = _tag(mid, cfg.theta())
        ds = dsmod.load(_require(_dataset_path(cfg, out, tag), "run `lyapctl dataset` first"))
        if len(ds) < 2:
            raise ConfigError(f"dataset for {mid} has fewer than two samples")
        tr, val = dsmod.split(ds, cfg.number("train", "val_fraction"), cfg.seed())
        files = []
        if ladder:
            rows, chosen = [], None
            for hidden in ladder:
                net, gap = _train_one(cfg, tr, val, hidden)
                ok = gap.val_mse <= threshold
                rows.append([",".join(map(str, hidden)), repr(gap.val_mse), str(ok).lower()])
                _log(f"{mid}: hidden={hidden} val_mse={gap.val_mse:.4g}")
                chosen = (net, gap, hidden)
                if ok:
                    break
            ladder_csv = out / f"{tag}-ladder.csv"
            with open(ladder_csv, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["hidden", "val_mse", "below_threshold"])
                w.writerows(rows)
            files.append(ladder_csv)
            net, gap, hidden = chosen
        else:
            hidden = base
            net, gap = _train_one(cfg, tr, val, hidden)
        ckpt = _checkpoint_path(cfg, out, tag)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        mlp.save_checkpoint(
            net.params_, ckpt,
            extra={"model": mid, "dataset_hash": ds.metadata.get("solver_config_hash"), "gap": gap.to_dict()},
        )
        loss_csv = out / f"{tag}-loss.csv"
        mlp.write_loss_csv(net.loss_curve_, loss_csv)
        curve = net.loss_curve_
        report = {
            "model": mid,
            "hidden": list(hidden),
            "train_size": len(tr),
            "val_size": len(val),
            "epochs": len(curve),
            "first_val_mse": curve[0]["val_mse"],
            "final_val_mse": curve[-1]["val_mse"],
            "final_train_mse": curve[-1]["train_mse"],
            "gap": gap.to_dict(),
            "mse_threshold": threshold if ladder else None,
            "threshold_met": (gap.val_mse <= threshold) if ladder else None,
        }
        files += [ckpt, loss_csv, _write_json(out / f"{tag}-train-report.json", report)]
        files.append(_manifest(cfg, out, "train", tag, files))
        written += files
        _log(f"{mid}: val_mse {report['first_val_mse']:.4g} -> {report['final_val_mse']:.4g}, checkpoint {ckpt}")
    return written


GNUPLOT = """set datafile separator ','
set key autotitle columnhead
set multiplot layout 3,1
plot {states}
plot {inputs}
plot '{csv}' using 1:{dv} with steps
unset multiplot
"""


def _gnuplot(stem: Path, n: int, p: int) -> Path:
    name = stem.name + ".csv"
    states = ", ".join(f"'{name}' using 1:{2 + i} with lines" for i in range(n))
    inputs = ", ".join(f"'{name}' using 1:{2 + n + i} with steps" for i in range(p))
    path = _ext(stem, ".gp")
    path.write_text(GNUPLOT.format(states=states, inputs=inputs, csv=name, dv=3 + n + p))
    return path


def cmd_simulate(cfg: RunConfig) -> list:
    out = cfg.output_dir()
    written = []
    for mid in cfg.model_ids():
        model = cfg.model(mid)
        tag = _tag(mid, cfg.theta())
        r = cfg.reference(model)
        x0 = cfg.floats("sim", "x0")
        try:
            sim = SimConfig(tuple(x0), tuple(r), cfg.integer("sim", "steps"), True, cfg.number("sim", "safety_scale"))
        except ValueError as exc:
            raise ConfigError(f"invalid [sim]: {exc}") from None
        files, summary = [], {}
        for kind in cfg.names("sim", "controller"):
            ctrl = make_controller(kind, cfg, model, out)
            trace = simulate(model, ctrl, sim)
            stem = out / f"{tag}-{kind}-trace"
            write_trace_csv(trace, _ext(stem, ".csv"))
            write_trace_jsonl(trace, _ext(stem, ".jsonl"))
            files += [_ext(stem, ".csv"), _ext(stem, ".jsonl")]
            if cfg.flag("sim", "gnuplot"):
                files.append(_gnuplot(stem, model.n, model.p))
            summary[kind] = {
                "pi": trace.pi,
                "terminal_error": trace.terminal_error,
                "steps": trace.steps,
                "P_source": trace.P_source,
                "control_effort": float(np.abs(trace.inputs).sum()),
                "mean_step_ms": 1e3 * float(trace.step_time.mean()),
            }
            _log(f"{mid}/{kind}: PI {trace.pi:.4g}, terminal error {trace.terminal_error:.4g}")
        report = {"model": mid, "x0": list(sim.x0), "r": list(sim.r), "controllers": summary}
        files.append(_write_json(out / f"{tag}-simulate-report.json", report))
        files.append(_manifest(cfg, out, "simulate", tag, files))
        written += files
    return written


def _nonincreasing(values, slack) -> bool:
    return all(b <= a * (1 + slack) for a, b in zip(values, values[1:]))


def cmd_bench_table1(cfg: RunConfig, check: bool = False) -> list:
    out = cfg.output_dir()
    mid = cfg.model_ids()[0]
    model = cfg.model(mid)
    thetas = sorted(cfg.floats("bench", "thetas"))
    kinds = cfg.names("bench", "controllers")
    for k in kinds:
        if k not in CONTROLLERS:
            raise ConfigError(f"unknown controller {k!r} in bench.controllers")
    box = (cfg.floats("bench", "init_lower"), cfg.floats("bench", "init_upper"))
    common = dict(
        count=cfg.integer("bench", "count"), init_box=box, seed=cfg.seed(), r=cfg.reference(model),
        steps=cfg.integer("bench", "steps"), workers=cfg.workers(),
    )
    # lqr1 and ilqr do not depend on theta; run them once and repeat the row values.
    fixed = {k: make_controller(k, cfg, model, out) for k in kinds if k in ("lqr1", "ilqr")}
    fixed_stats = batch_experiments(model, fixed, **common) if fixed else {}
    rows = []
    for theta in thetas:
        ctrls = {k: make_controller(k, cfg, model, out, theta) for k in kinds if k in ("osap", "nn")}
        stats = {**batch_experiments(model, ctrls, **common), **fixed_stats} if ctrls else dict(fixed_stats)
        rows.append((theta, stats))
        _log(f"theta={theta:g}: " + ", ".join(f"{k} {stats[k].mean_pi:.4g}" for k in kinds))

    table = out / f"{mid}-table1.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta", *[f"{k}_mean_pi" for k in kinds], *[f"{k}_diverged" for k in kinds]])
        for theta, stats in rows:
            w.writerow([repr(theta), *[repr(stats[k].mean_pi) for k in kinds], *[stats[k].diverged for k in kinds]])

    gates = {}
    if "osap" in kinds:
        pis = [stats["osap"].mean_pi for _, stats in rows]
        gates["osap_pi_nonincreasing_in_theta"] = _nonincreasing(pis, cfg.number("bench", "trend_slack"))
    speedups = []
    if "osap" in kinds and "nn" in kinds:
        speedups = [stats["osap"].mean_step_time / stats["nn"].mean_step_time for _, stats in rows]
        gates["speedup_at_least_min"] = bool(min(speedups) >= cfg.number("bench", "min_speedup"))
    report = {
        "model": mid,
        "thetas": thetas,
        "rows": [{"theta": t, "controllers": [s[k].to_dict() for k in kinds]} for t, s in rows],
        "speedup": speedups,
        "gates": gates,
    }
    files = [table, _write_json(out / f"{mid}-table1-report.json", report)]
    files.append(_manifest(cfg, out, "bench-table1", mid, files))
    if check and not all(gates.values()):
        failed = [k for k, v in gates.items() if not v]
        raise GateFailure(f"gate(s) failed: {', '.join(failed)}")
    return files


def _bounds(cfg: RunConfig, model, out: Path, tag: str):
    ds = dsmod.load(_require(_dataset_path(cfg, out, tag), "run `lyapctl dataset` first"))
    consts = estimate_constants(model, cfg.integer("bounds", "density"), cfg.integer("bounds", "pairs"), cfg.seed())
    ckpt = _checkpoint_path(cfg, out, tag)
    du = dP = 0.0
    if ckpt.exists():
        _, val = dsmod.split(ds, cfg.number("train", "val_fraction"), cfg.seed())
        gap = mlp.measure_gap(mlp.load_checkpoint(ckpt)[0], val)
        du, dP = gap.du_bar, gap.dP_bar
    r = cfg.reference(model)
    x_bar = steady_state(model, r).x_bar
    g_norm = float(np.linalg.norm(model.g(x_bar), 2))
    return bound_report(consts, [ds.P_matrices], cfg.theta(), g_norm, du, dP), ckpt.exists()


def cmd_bounds(cfg: RunConfig) -> list:
    out = cfg.output_dir()
    written = []
    for mid in cfg.model_ids():
        model = cfg.model(mid)
        tag = _tag(mid, cfg.theta())
        rep, with_gap = _bounds(cfg, model, out, tag)
        data = rep.to_dict()
        data["gap_source"] = "checkpoint" if with_gap else "none (network not trained; gaps set to 0)"
        files = [_write_json(out / f"{tag}-bounds.json", data)]
        files.append(_manifest(cfg, out, "bounds", tag, files))
        written += files
        vt = "undefined" if rep.vartheta is None else f"{rep.vartheta:.4g}"
        _log(f"{mid}: sigma {rep.sigma:.4g}, theta_min {rep.theta_min:.4g}, vartheta {vt}")
    return written


def cmd_roa(cfg: RunConfig) -> list:
    out = cfg.output_dir()
    written = []
    formats = cfg.names("run", "formats")
    for mid in cfg.model_ids():
        model = cfg.model(mid)
        tag = _tag(mid, cfg.theta())
        kind = cfg.text("roa", "controller")
        ctrl = make_controller(kind, cfg, model, out)
        if cfg.raw("roa", "radius"):
            radius, source = cfg.number("roa", "radius"), "config"
        elif _dataset_path(cfg, out, tag).exists():
            radius, source = max(_bounds(cfg, model, out, tag)[0].sigma, 1e-2), "max(sigma, 0.01)"
        else:
            radius, source = 1e-2, "0.01 (no dataset for sigma)"
        grid = cell_grid(model.lower, model.upper, cfg.integer("roa", "cells"))
        r = cfg.reference(model)
        roa = estimate_roa(
            model, ctrl, r, grid, cfg.integer("roa", "horizon"), radius, workers=cfg.workers(), controller_name=kind
        )
        stem = out / f"{tag}-roa-{kind}"
        files = []
        if "bin" in formats or not formats:
            save_bitmap(roa, _ext(stem, ".bin"))
            files.append(_ext(stem, ".bin"))
        if "csv" in formats:
            write_bitmap_csv(roa, _ext(stem, ".csv"))
            files.append(_ext(stem, ".csv"))
        x_bar = steady_state(model, r).x_bar
        report = {
            "model": mid,
            "controller": kind,
            "cells": int(roa.membership.size),
            "fraction_inside": roa.fraction_inside,
            "convergence_radius": radius,
            "radius_source": source,
            "steady_state_inside": roa.contains(x_bar),
            "sim_x0_inside": roa.contains(cfg.floats("sim", "x0")) if len(cfg.floats("sim", "x0")) == model.n else None,
        }
        files.append(_write_json(out / f"{tag}-roa-{kind}-report.json", report))
        files.append(_manifest(cfg, out, "roa", tag, files))
        written += files
        _log(f"{mid}/{kind}: {100 * roa.fraction_inside:.1f}% of cells inside")
    return written


def cmd_compare(cfg: RunConfig) -> list:
    out = cfg.output_dir()
    ids = cfg.model_ids()
    kinds = cfg.names("compare", "controllers")
    given = [t for t in cfg.raw("compare", "x0").split(";") if t.strip()]
    if given and len(given) != len(ids):
        raise ConfigError("compare.x0 needs one initial state per model id")
    rows, files = [], []
    for i, mid in enumerate(ids):
        model = cfg.model(mid)
        tag = _tag(mid, cfg.theta())
        r = cfg.reference(model)
        if given:
            try:
                x0 = np.array([float(v) for v in given[i].split(",")])
            except ValueError:
                raise ConfigError(f"bad compare.x0 entry {given[i]!r}") from None
        else:
            x_bar = steady_state(model, r).x_bar
            x0 = x_bar.copy()
            x0[0] = x_bar[0] + 0.8 * (model.upper[0] - x_bar[0])
        sim = SimConfig(tuple(x0), tuple(r), cfg.integer("compare", "steps"), False)
        for kind in kinds:
            ctrl = make_controller(kind, cfg, model, out)
            try:
                trace = simulate(model, ctrl, sim)
            except DivergenceError as exc:
                rows.append([mid, kind, "nan", "nan", "nan", str(exc.step)])
                continue
            path = out / f"{tag}-compare-{kind}-trace.csv"
            write_trace_csv(trace, path)
            files.append(path)
            effort = float(np.abs(trace.inputs).sum())
            rows.append([mid, kind, repr(effort), repr(trace.pi), repr(trace.terminal_error), ""])
    table = out / f"{ids[0] if len(ids) == 1 else 'multi'}-compare.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "controller", "control_effort", "pi", "terminal_error", "diverged_at"])
        w.writerows(rows)
    files.append(table)
    files.append(_manifest(cfg, out, "compare", table.stem.replace("-compare", ""), files))
    for row in rows:
        _log(f"{row[0]}/{row[1]}: effort {float(row[2]):.4g}")
    return files


# -- argument parsing --------------------------------------------------------


def _epilog() -> str:
    lines = ["config keys (section.key = default):"]
    for section, keys in SCHEMA.items():
        for key, default, doc in keys:
            lines.append(f"  {section}.{key} = {default!s:<20} {doc}")
    lines += [
        "",
        f"output directory: run.output_dir, else ${OUTPUT_ENV}, else ./lyapctl-out",
        "exit codes: 0 ok, 2 config error, 3 numeric/solver failure, 4 gate failure (bench --check)",
    ]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one key")
    common.add_argument("--workers", type=int, help="process cap (overrides run.workers)")
    common.add_argument("--output-dir", help="output directory (overrides run.output_dir)")
    common.add_argument("--seed", type=int, help="overrides run.seed")

    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(
        prog="lyapctl", description="Lyapunov-certified predictive control and its network imitation.",
        epilog=_epilog(), formatter_class=fmt,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "dataset": "label a state/reference grid with the joint (u, P) solver",
        "train": "fit the imitation network (optionally over a width ladder)",
        "simulate": "closed-loop traces from sim.x0",
        "roa": "region-of-attraction bitmap on a cell grid",
        "bounds": "sigma, theta_min and vartheta from data and model constants",
        "compare": "control effort of several controllers per model",
        "config": "print the resolved config",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text, epilog=_epilog(), formatter_class=fmt)
    bench = sub.add_parser(
        "bench", parents=[common], help="batch benchmarks", epilog=_epilog(), formatter_class=fmt
    )
    bench.add_argument("table", choices=["table1"], help="benchmark to run")
    bench.add_argument("--check", action="store_true", help="exit 4 when a gate fails")
    return parser


COMMANDS = {
    "dataset": cmd_dataset,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "roa": cmd_roa,
    "bounds": cmd_bounds,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = list(args.set)
    if args.workers is not None:
        overrides.append(f"run.workers={args.workers}")
    if args.output_dir is not None:
        overrides.append(f"run.output_dir={args.output_dir}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    t0 = time.perf_counter()
    try:
        cfg = RunConfig.load(args.config, overrides)
        if args.command == "config":
            sys.stdout.write(cfg.to_ini())
            return EXIT_OK
        if args.command == "bench":
            files = cmd_bench_table1(cfg, check=args.check)
        else:
            files = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        parser.exit(EXIT_CONFIG, f"lyapctl: config error: {exc}\n")
    except GateFailure as exc:
        _log(f"lyapctl: {exc}")
        return EXIT_GATE
    except DivergenceError as exc:
        _log(f"lyapctl: {exc}")
        return EXIT_NUMERIC
    except (LyapctlError, ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        _log(f"lyapctl: {type(exc).__name__}: {exc}")
        return EXIT_NUMERIC
    for f in files:
        print(f)
    _log(f"done in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
