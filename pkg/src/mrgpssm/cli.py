"""Command-line interface: simulate, train, predict, eval, gridsearch, verify.

Exit codes: 0 success, 1 verification failure, 2 bad arguments or config,
3 data/model incompatibility (window does not fit, dimension or length
mismatch).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import (
    MultiScaleConfig,
    PendulumConfig,
    apply_normalization,
    gen_multiscale,
    gen_pendulum,
    normalize,
    read_csv,
    write_csv,
)
from .errors import DataError, DimensionMismatch, WindowTooLong
from .forecast import metrics, predict
from .model import Dataset, default_model, load_model, save_model
from .rng import RngStream
from .training import TrainConfig, backfit
from .verify import results_to_dicts, run_all


def _fail(code: int, message: str):
    print(f"error: {message}", file=sys.stderr)
    sys.exit(code)


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return f"mrgpssm-{__version__}"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, args: argparse.Namespace, inputs: list,
                   outputs: list) -> Path:
    manifest = {
        "config": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "seed": getattr(args, "seed", None),
        "git_describe": _git_describe(),
        "input_digests": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "wall_clock": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return path


def parse_components(spec: str) -> tuple[list[int], list[int]]:
    """'R=30:d=2,R=1:d=2' -> (resolutions [30, 1], dims [2, 2])."""
    resolutions, dims = [], []
    for part in spec.split(","):
        fields = dict(
            kv.split("=", 1) for kv in part.strip().split(":") if "=" in kv
        )
        if "R" not in fields or "d" not in fields:
            raise ValueError(f"component {part!r} must look like 'R=30:d=2'")
        r, d = int(fields["R"]), int(fields["d"])
        if r < 1 or d < 1:
            raise ValueError("R and d must be >= 1")
        resolutions.append(r)
        dims.append(d)
    return resolutions, dims


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    try:
        cfg_doc = json.loads(Path(args.config).read_text()) if args.config else {}
    except (OSError, json.JSONDecodeError) as e:
        _fail(2, f"cannot read config: {e}")
    rng = RngStream(args.seed)
    try:
        if args.kind == "pendulum":
            data = gen_pendulum(PendulumConfig.from_dict(cfg_doc), rng)
            truth = None
        elif args.kind == "multiscale":
            data, ms_truth = gen_multiscale(MultiScaleConfig.from_dict(cfg_doc), rng)
            truth = ms_truth
        else:
            _fail(2, f"unknown kind {args.kind!r} (choose pendulum or multiscale)")
    except (TypeError, ValueError) as e:
        _fail(2, f"bad config: {e}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(data, out)
    outputs = [out]
    if truth is not None:
        truth_path = Path(args.truth_out) if args.truth_out else out.with_suffix(
            ".truth.csv")
        with open(truth_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "fast", "slow", "noise"])
            for i in range(data.T):
                w.writerow([
                    format(i * data.dt, ".17g"),
                    format(truth.components[i, 0], ".17g"),
                    format(truth.components[i, 1], ".17g"),
                    format(truth.noise[i], ".17g"),
                ])
        outputs.append(truth_path)
    if not args.no_plot:
        from .plots import plot_dataset

        outputs.append(plot_dataset(
            data, out.with_suffix(".png"),
            truth=truth.components if truth is not None else None))
    print(f"wrote {', '.join(str(p) for p in outputs)}")
    return 0


# ---------------------------------------------------------------------------
# train


def _train_config_from_args(args, n_components: int) -> TrainConfig:
    return TrainConfig(
        cycles=args.cycles,
        iters_per_component=args.iters,
        batch=args.batch,
        buffer=args.buffer,
        samples=args.samples,
        minibatches_per_iter=args.minibatches,
        lr0=args.lr,
        seed=args.seed,
    )


def cmd_train(args) -> int:
    try:
        raw = read_csv(args.data)
    except DataError as e:
        _fail(2, f"bad dataset: {e}")
    try:
        resolutions, dims = parse_components(args.components)
    except ValueError as e:
        _fail(2, str(e))
    data = normalize(raw)
    cfg = _train_config_from_args(args, len(dims))
    max_rb = max(r * cfg.batch for r in resolutions)
    if data.T < max_rb:
        _fail(3, f"T = {data.T} rows < R*B = {max_rb}; "
                 f"need at least {max_rb} rows for these resolutions")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / "model.json"
    log_path = out_dir / "train_log.csv"
    outputs = [model_path, log_path]
    write_manifest(out_dir, args, [args.data], outputs)
    rng = RngStream(args.seed)
    model = default_model(
        dims=dims, resolutions=resolutions, out_dim=data.out_dim,
        input_dim=data.input_dim, n_inducing=args.inducing,
        rng=rng.child(0), dt=1.0, obs_noise=args.obs_noise_init,
        normalization=data.normalization,
    )
    try:
        trained, records = backfit(model, data, cfg, rng.child(1),
                                   log_path=log_path)
    except WindowTooLong as e:
        _fail(3, str(e))
    save_model(trained, model_path)
    if records and not args.no_plot:
        from .plots import plot_training

        plot_training(records, out_dir / "training_elbo.png")
    finite = [r.elbo for r in records if np.isfinite(r.elbo)]
    if finite:
        print(f"trained {len(dims)} component(s); ELBO first={finite[0]:.4f} "
              f"last={finite[-1]:.4f}; model at {model_path}")
    else:
        print(f"wrote untrained model to {model_path} (no iterations)")
    return 0


# ---------------------------------------------------------------------------
# predict / eval


def cmd_predict(args) -> int:
    model = load_model(args.model)
    try:
        raw = read_csv(args.data)
    except DataError as e:
        _fail(2, f"bad dataset: {e}")
    norm = model.normalization
    data = apply_normalization(raw, norm) if norm else raw
    try:
        pred_n = predict(model, data, S=args.samples, rng=RngStream(args.seed))
    except DimensionMismatch as e:
        _fail(3, str(e))
    pred = pred_n.to_raw(norm)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    d_y = pred.mean.shape[1]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"mean{j + 1}" for j in range(d_y)]
                   + [f"var{j + 1}" for j in range(d_y)])
        for i in range(pred.mean.shape[0]):
            row = [format(i * raw.dt, ".17g")]
            row += [format(v, ".17g") for v in pred.mean[i]]
            row += [format(v, ".17g") for v in pred.var[i]]
            w.writerow(row)
    outputs = [out]
    if not args.no_plot:
        from .plots import plot_prediction

        t = np.arange(raw.T) * raw.dt
        outputs.append(plot_prediction(t, raw.y, pred.mean, pred.var,
                                       out.with_suffix(".png")))
    print(f"wrote {', '.join(str(p) for p in outputs)}")
    return 0


def read_predictions(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.asarray([[float(v) for v in row] for row in reader])
    d_y = sum(1 for h in header if h.startswith("mean"))
    return rows[:, 1:1 + d_y], rows[:, 1 + d_y:1 + 2 * d_y]


def cmd_eval(args) -> int:
    mean, var = read_predictions(args.pred)
    try:
        raw = read_csv(args.data)
    except DataError as e:
        _fail(2, f"bad dataset: {e}")
    if mean.shape[0] != raw.T or mean.shape[1] != raw.out_dim:
        _fail(3, f"prediction shape {mean.shape} does not match data "
                 f"({raw.T}, {raw.out_dim})")
    if args.raw:
        y = raw.y
    else:
        if not args.model:
            _fail(2, "--model is required for normalized metrics "
                     "(or pass --raw)")
        norm = load_model(args.model).normalization
        if not norm:
            _fail(2, "model carries no normalization; use --raw")
        y_std = np.asarray(norm["y_std"])
        y_mean = np.asarray(norm["y_mean"])
        y = (raw.y - y_mean) / y_std
        mean = (mean - y_mean) / y_std
        var = var / y_std**2
    from .forecast import nll, rmse

    result = {"rmse": rmse(mean, y), "nll": nll(mean, var, y)}
    doc = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(doc + "\n")
    print(doc)
    return 0


# ---------------------------------------------------------------------------
# gridsearch


def cmd_gridsearch(args) -> int:
    try:
        grid = sorted({int(v) for v in args.grid.split(",") if v.strip()})
    except ValueError as e:
        _fail(2, f"bad grid: {e}")
    if not grid or any(r < 1 for r in grid):
        _fail(2, "grid must contain integers >= 1")
    try:
        raw = read_csv(args.data)
    except DataError as e:
        _fail(2, f"bad dataset: {e}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid_path = out_dir / "grid.csv"
    long_path = out_dir / "grid_long.csv"
    write_manifest(out_dir, args, [args.data], [grid_path, long_path])
    n_train = int(raw.T * args.train_frac)
    if n_train < 2 or raw.T - n_train < 2:
        _fail(3, f"train fraction {args.train_frac} leaves too few rows")
    cfg = _train_config_from_args(args, 1)
    rows = []
    for r_val in grid:
        if n_train < r_val * cfg.batch:
            _fail(3, f"T_train = {n_train} < R*B = {r_val * cfg.batch} "
                     f"for R = {r_val}")
        train_raw = Dataset(y=raw.y[:n_train], u=raw.u[:n_train], dt=raw.dt)
        test_raw = Dataset(y=raw.y[n_train:], u=raw.u[n_train:], dt=raw.dt)
        train = normalize(train_raw)
        test = apply_normalization(test_raw, train.normalization)
        rng = RngStream(args.seed)
        model = default_model(
            dims=[args.dims], resolutions=[r_val], out_dim=train.out_dim,
            input_dim=train.input_dim, n_inducing=args.inducing,
            rng=rng.child(0), obs_noise=args.obs_noise_init,
            normalization=train.normalization,
        )
        trained, _ = backfit(model, train, cfg, rng.child(1))
        pred = predict(trained, test, S=args.samples, rng=rng.child(2))
        res = metrics(pred, test.y)
        rows.append({"R": r_val, **res})
        print(f"R={r_val}: rmse={res['rmse']:.4f} nll={res['nll']:.4f}")
    with open(grid_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["R", "rmse", "nll"])
        for row in rows:
            w.writerow([row["R"], format(row["rmse"], ".17g"),
                        format(row["nll"], ".17g")])
    with open(long_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["R", "seed", "metric", "value"])
        for row in rows:
            for key in ("rmse", "nll"):
                w.writerow([row["R"], args.seed, key, format(row[key], ".17g")])
    if not args.no_plot:
        from .plots import plot_grid

        plot_grid(rows, out_dir / "gridsearch.png")
    print(f"wrote {grid_path}")
    return 0


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    results = run_all(seed=args.seed, mutate_kernel_rescale=args.mutate_kernel_rescale)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  [{r.detail}]" if r.detail else ""
        print(f"{status} {r.check}: observed {r.observed:.6g} "
              f"(tolerance {r.tolerance}){extra}")
    doc = results_to_dicts(results)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
    n_fail = sum(1 for r in results if not r.passed)
    print(f"{len(results) - n_fail}/{len(results)} checks passed")
    return 1 if n_fail else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mrgpssm",
        description="Multi-resolution GP state-space models: simulate, "
                    "train, predict, evaluate, grid-search, verify.",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    sim.add_argument("--kind", required=True)
    sim.add_argument("--config", default=None, help="JSON config document")
    sim.add_argument("--out", required=True, help="output CSV path")
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--truth-out", default=None)
    sim.add_argument("--no-plot", action="store_true")
    sim.set_defaults(func=cmd_simulate)

    def add_train_opts(q, iters_default):
        q.add_argument("--cycles", type=int, default=12)
        q.add_argument("--iters", type=int, default=iters_default)
        q.add_argument("--batch", type=int, default=50)
        q.add_argument("--buffer", type=int, default=10)
        q.add_argument("--samples", type=int, default=20)
        q.add_argument("--minibatches", type=int, default=20)
        q.add_argument("--lr", type=float, default=0.05)
        q.add_argument("--inducing", type=int, default=50)
        q.add_argument("--obs-noise-init", type=float, default=0.01)
        q.add_argument("--no-plot", action="store_true")

    tr = sub.add_parser("train", help="train a model by backfitting")
    tr.add_argument("--data", required=True)
    tr.add_argument("--components", required=True,
                    help="e.g. 'R=30:d=2,R=1:d=2'")
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--out", required=True, help="output directory")
    add_train_opts(tr, 50)
    tr.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="free-run prediction on a dataset")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True, help="predictions CSV path")
    pr.add_argument("--seed", type=int, required=True)
    pr.add_argument("--samples", type=int, default=100)
    pr.add_argument("--no-plot", action="store_true")
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("eval", help="RMSE and negative log likelihood")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--model", default=None)
    ev.add_argument("--raw", action="store_true",
                    help="metrics in raw units instead of normalized")
    ev.add_argument("--out", default=None)
    ev.set_defaults(func=cmd_eval)

    gs = sub.add_parser("gridsearch", help="single-component models over R")
    gs.add_argument("--data", required=True)
    gs.add_argument("--grid", required=True, help="e.g. '1,5,10,20,30'")
    gs.add_argument("--dims", type=int, default=4)
    gs.add_argument("--seed", type=int, required=True)
    gs.add_argument("--out", required=True, help="output directory")
    gs.add_argument("--train-frac", type=float, default=0.5)
    add_train_opts(gs, 50)
    gs.set_defaults(func=cmd_gridsearch)

    vf = sub.add_parser("verify", help="run the equivalence check suite")
    vf.add_argument("--seed", type=int, default=1)
    vf.add_argument("--out", default=None, help="JSON report path")
    vf.add_argument("--mutate-kernel-rescale", action="store_true",
                    help="deliberately break the kernel rescaling "
                         "(negative control: checks must fail)")
    vf.set_defaults(func=cmd_verify)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
