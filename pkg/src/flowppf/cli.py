"""Command-line interface.

Every command writes its outputs atomically, places a run manifest
``<output>.manifest.json`` next to the primary output, and reports failures
as a JSON object ``{code, message, context}`` on stderr with exit codes
0 (success), 2 (argument), 3 (data/model), 4 (numeric / non-convergence).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import shutil
import sys
import tempfile
import time
from dataclasses import asdict
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .errors import ArgumentError, DataError, FlowPPFError, NonConvergenceError, NumericError
from .flow import FlowConfig, ImnfModel
from .gmm import Gmm, fit_em
from .grid import Dataset, load_network, solve_pf_batch, generate_dataset
from .ppf import (DensityGrid, GridSpec, bus_dims, estimate_bus_density, fit_linear_baseline,
                  fit_piecewise_linear_baseline, fit_reference, jsd, linear_bus_mixture,
                  reference_samples, scenario_target, tvd)
from .sampling import lss_scenarios, mc_scenarios
from .train import (DatasetSource, PfSource, Schedule, Surrogate, SurrogateSource, TrainConfig,
                    fit_normalization, train_imnf, train_surrogate, write_trace)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message, prog=self.prog)


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, int(args.threads))
    env = os.environ.get("FLOWPPF_THREADS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise ArgumentError(f"FLOWPPF_THREADS must be an integer, got {env!r}") from None


# -- file helpers -------------------------------------------------------------

def digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Outputs:
    """Collects outputs in a scratch directory and moves them into place on commit."""

    def __init__(self):
        self._tmp = Path(tempfile.mkdtemp(prefix="flowppf-"))
        self._pending: list[tuple[Path, Path]] = []

    def path(self, final: str | Path) -> Path:
        final = Path(final)
        scratch = self._tmp / f"{len(self._pending)}_{final.name}"
        self._pending.append((scratch, final))
        return scratch

    def commit(self) -> list[Path]:
        done = []
        for scratch, final in self._pending:
            if scratch.exists():
                if final.parent and not final.parent.exists():
                    final.parent.mkdir(parents=True, exist_ok=True)
                shutil.move(str(scratch), str(final))
                done.append(final)
        self.discard()
        return done

    def discard(self) -> None:
        shutil.rmtree(self._tmp, ignore_errors=True)


def _write_json(path: Path, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def _load_gmm(path: str) -> Gmm:
    return Gmm.from_json(_read_json(path))


def _load_model(path: str) -> ImnfModel:
    return ImnfModel.from_json(_read_json(path))


def _read_matrix(path: str) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return rows[0], data.reshape(-1, len(rows[0]))


# -- commands -----------------------------------------------------------------
# Each command takes (args, outputs) and returns a dict merged into the manifest.

def cmd_fit_gmm(args, out: Outputs) -> dict:
    head, data = _read_matrix(args.samples)
    cols = list(range(len(head)))
    if args.columns == "injections" or (args.columns == "auto" and head and head[0].startswith("p_")
                                        and any(h.startswith("vm_") for h in head)):
        cols = [j for j, h in enumerate(head) if h.startswith(("p_", "q_"))]
    elif args.columns == "states":
        cols = [j for j, h in enumerate(head) if h.startswith(("vm_", "va_"))]
    if not cols:
        raise DataError(f"{args.samples}: no columns selected")
    g = fit_em(data[:, cols], args.k, restarts=args.restarts, seed=args.seed, k_max=args.k_max)
    _write_json(out.path(args.out), g.to_json())
    return {"k": g.n_components, "columns": [head[j] for j in cols]}


def cmd_solve_pf(args, out: Outputs) -> dict:
    net = load_network(args.net)
    head, data = _read_matrix(args.inj)
    want = [f"p_{i}" for i in net.pq_ids] + [f"q_{i}" for i in net.pq_ids]
    missing = [c for c in want if c not in head]
    if missing:
        raise DataError(f"{args.inj}: missing injection columns {missing}")
    w = data[:, [head.index(c) for c in want]]
    res = solve_pf_batch(net, w, args.tol, args.max_iter)
    bad = np.flatnonzero(~res.converged)
    if len(bad):
        raise NonConvergenceError(f"{len(bad)} of {len(w)} rows did not converge",
                                  rows=bad[:20].tolist(), mismatch=res.mismatch[bad[:20]].tolist())
    pq = net.pq_index
    ds = Dataset(net.pq_ids, w, np.concatenate([res.vm[:, pq], res.va[:, pq]], axis=1))
    path = out.path(args.out)
    ds.to_csv(path)
    return {"rows": len(w), "max_iterations": int(res.iterations.max()) if len(w) else 0}


def cmd_gen_data(args, out: Outputs) -> dict:
    net = load_network(args.net)
    g = _load_gmm(args.gmm)
    ds = generate_dataset(net, g, args.n, args.seed, args.tol, args.max_iter, threads=_threads(args))
    ds.to_csv(out.path(args.out))
    return {"rows": len(ds), "rejected": ds.rejected}


def cmd_train_surrogate(args, out: Outputs) -> dict:
    ds = Dataset.from_csv(args.data)
    sur = train_surrogate(ds, steps=args.steps, lr=args.lr, batch=args.batch, seed=args.seed,
                          val_fraction=args.val_fraction, max_val_mae=args.max_val_mae)
    _write_json(out.path(args.out), sur.to_json())
    return {"surrogate": sur.meta}


def _trace_path(model_out: str) -> Path:
    p = Path(model_out)
    return p.with_name(p.stem + ".trace.csv")


def cmd_train(args, out: Outputs) -> dict:
    net = load_network(args.net)
    g = _load_gmm(args.gmm)
    if args.source == "pf":
        source = PfSource(net, g)
    elif args.source == "surrogate":
        if not args.surrogate:
            raise ArgumentError("--source surrogate needs --surrogate FILE")
        source = SurrogateSource(Surrogate.from_json(_read_json(args.surrogate)), g)
    else:
        if not args.data:
            raise ArgumentError("--source dataset needs --data FILE")
        source = DatasetSource(Dataset.from_csv(args.data))
    preset = TrainConfig.pf_task if args.preset == "pf" else TrainConfig.ppf_task
    overrides = {"omega": args.omega, "steps": args.steps, "seed": args.seed, "source": args.source,
                 "checkpoint_every": args.checkpoint_every}
    if args.batch:
        overrides["batch"] = args.batch
    if args.lr:
        base = preset()
        overrides["schedule"] = (Schedule("constant", lr=args.lr) if base.schedule.kind == "constant"
                                 else Schedule("circular", lr_max=args.lr, lr_min=base.schedule.lr_min,
                                               period=base.schedule.period))
    cfg = preset(**overrides)
    if args.init:
        model = _load_model(args.init)
        if model.pq_ids != net.pq_ids:
            raise DataError("initial model was built for different PQ buses")
    else:
        fc = FlowConfig(n_pq=net.n_pq, n_sfcp=args.n_sfcp, n_sf=args.n_sf, bins=args.bins,
                        bound=args.bound, conditioner=args.conditioner, hidden=list(args.hidden),
                        seed=args.seed)
        model = ImnfModel.for_network(net, fc, fit_normalization(source, args.norm_samples, args.seed))
    result = train_imnf(model, source, cfg)
    _write_json(out.path(args.out), model.to_json())
    write_trace(result.trace, out.path(_trace_path(args.out)))
    return {"train_config": asdict(cfg), "flow_config": asdict(model.config),
            "final_loss": result.trace[-1].loss if result.trace else None}


def _grid_for(args, fallback: Callable[[], GridSpec]) -> GridSpec:
    if args.ref:
        ref = DensityGrid.from_csv(args.ref)
        return GridSpec(float(ref.vm[0]), float(ref.vm[-1]), float(ref.va[0]), float(ref.va[-1]),
                        len(ref.vm), len(ref.va))
    return fallback()


def _bus_position(pq_ids: list[int], bus_id: int) -> int:
    if bus_id not in pq_ids:
        raise ArgumentError(f"bus {bus_id} is not a PQ bus (PQ ids {pq_ids})")
    return pq_ids.index(bus_id)


def cmd_estimate(args, out: Outputs) -> dict:
    model = _load_model(args.model)
    g = _load_gmm(args.gmm)
    i = model.bus_position(args.bus)
    target = scenario_target(g, i)
    if args.sampler == "lss":
        sc = lss_scenarios(target, args.t, args.seed, kind=args.qmc)
    else:
        sc = mc_scenarios(target, args.t, args.seed)

    def auto() -> GridSpec:
        own, rest = bus_dims(model.n_pq, i)
        w = g.sample(2000, np.random.default_rng([args.seed, 0xA11]))
        v, _ = model.forward(w[:, own], w[:, rest], np.full(len(w), i))
        fit = Gmm(np.ones(1), v.mean(axis=0), np.cov(v.T) + 1e-12 * np.eye(2))
        return GridSpec.around(fit, args.grid, sigmas=5.0)

    spec = _grid_for(args, auto)
    t0 = time.perf_counter()
    dens = estimate_bus_density(model, g, i, sc, spec)
    runtime = time.perf_counter() - t0
    dens.to_csv(out.path(args.out))
    if args.scenarios_out:
        n = model.n_pq
        ids = model.pq_ids
        _, rest = bus_dims(n, i)
        names = [f"p_{j}" for j in ids] + [f"q_{j}" for j in ids]
        sc.columns = [names[j] for j in rest]
        sc.to_csv(out.path(args.scenarios_out))
    return {"mass": dens.mass, "runtime_s": runtime, "method": f"imnf-{args.sampler}", "T": args.t,
            "bus": args.bus}


def cmd_baseline(args, out: Outputs) -> dict:
    ds = Dataset.from_csv(args.data)
    g = _load_gmm(args.gmm)
    i = _bus_position(ds.pq_ids, args.bus)
    t0 = time.perf_counter()
    if args.kind == "linear":
        mix = linear_bus_mixture(fit_linear_baseline(ds), g, i)
    else:
        mix = fit_piecewise_linear_baseline(ds, g).bus_mixture(i)
    spec = _grid_for(args, lambda: GridSpec.around(mix, args.grid))
    dens = DensityGrid.of_gmm(mix, spec)
    runtime = time.perf_counter() - t0
    dens.to_csv(out.path(args.out))
    return {"mass": dens.mass, "runtime_s": runtime, "method": args.kind, "T": None, "bus": args.bus}


def cmd_reference(args, out: Outputs) -> dict:
    net = load_network(args.net)
    g = _load_gmm(args.gmm)
    i = _bus_position(net.pq_ids, args.bus)
    vs, ds = reference_samples(net, g, i, args.n, args.seed, threads=_threads(args))
    ref = fit_reference(vs, args.k, seed=args.seed)
    dens = DensityGrid.of_gmm(ref, GridSpec.around(ref, args.grid))
    dens.to_csv(out.path(args.out))
    if args.mixture_out:
        _write_json(out.path(args.mixture_out), ref.to_json())
    if args.data_out:
        ds.to_csv(out.path(args.data_out))
    return {"k": ref.n_components, "mass": dens.mass, "rejected": ds.rejected}


def _sidecar(path: str) -> dict:
    p = Path(str(path) + ".manifest.json")
    if p.exists():
        try:
            return json.loads(p.read_text()).get("result", {})
        except (json.JSONDecodeError, AttributeError):
            return {}
    return {}


def cmd_evaluate(args, out: Outputs) -> dict:
    est = DensityGrid.from_csv(args.est)
    ref = DensityGrid.from_csv(args.ref)
    meta = _sidecar(args.est)
    rep = {
        "bus": args.bus if args.bus is not None else meta.get("bus"),
        "method": args.method or meta.get("method", "unknown"),
        "T": args.t if args.t is not None else meta.get("T"),
        "jsd": jsd(est, ref),
        "tvd": tvd(est, ref),
        "mass": est.mass,
        # wall-clock figures would break bitwise reproducibility; opt in with --timing
        "runtime_s": meta.get("runtime_s") if args.timing else None,
    }
    _write_json(out.path(args.out), rep)
    return {"report": rep}


# -- manifests and replay -------------------------------------------------------

INPUT_ARGS = {
    "fit-gmm": ["samples"], "solve-pf": ["net", "inj"], "gen-data": ["net", "gmm"],
    "train-surrogate": ["data"], "train": ["net", "gmm", "surrogate", "data", "init"],
    "estimate": ["model", "gmm", "ref"], "baseline": ["data", "gmm", "ref"],
    "evaluate": ["est", "ref"], "reference": ["net", "gmm"],
}
OUTPUT_ARGS = {
    "estimate": ["out", "scenarios_out"], "reference": ["out", "mixture_out", "data_out"],
}


def _inputs(args) -> dict[str, str]:
    found = {}
    for name in INPUT_ARGS.get(args.command, []):
        path = getattr(args, name, None)
        if path:
            if not Path(path).is_file():
                raise ArgumentError(f"--{name.replace('_', '-')}: no such file {path!r}")
            found[name] = str(Path(path).resolve())
    return found


def _config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


def _manifest(args, inputs: dict, written: list[Path], result: dict, elapsed: float) -> dict:
    return {
        "tool": "flowppf", "version": __version__, "command": args.command,
        "config": _config(args), "seed": getattr(args, "seed", None),
        "inputs": {k: {"path": p, "sha256": digest(p)} for k, p in inputs.items()},
        "outputs": {str(p.resolve()): digest(p) for p in written},
        "result": result, "wall_time_s": elapsed,
    }


def _execute(args) -> tuple[list[Path], dict]:
    inputs = _inputs(args)
    outs = [str(Path(getattr(args, a)).resolve()) for a in OUTPUT_ARGS.get(args.command, ["out"])
            if getattr(args, a, None)]
    clash = set(outs) & set(inputs.values())
    if clash:
        raise ArgumentError(f"output would overwrite an input: {sorted(clash)}")
    out = Outputs()
    t0 = time.perf_counter()
    try:
        result = args.func(args, out)
        written = out.commit()
    except BaseException:
        out.discard()
        raise
    elapsed = time.perf_counter() - t0
    man = _manifest(args, inputs, written, result, elapsed)
    _write_json(Path(str(Path(args.out)) + ".manifest.json"), man)
    return written, man


def cmd_replay(args) -> dict:
    man = _read_json(args.manifest)
    if man.get("tool") != "flowppf":
        raise DataError(f"{args.manifest}: not a run manifest")
    for name, rec in man.get("inputs", {}).items():
        if not Path(rec["path"]).is_file():
            raise DataError(f"input {name} missing: {rec['path']}")
        if digest(rec["path"]) != rec["sha256"]:
            raise DataError(f"input {name} changed since the recorded run: {rec['path']}")
    cfg = dict(man["config"])
    command = cfg["command"]
    work = Path(tempfile.mkdtemp(prefix="flowppf-replay-"))
    try:
        remap = {}
        for a in OUTPUT_ARGS.get(command, ["out"]):
            if cfg.get(a):
                new = work / Path(cfg[a]).name
                remap[str(Path(cfg[a]).resolve())] = new
                cfg[a] = str(new)
        ns = argparse.Namespace(**cfg)
        ns.func = COMMANDS[command]
        _execute(ns)
        # derived outputs (e.g. the loss trace) live next to their primary output
        for orig in man["outputs"]:
            if orig not in remap:
                remap[orig] = work / Path(orig).name
        mismatched = [orig for orig, h in man["outputs"].items()
                      if not remap[orig].exists() or digest(remap[orig]) != h]
    finally:
        shutil.rmtree(work, ignore_errors=True)
    rep = {"manifest": str(Path(args.manifest).resolve()), "command": command,
           "outputs": len(man["outputs"]), "identical": not mismatched, "mismatched": mismatched}
    print(json.dumps(rep, sort_keys=True))
    if mismatched:
        raise NumericError("replay did not reproduce the recorded outputs", mismatched=mismatched)
    return rep


COMMANDS: dict[str, Callable] = {
    "fit-gmm": cmd_fit_gmm, "solve-pf": cmd_solve_pf, "gen-data": cmd_gen_data,
    "train-surrogate": cmd_train_surrogate, "train": cmd_train, "estimate": cmd_estimate,
    "baseline": cmd_baseline, "evaluate": cmd_evaluate, "reference": cmd_reference,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowppf", description="Analytical probabilistic power flow with invertible flows.")
    p.add_argument("--version", action="version", version=f"flowppf {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=COMMANDS.get(name))
        return sp

    s = add("fit-gmm", "fit a Gaussian mixture to CSV samples")
    s.add_argument("--samples", required=True)
    s.add_argument("--k", type=int, default=0, help="components; 0 selects by BIC")
    s.add_argument("--k-max", type=int, default=8)
    s.add_argument("--restarts", type=int, default=3)
    s.add_argument("--columns", choices=["auto", "all", "injections", "states"], default="auto")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = add("solve-pf", "Newton-Raphson solves for a CSV of injections")
    s.add_argument("--net", required=True)
    s.add_argument("--inj", required=True)
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--max-iter", type=int, default=30)
    s.add_argument("--out", required=True)

    s = add("gen-data", "sample injections and solve them exactly")
    s.add_argument("--net", required=True)
    s.add_argument("--gmm", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--max-iter", type=int, default=30)
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("--out", required=True)

    s = add("train-surrogate", "fit the learned power-flow surrogate")
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, default=3000)
    s.add_argument("--lr", type=float, default=3e-3)
    s.add_argument("--batch", type=int, default=128)
    s.add_argument("--val-fraction", type=float, default=0.2)
    s.add_argument("--max-val-mae", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = add("train", "train the invertible flow")
    s.add_argument("--net", required=True)
    s.add_argument("--gmm", required=True)
    s.add_argument("--source", choices=["surrogate", "pf", "dataset"], default="pf")
    s.add_argument("--surrogate", default=None)
    s.add_argument("--data", default=None)
    s.add_argument("--init", default=None, help="continue from this checkpoint (fine-tuning)")
    s.add_argument("--conditioner", choices=["fnn", "gat"], default="fnn")
    s.add_argument("--preset", choices=["pf", "ppf"], default="pf")
    s.add_argument("--omega", type=float, default=0.5)
    s.add_argument("--steps", type=int, default=5000)
    s.add_argument("--batch", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--n-sfcp", type=int, default=4)
    s.add_argument("--n-sf", type=int, default=4)
    s.add_argument("--bins", type=int, default=8)
    s.add_argument("--bound", type=float, default=4.0)
    s.add_argument("--hidden", type=int, nargs="+", default=[32, 32])
    s.add_argument("--norm-samples", type=int, default=2000)
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = add("estimate", "per-bus voltage density from a trained flow")
    s.add_argument("--model", required=True)
    s.add_argument("--gmm", required=True)
    s.add_argument("--bus", type=int, required=True, help="PQ bus id")
    s.add_argument("--sampler", choices=["lss", "mc"], default="lss")
    s.add_argument("--qmc", choices=["sobol", "halton"], default="sobol")
    s.add_argument("--t", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grid", type=int, default=200)
    s.add_argument("--ref", default=None, help="copy grid axes from this density CSV")
    s.add_argument("--scenarios-out", default=None)
    s.add_argument("--out", required=True)

    s = add("baseline", "linear or piecewise-linear pushforward density")
    s.add_argument("--kind", choices=["linear", "plinear"], required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--gmm", required=True)
    s.add_argument("--bus", type=int, required=True)
    s.add_argument("--grid", type=int, default=200)
    s.add_argument("--ref", default=None)
    s.add_argument("--out", required=True)

    s = add("evaluate", "JSD / TVD report between two density grids")
    s.add_argument("--est", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--bus", type=int, default=None)
    s.add_argument("--method", default=None)
    s.add_argument("--t", type=int, default=None)
    s.add_argument("--timing", action="store_true", help="include the estimate's wall-clock runtime")
    s.add_argument("--out", required=True)

    s = add("reference", "Monte-Carlo reference density for one bus")
    s.add_argument("--net", required=True)
    s.add_argument("--gmm", required=True)
    s.add_argument("--bus", type=int, required=True)
    s.add_argument("--n", type=int, default=2500)
    s.add_argument("--k", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grid", type=int, default=200)
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("--mixture-out", default=None)
    s.add_argument("--data-out", default=None)
    s.add_argument("--out", required=True)

    s = sub.add_parser("replay", help="re-run a manifest and verify outputs are bitwise identical")
    s.add_argument("manifest")
    s.set_defaults(func=None)
    return p


def _fail(exc: FlowPPFError) -> int:
    ctx = {k: (v if isinstance(v, (str, int, float, bool, type(None), list, dict)) else repr(v))
           for k, v in exc.context.items() if k not in ("checkpoint", "trace")}
    sys.stderr.write(json.dumps({"code": exc.exit_code, "message": exc.message,
                                 "error": type(exc).__name__, "context": ctx}, sort_keys=True) + "\n")
    return exc.exit_code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "replay":
            cmd_replay(args)
        else:
            _execute(args)
        return 0
    except FlowPPFError as exc:
        return _fail(exc)
    except FileNotFoundError as exc:
        return _fail(ArgumentError(f"no such file: {exc.filename}"))
    except (KeyError, ValueError) as exc:
        return _fail(DataError(f"malformed input: {exc}"))


if __name__ == "__main__":
    sys.exit(main())
