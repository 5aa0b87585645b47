"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import fileio
from .config import ExperimentConfig, dump_config, load_config, parse_config
from .errors import ConfigError, InvalidArgument, MeshError
from .estimators import METRICS_COLUMNS, write_metrics_csv
from .geometry import (build_cylinder_mesh, build_hemisphere_mesh, build_icosphere_mesh,
                       build_unit_grid_mesh)
from .trainer import load_model, save_model, write_history_csv

log = logging.getLogger("fiberfield")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


# -- data directory ------------------------------------------------------------

def write_generated(outdir: Path, cfg: ExperimentConfig, data: ex.GeneratedData) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    unit = cfg.sampling.time_unit_ms
    fileio.write_obj(outdir / "mesh.obj", data.mesh)
    pd = {"v1": data.basis.v1, "v2": data.basis.v2}
    if data.truth is not None:
        pd.update(a=data.truth.a, e1=data.truth.e1, e2=data.truth.e2, fiber_true=data.truth.fibers)
    for md in data.maps:
        pd[f"time_true_{md.map_id}"] = md.vertex_times * unit
        fileio.write_samples_csv(outdir / f"map_{md.map_id:02d}.csv", md.map_id,
                                 md.positions, md.times_ms)
    fileio.write_vtk(outdir / "truth.vtk", data.mesh, pd)
    with open(outdir / "sources.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["role", "map_id", "vertex"])
        for md in data.maps:
            w.writerow(["train", md.map_id, md.source])
        w.writerow(["hold_out", -1, data.hold_out])
    dump_config(cfg, outdir / "config.resolved.toml")


def read_generated(datadir: Path, cfg: ExperimentConfig, need_truth: bool = True) -> ex.GeneratedData:
    mesh = fileio.load_mesh(datadir / "mesh.obj")
    basis = ex.build_basis(cfg, mesh)
    files = sorted(datadir.glob("map_*.csv"))
    if len(files) != cfg.sampling.maps:
        raise ConfigError("sampling.maps", f"config expects {cfg.sampling.maps} maps, "
                                           f"{datadir} has {len(files)}")
    maps, sources, hold = [], {}, -1
    src_file = datadir / "sources.csv"
    if src_file.exists():
        with open(src_file, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["role"] == "hold_out":
                    hold = int(row["vertex"])
                else:
                    sources[int(row["map_id"])] = int(row["vertex"])
    for f in files:
        mid, pos, t = fileio.read_samples_csv(f)
        maps.append(ex.MapData(mid, sources.get(mid, -1), np.full(mesh.n_vertices, np.nan), pos, t))
    total = sum(len(m.times_ms) for m in maps)
    if total != cfg.sampling.total:
        raise ConfigError("sampling.total", f"config expects {cfg.sampling.total} samples, "
                                            f"map files hold {total}")
    truth = ex.build_truth(cfg, mesh, basis) if need_truth else None
    return ex.GeneratedData(mesh, basis, truth, maps, hold)


# -- commands ------------------------------------------------------------------

def cmd_mesh_gen(args) -> int:
    kind = args.kind
    if kind == "grid":
        mesh = build_unit_grid_mesh(args.n)
    elif kind == "cylinder":
        mesh = build_cylinder_mesh()
    elif kind == "hemisphere":
        mesh = build_hemisphere_mesh(args.subdivisions)
    else:
        mesh = build_icosphere_mesh(args.subdivisions)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    fileio.save_mesh(out, mesh)
    print(f"wrote {out} ({mesh.n_vertices} vertices, {mesh.n_triangles} triangles)")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.output or Path(cfg.output) / "data")
    data = ex.generate(cfg)
    write_generated(out, cfg, data)
    print(f"wrote {len(data.maps)} maps ({cfg.sampling.total} samples) to {out}; "
          f"T_max = {data.meta['t_max_ms']:.4g} ms")
    return EXIT_OK


def _train(cfg: ExperimentConfig, data: ex.GeneratedData, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.resolved.toml")
    model = ex.train_model(cfg, data)
    save_model(out / "model.bin", model)
    write_history_csv(out / "history.csv", model.history)
    return model


def cmd_train(args) -> int:
    cfg = _config(args)
    data = read_generated(Path(args.data), cfg, need_truth=False)
    out = Path(args.output or cfg.output)
    model = _train(cfg, data, out)
    last = model.history[-1] if model.history else {}
    if model.diverged:
        print(f"training diverged; last finite state written to {out}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"trained {cfg.training.iterations} iterations; final loss {last.get('total', float('nan')):.4g}")
    return EXIT_OK


def _evaluate(cfg, data, model, out: Path) -> list[dict]:
    ev = ex.evaluate_model(cfg, data, model)
    write_metrics_csv(out / "metrics.csv", ev.rows)
    fileio.write_vtk(out / "fields.vtk", data.mesh, ev.point_data)
    return ev.rows


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    data = read_generated(Path(args.data), cfg, need_truth=cfg.truth.kind != "none")
    model = load_model(args.model)
    out = Path(args.output or Path(args.model).parent)
    out.mkdir(parents=True, exist_ok=True)
    for r in _evaluate(cfg, data, model, out):
        _print_row(r)
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _config(args)
    data = read_generated(Path(args.data), cfg, need_truth=cfg.truth.kind != "none")
    out = Path(args.output or Path(cfg.output) / "baseline")
    out.mkdir(parents=True, exist_ok=True)
    ev, rep = ex.run_baseline(cfg, data)
    write_metrics_csv(out / "metrics.csv", ev.rows)
    fileio.write_vtk(out / "fields.vtk", data.mesh, ev.point_data)
    if not rep.unique.all():
        print(f"warning: tensor fit is non-unique at {int((~rep.unique).sum())} vertices",
              file=sys.stderr)
    for r in ev.rows:
        _print_row(r)
    return EXIT_OK


def _fmt_tag(v) -> str:
    return f"{v:g}".replace("+", "")


def sweep_settings(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """One config per (maps, alpha_e, noise, seed) combination."""
    sw = cfg.sweep
    alphas = sw.alpha_e or [cfg.training.alpha_e]
    noises = sw.noise_ms or [cfg.sampling.noise_ms]
    out = []
    for m in sw.maps:
        for ae in alphas:
            for nz in noises:
                for seed in sw.seeds:
                    c = cfg.replace(
                        seed=seed,
                        sampling=dataclasses.replace(cfg.sampling, maps=m, noise_ms=nz),
                        training=dataclasses.replace(cfg.training, alpha_e=ae, seed=seed))
                    tag = f"m{m}_ae{_fmt_tag(ae)}_n{_fmt_tag(nz)}_s{seed}"
                    out.append((tag, c.validate()))
    return out


def run_setting(tag: str, cfg: ExperimentConfig, root: str, baseline: bool) -> list[dict]:
    out = Path(root) / tag
    data = ex.generate(cfg)
    write_generated(out / "data", cfg, data)
    model = _train(cfg, data, out)
    rows = _evaluate(cfg, data, model, out)
    if baseline:
        ev, _ = ex.run_baseline(cfg, data)
        rows += ev.rows
    for r in rows:
        r["experiment"] = tag
        r["diverged"] = model.diverged
    return rows


def cmd_sweep(args) -> int:
    cfg = _config(args)
    root = Path(args.output or cfg.output)
    root.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, root / "config.resolved.toml")
    settings = sweep_settings(cfg)
    workers = args.workers or cfg.sweep.workers
    rows = []
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futs = [pool.submit(run_setting, t, c, str(root), cfg.sweep.baseline) for t, c in settings]
            for f in futs:
                rows += f.result()
    else:
        for t, c in settings:
            rows += run_setting(t, c, str(root), cfg.sweep.baseline)
            print(f"finished {t}", flush=True)
    cols = METRICS_COLUMNS + ("diverged",)
    with open(root / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(settings)} runs to {root}")
    return EXIT_DIVERGED if any(r.get("diverged") for r in rows) else EXIT_OK


def _print_row(r: dict) -> None:
    print(", ".join(f"{k}={r[k]:.4g}" if isinstance(r.get(k), float) else f"{k}={r.get(k, '')}"
                    for k in METRICS_COLUMNS if k in r))


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed,
                          training=dataclasses.replace(cfg.training, seed=args.seed))
    if getattr(args, "maps", None) is not None:
        cfg = cfg.replace(sampling=dataclasses.replace(cfg.sampling, maps=args.maps))
    if getattr(args, "iterations", None) is not None:
        cfg = cfg.replace(training=dataclasses.replace(cfg.training, iterations=args.iterations))
    return cfg.validate()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fiberfield", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mesh-gen", help="write a test-domain mesh (OBJ or VTK)")
    m.add_argument("--kind", choices=("grid", "cylinder", "hemisphere", "icosphere"), default="grid")
    m.add_argument("--n", type=int, default=35, help="grid points per side")
    m.add_argument("--subdivisions", type=int, default=3)
    m.add_argument("-o", "--output", required=True)
    m.set_defaults(func=cmd_mesh_gen)

    def common(sp, data=False, model=False):
        sp.add_argument("-c", "--config", help="experiment TOML file")
        sp.add_argument("-o", "--output", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--maps", type=int)
        if data:
            sp.add_argument("--data", required=True, help="directory written by 'generate'")
        if model:
            sp.add_argument("--model", required=True, help="model.bin written by 'train'")

    g = sub.add_parser("generate", help="simulate activation maps and samples")
    common(g)
    g.set_defaults(func=cmd_generate)
    t = sub.add_parser("train", help="fit activation and conductivity networks")
    common(t, data=True)
    t.add_argument("--iterations", type=int)
    t.set_defaults(func=cmd_train)
    e = sub.add_parser("evaluate", help="fiber error, fit and unseen-map RMSE")
    common(e, data=True, model=True)
    e.set_defaults(func=cmd_evaluate)
    b = sub.add_parser("baseline", help="residual-minimizing tensor fit from map gradients")
    common(b, data=True)
    b.set_defaults(func=cmd_baseline)
    s = sub.add_parser("sweep", help="generate, train and evaluate a grid of settings")
    common(s)
    s.add_argument("--workers", type=int)
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, MeshError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InvalidArgument as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
