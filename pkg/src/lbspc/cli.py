"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import LbspcError

EXIT_USAGE = 1
EXIT_DATA = 2

MESH_SUFFIXES = (".off", ".obj", ".ply")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def add_argument(self, *names, **kwargs):
        # options without help text would otherwise hide their default
        if names and names[0].startswith("-") and kwargs.get("help") is None:
            kwargs["help"] = "(default: %(default)s)"
        return super().add_argument(*names, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _default_seed() -> int:
    env = os.environ.get("LBSPC_SEED")
    try:
        return int(env) if env else 0
    except ValueError:
        return 0


def _digest(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(q for q in p.iterdir() if q.is_file()) if p.is_dir() else [p]
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def write_manifest(out, args, inputs=()) -> Path:
    """RunManifest JSON next to an artifact: command, resolved config, seed,
    input digests and tool version."""
    out = Path(out)
    target = out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()
           if k not in ("func", "config")}
    manifest = {
        "command": args.command,
        "argv": getattr(args, "_argv", None),
        "config": cfg,
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _digest(p) for p in inputs},
        "version": __version__,
    }
    manifest["config"].pop("_argv", None)
    target.write_text(json.dumps(manifest, indent=2, default=str))
    return target


def _read_config(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _mesh_files(path):
    p = Path(path)
    if p.is_dir():
        files = sorted(q for q in p.iterdir() if q.suffix.lower() in MESH_SUFFIXES)
        return files
    return [p]


def _policy(args):
    from .laplacian import BandwidthPolicy

    if args.t is not None:
        return BandwidthPolicy("fixed", t_value=args.t, radius=args.radius)
    return BandwidthPolicy("auto", radius=args.radius)


def _spectrum_of(mesh, args, want_vectors=False, k=None):
    from .laplacian import build_localized, build_mesh_laplacian
    from .spectrum import lowest_spectrum

    builder = build_mesh_laplacian if args.laplacian == "mesh" else build_localized
    pair = builder(mesh, _policy(args))
    return lowest_spectrum(pair, k or args.k, want_vectors=want_vectors, seed=args.seed,
                           part_id=mesh.part_id)


def _load_spectra(path, args):
    """Spectra from a CSV file or from a mesh file/directory."""
    from .mesh import load_mesh
    from .spectrum import read_spectra_csv

    p = Path(path)
    if p.is_file() and p.suffix.lower() == ".csv":
        return read_spectra_csv(p)
    return [_spectrum_of(load_mesh(f), args) for f in _mesh_files(p)]


def _rows(sigs, k=None):
    from .permtest import stack_spectra

    return stack_spectra(sigs, k)


# ---------------------------------------------------------------- commands

def cmd_spectrum(args):
    from .mesh import load_mesh
    from .spectrum import normalize_spectrum, weyl_area_estimate, write_spectra_csv

    sigs = []
    for path in args.meshes:
        for f in _mesh_files(path):
            sig = _spectrum_of(load_mesh(f), args)
            if args.normalize:
                mesh = load_mesh(f)
                sig = normalize_spectrum(sig, mesh.area if args.normalize == "area" else weyl_area_estimate(sig))
            sigs.append(sig)
    out = Path(args.out or "spectrum.csv")
    write_spectra_csv(sigs, out)
    write_manifest(out, args, args.meshes)
    return 0


def cmd_simulate(args):
    from .mesh import loop_subdivide, write_off
    from .partgen import (CylinderSpec, GroundTruth, NoiseSpec, add_noise, make_cylinder,
                          make_icosphere, make_prototype)
    from .harness import prototype_defect

    out = Path(args.out or "parts")
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        seed = args.seed + i
        truth = GroundTruth(None, [], 0.0, seed)
        if args.kind == "cylinder":
            mesh = make_cylinder(CylinderSpec(delta=args.delta, seed=seed))
        elif args.kind == "sphere":
            mesh = make_icosphere(args.subdivisions)
        else:
            mesh, truth = make_prototype(seed=seed)
            if args.defect:
                from .partgen import apply_defect

                mesh, truth = apply_defect(mesh, prototype_defect(mesh, args.defect, args.defect_count,
                                                                  args.defect_magnitude))
                truth.seed = seed
        if args.noise != "none" and args.sigma > 0:
            mesh = add_noise(mesh, NoiseSpec(kind=args.noise, sigma=args.sigma, sigma1_sq=args.sigma1_sq,
                                             ranges=tuple(args.ranges), seed=seed + 1_000_003))
        if args.subdivide:
            mesh = loop_subdivide(mesh, args.subdivide)
        name = f"part_{i:05d}"
        write_off(mesh, out / f"{name}.off")
        truth.to_json(out / f"{name}.json")
    write_manifest(out, args)
    return 0


def cmd_permtest(args):
    from .permtest import max_t_test, ranksum_test

    a = _rows(_load_spectra(args.a, args), args.p)
    b = _rows(_load_spectra(args.b, args), args.p)
    fn = ranksum_test if args.stat == "ranksum" else max_t_test
    res = fn(a, b, budget=args.perms, seed=args.seed, keep_null=bool(args.null_csv))
    out = Path(args.out or "permtest.json")
    res.to_json(out)
    if args.null_csv:
        res.write_null_csv(args.null_csv)
    write_manifest(out, args, [args.a, args.b])
    print(json.dumps(res.as_dict()))
    return 0


def cmd_phase1(args):
    from .phase1 import PhaseIConfig, phase1_scan

    x = _rows(_load_spectra(args.reference, args))
    cfg = PhaseIConfig(args.fap, tuple(args.eig_range), args.perms, args.seed)
    res = phase1_scan(x, cfg)
    out = Path(args.out or "phase1.json")
    res.to_json(out)
    write_manifest(out, args, [args.reference])
    print(json.dumps(res.as_dict()))
    return 0


def _chart_config(args, m0):
    from .dfewma import ChartConfig

    return ChartConfig(m0=m0, alpha=args.alpha, ewma_weight=args.ewma_weight, w_min=args.wmin,
                       w_max=args.wmax, p=args.p, limit_permutations=args.perms, seed=args.seed)


def cmd_phase2(args):
    from .dfewma import start_chart, step
    from .mesh import load_mesh

    ref = _rows(_load_spectra(args.reference, args))
    cfg = _chart_config(args, ref.shape[0])
    state = start_chart(ref, cfg)
    out = Path(args.out or "chart.csv")
    seen = set()

    def poll():
        p = Path(args.stream)
        if p.is_file() and p.suffix.lower() == ".csv":
            from .spectrum import read_spectra_csv

            items = [(s.part_id, s) for s in read_spectra_csv(p)]
        else:
            items = [(str(f), f) for f in _mesh_files(p)]
        fresh = [(k, v) for k, v in items if k not in seen]
        for k, v in fresh:
            seen.add(k)
            sig = v if not isinstance(v, Path) else _spectrum_of(load_mesh(v), args)
            step(state, sig)
            print(f"n={state.n} T={state.last_statistic:.4f} limit={state.last_limit:.4f} "
                  f"alarm={int(state.alarmed)}", file=sys.stderr)
            if state.alarmed:
                return True
        return False

    alarmed = poll()
    while args.watch and not alarmed:
        time.sleep(args.poll_interval)
        alarmed = poll()
    state.write_log(out)
    write_manifest(out, args, [args.reference, args.stream])
    return 0


def cmd_runlength(args):
    from .dfewma import PoolScenario, run_length_experiment
    from .harness import BankSpec, build_bank

    common = dict(part=args.part, noise=args.noise, sigma=args.sigma, sigma1_sq=args.sigma1_sq,
                  ranges=tuple(args.ranges), k=max(args.p, 15), subdivide=args.subdivide,
                  with_icp=args.statistic == "icp")
    ic = build_bank(BankSpec(count=args.ic_bank, delta=0.0, seed=args.seed, **common),
                    cache_dir=args.cache)
    oc = None
    if args.scenario != "ic":
        oc = build_bank(BankSpec(count=args.oc_bank, delta=args.delta, seed=args.seed + 1,
                                 defect=args.defect, **common), cache_dir=args.cache)
    pick = (lambda b: b.icp) if args.statistic == "icp" else (lambda b: b.spectra)
    scenario = PoolScenario(pick(ic), None if oc is None else pick(oc), name=args.scenario)
    cfg = _chart_config(args, args.m0)
    if args.statistic == "icp":
        from dataclasses import replace

        cfg = replace(cfg, p=1)
    rep = run_length_experiment(scenario, cfg, args.reps, seed=args.seed, workers=args.threads)
    out = Path(args.out or "runlength.json")
    rep.to_json(out)
    rep.to_csv(out.with_suffix(".csv"))
    write_manifest(out, args)
    print(json.dumps({k: v for k, v in rep.as_dict().items() if k != "config"}))
    return 0


def cmd_diagnose(args):
    from .icp import deviation_map, icp_register
    from .mesh import load_mesh

    nominal, part = load_mesh(args.nominal), load_mesh(args.part)
    res = icp_register(part, nominal, restarts=args.restarts, seed=args.seed)
    dev = deviation_map(res, part, nominal)
    out = Path(args.out or "deviation")
    dev.to_csv(out.with_suffix(".csv"))
    dev.to_ply(part.with_vertices(res.transform.apply(part.vertices)), out.with_suffix(".ply"))
    write_manifest(out.with_suffix(".csv"), args, [args.nominal, args.part])
    print(json.dumps({"objective": res.objective, "iterations": res.iterations,
                      "converged": res.converged, "max_deviation": float(dev.deviation.max())}))
    return 0


def cmd_distances(args):
    from .distances import SpectralBasis, diffusion_distance, gps_commute_biharmonic, heat_kernel, qq_export
    from .mesh import load_mesh

    def values(path, seed):
        mesh = load_mesh(path)
        sig = _spectrum_of(mesh, args, want_vectors=True)
        basis = SpectralBasis.from_signature(sig, mesh)
        if args.source is not None:
            if not 0 <= args.source < mesh.n_vertices:
                raise ValueError(f"source vertex {args.source} outside 0..{mesh.n_vertices - 1}")
            j = np.arange(mesh.n_vertices)
            i = np.full_like(j, args.source)
        else:
            rng = np.random.default_rng(seed)
            pairs = rng.integers(0, mesh.n_vertices, size=(args.pairs, 2))
            i, j = pairs[:, 0], pairs[:, 1]
        if args.kind == "heat":
            return heat_kernel(basis, i, j, args.time)
        if args.kind == "diffusion":
            return diffusion_distance(basis, i, j, args.time)
        g, dc, db = gps_commute_biharmonic(basis, i, j)
        return {"gps": g, "commute": dc, "biharmonic": db}[args.kind]

    va, vb = values(args.a, args.seed), values(args.b, args.seed)
    out = Path(args.out or "qq.csv")
    qq_export(va, vb, out)
    write_manifest(out, args, [args.a, args.b])
    return 0


def cmd_replay(args):
    manifest = json.loads(Path(args.manifest).read_text())
    argv = manifest.get("argv")
    if not argv:
        raise UsageError("manifest has no recorded argv")
    return main(argv)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    seed = _default_seed()
    p = _Parser(prog="lbspc", description="Laplace-Beltrami spectrum SPC toolkit",
                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, spectral=True):
        sp.add_argument("--config", help="key=value file of defaults (flags override)")
        sp.add_argument("--seed", type=int, default=seed, help="seed (env LBSPC_SEED)")
        sp.add_argument("--out", help="output path")
        if spectral:
            sp.add_argument("--k", type=int, default=15, help="eigenvalues computed per part")
            sp.add_argument("--t", type=float, default=None, help="fixed kernel bandwidth (default: mean edge^2)")
            sp.add_argument("--radius", type=float, default=None, help="truncation radius (default: 6 sqrt(t))")
            sp.add_argument("--laplacian", choices=["localized", "mesh"], default="localized")

    def chart(sp):
        sp.add_argument("--alpha", type=float, default=0.005)
        sp.add_argument("--ewma-weight", type=float, default=0.01)
        sp.add_argument("--wmin", type=int, default=1)
        sp.add_argument("--wmax", type=int, default=10)
        sp.add_argument("--p", type=int, default=15, help="eigenvalues monitored")
        sp.add_argument("--perms", type=int, default=1000, help="relabelings per step")

    fmt = argparse.ArgumentDefaultsHelpFormatter
    sp = sub.add_parser("spectrum", help="mesh(es) -> spectrum CSV", formatter_class=fmt)
    sp.add_argument("meshes", nargs="+")
    sp.add_argument("--normalize", choices=["area", "weyl"], default=None)
    common(sp)
    sp.set_defaults(func=cmd_spectrum)

    sp = sub.add_parser("simulate", help="generate synthetic parts", formatter_class=fmt)
    sp.add_argument("--kind", choices=["cylinder", "prototype", "sphere"], default="cylinder")
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--delta", type=float, default=0.0)
    sp.add_argument("--subdivisions", type=int, default=4)
    sp.add_argument("--noise", choices=["isotropic", "spatial", "none"], default="isotropic")
    sp.add_argument("--sigma", type=float, default=0.05)
    sp.add_argument("--sigma1-sq", type=float, default=None)
    sp.add_argument("--ranges", type=float, nargs=3, default=[2.6, 2.6, 16.7])
    sp.add_argument("--defect", choices=["chip", "protrusion"], default=None)
    sp.add_argument("--defect-count", type=int, default=20)
    sp.add_argument("--defect-magnitude", type=float, default=0.5)
    sp.add_argument("--subdivide", type=int, default=0)
    common(sp, spectral=False)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("permtest", help="two-sample permutation test", formatter_class=fmt)
    sp.add_argument("a")
    sp.add_argument("b")
    sp.add_argument("--stat", choices=["ranksum", "maxt"], default="ranksum")
    sp.add_argument("--p", type=int, default=None, help="leading eigenvalues used")
    sp.add_argument("--perms", type=int, default=10000, help="Monte Carlo budget")
    sp.add_argument("--null-csv", default=None)
    common(sp)
    sp.set_defaults(func=cmd_permtest)

    sp = sub.add_parser("phase1", help="Phase I check of a reference sample", formatter_class=fmt)
    sp.add_argument("reference")
    sp.add_argument("--fap", type=float, default=0.05)
    sp.add_argument("--eig-range", type=int, nargs=2, default=[2, 15])
    sp.add_argument("--perms", type=int, default=1000)
    common(sp)
    sp.set_defaults(func=cmd_phase1)

    sp = sub.add_parser("phase2", help="monitor a stream against a reference", formatter_class=fmt)
    sp.add_argument("reference")
    sp.add_argument("stream")
    sp.add_argument("--watch", action="store_true", help="poll the stream directory for new parts")
    sp.add_argument("--poll-interval", type=float, default=2.0)
    common(sp)
    chart(sp)
    sp.set_defaults(func=cmd_phase2)

    sp = sub.add_parser("runlength", help="run-length experiment", formatter_class=fmt)
    sp.add_argument("--scenario", choices=["ic", "barrel", "defect"], default="ic")
    sp.add_argument("--part", choices=["cylinder", "prototype"], default="cylinder")
    sp.add_argument("--delta", type=float, default=0.0)
    sp.add_argument("--defect", choices=["chip", "protrusion"], default=None)
    sp.add_argument("--statistic", choices=["lb", "icp"], default="lb")
    sp.add_argument("--reps", type=int, default=200)
    sp.add_argument("--m0", type=int, default=100)
    sp.add_argument("--ic-bank", type=int, default=400)
    sp.add_argument("--oc-bank", type=int, default=200)
    sp.add_argument("--noise", choices=["isotropic", "spatial", "none"], default="isotropic")
    sp.add_argument("--sigma", type=float, default=0.05)
    sp.add_argument("--sigma1-sq", type=float, default=None)
    sp.add_argument("--ranges", type=float, nargs=3, default=[2.6, 2.6, 16.7])
    sp.add_argument("--subdivide", type=int, default=0)
    sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    sp.add_argument("--cache", default=None, help="directory for simulated banks")
    common(sp, spectral=False)
    chart(sp)
    sp.set_defaults(func=cmd_runlength)

    sp = sub.add_parser("diagnose", help="ICP deviation map", formatter_class=fmt)
    sp.add_argument("nominal")
    sp.add_argument("part")
    sp.add_argument("--restarts", type=int, default=1)
    common(sp, spectral=False)
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("distances", help="Q-Q table of spectral distances", formatter_class=fmt)
    sp.add_argument("a")
    sp.add_argument("b")
    sp.add_argument("--kind", choices=["heat", "diffusion", "gps", "commute", "biharmonic"], default="heat")
    sp.add_argument("--time", type=float, default=100.0, help="diffusion time t")
    sp.add_argument("--pairs", type=int, default=10000)
    sp.add_argument("--source", type=int, default=None, help="use all values from this vertex instead of random pairs")
    common(sp)
    sp.set_defaults(func=cmd_distances, k=50)

    sp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    sp.add_argument("manifest")
    sp.set_defaults(func=cmd_replay)
    return p


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        values = _read_config(cfg_path)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        for key, raw in values.items():
            if key not in known:
                raise UsageError(f"unknown config key {key!r}")
            act = known[key]
            if act.nargs in ("+", "*") or isinstance(act.nargs, int):
                val = [act.type(x) if act.type else x for x in raw.split()]
            elif act.type is not None:
                val = act.type(raw)
            elif isinstance(act, argparse._StoreTrueAction):
                val = raw.lower() in ("1", "true", "yes")
            else:
                val = raw
            sub.set_defaults(**{key: val})
        args = parser.parse_args(argv)
    args._argv = list(argv)
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        return int(args.func(args) or 0)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"lbspc: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LbspcError as exc:
        print(f"lbspc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"lbspc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
