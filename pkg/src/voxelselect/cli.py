"""Command-line front end for simulation, fitting, selection and baselines.

Every subcommand reads its inputs read-only, writes all artifacts (CSV
tables, volume files, grayscale PGM slices) into the --out directory and
drops a provenance.json there with the exact argv, resolved options, seed
and library versions, so a run can be repeated byte for byte.  Exit codes:
0 success, 2 usage error, 3 input/data error, 4 numerical failure; on
failure an error.json record is written next to the other artifacts when
the output directory is available.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys

import numpy as np
import scipy

from . import __version__, _core
from .volume import (
    VoxelGrid,
    ScalarMap,
    Parcellation,
    VolumeFormatError,
    read_volume,
    write_volume,
    read_dataset_manifest,
    write_dataset_manifest,
    write_pgm,
)
from .deform import write_displacements
from .model import GroupParams, Hyperparams, Network
from .samplers import ChainConfig, SamplerError, run_chain, saem_fit, sa_displacements
from .evidence import (
    EvidenceError,
    PipelineStageError,
    RegionEvidence,
    posterior_mode_pipeline,
    calibrate_penalty,
    compare_parcellations,
    chib_exact_su,
)
from .randthresh import FitError, estimate_count
from .baseline import t_map, p_values, adjust_pvalues, permutation_maxT, cluster_size_test
from . import simulate as sim


class UsageError(Exception):
    """Invalid flag combination (mode/subcommand mismatch and the like)."""


_NUMERICAL_ERRORS = (SamplerError, EvidenceError, PipelineStageError, FitError,
                     FloatingPointError, np.linalg.LinAlgError)
_DATA_ERRORS = (OSError, VolumeFormatError, ValueError, KeyError,
                json.JSONDecodeError)


# --- option plumbing ---------------------------------------------------------


def _parse_config(path) -> dict:
    """Line-based `key = value` config file; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{ln}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise UsageError(f"{path}:{ln}: empty key")
            out[key.replace("-", "_")] = value
    return out


def _apply_config(args, overrides: dict, argv: list[str]):
    """Fill options from the config file; explicit flags win."""
    known = vars(args)
    for key, text in overrides.items():
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
        flag = "--" + key.replace("_", "-")
        if flag in argv or any(a.startswith(flag + "=") for a in argv):
            continue
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        setattr(args, key, value)


def _write_provenance(args, argv):
    options = {}
    for key, val in vars(args).items():
        if key in ("config",):
            pass
        if isinstance(val, (np.integer, np.floating)):
            val = val.item()
        options[key] = val if isinstance(
            val, (int, float, str, bool, list, type(None))) else str(val)
    record = {
        "command": args.command,
        "argv": list(argv),
        "options": options,
        "seed": args.seed,
        "backend": _core.backend(),
        "versions": {
            "voxelselect": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    with open(os.path.join(args.out, "provenance.json"), "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)


def _chain_config(args) -> ChainConfig:
    return ChainConfig(
        burn_in=args.burn_in, samples=args.samples,
        rw_sigma=args.rw_sigma, seed=args.seed,
        omega=getattr(args, "omega", None),
    )


def _load_manifest(path, need_parcellation=False):
    subjects, parc, raw = read_dataset_manifest(path)
    if need_parcellation and parc is None:
        raise ValueError(f"manifest {path} carries no parcellation")
    return subjects, parc, raw


def _parse_gamma(text, n_regions) -> Network:
    if text is None:
        return Network(np.ones(n_regions, dtype=int))
    values = [int(v) for v in text.split(",")]
    if len(values) != n_regions:
        raise ValueError(
            f"gamma has {len(values)} entries for {n_regions} regions")
    return Network(np.asarray(values))


def _slice_pgm(path, smap: ScalarMap) -> bool:
    """Middle-slice grayscale image; rank-1 maps have nothing to draw."""
    arr = smap.as_array()
    if arr.ndim == 1:
        return False
    if arr.ndim == 3:
        arr = arr[arr.shape[0] // 2]
    write_pgm(path, arr)
    return True


def _out(args, name) -> str:
    return os.path.join(args.out, name)


# --- subcommand handlers -----------------------------------------------------


def _cmd_simulate(args):
    if args.kind == "sparse":
        y, active = sim.gen_sparse_means(args.n, args.active, seed=args.seed)
        write_volume(_out(args, "y.vol"), ScalarMap(VoxelGrid((args.n,)), y))
        np.savetxt(_out(args, "active.csv"), active, fmt="%d",
                   header="index", comments="")
        return
    if args.kind == "1d":
        subjects, truth, ds = sim.gen_1d(seed=args.seed)
        parc = None
        write_displacements(_out(args, "displacements.vol"), ds)
    elif args.kind in ("disc", "spheres"):
        subjects, truth, _, parc = sim.gen_grid_phantom(args.kind,
                                                        seed=args.seed)
    else:
        raise UsageError(f"simulate does not support kind {args.kind!r}")
    eff_paths, var_paths = [], []
    for i, s in enumerate(subjects):
        eff, var = f"sub{i:03d}_effects.vol", f"sub{i:03d}_variances.vol"
        write_volume(_out(args, eff), s.effects)
        write_volume(_out(args, var), s.variances)
        eff_paths.append(eff)
        var_paths.append(var)
    write_volume(_out(args, "truth.vol"), truth)
    parc_path = None
    if parc is not None:
        parc_path = "labels.vol"
        write_volume(_out(args, parc_path), parc)
    write_dataset_manifest(_out(args, "manifest.json"), eff_paths, var_paths,
                           parcellation_path=parc_path,
                           extra={"truth": "truth.vol", "kind": args.kind})
    _slice_pgm(_out(args, "truth.pgm"), truth)


def _check_su_mode(args, allowed):
    if args.mode not in allowed:
        raise UsageError(
            f"mode {args.mode!r} is not valid for {args.command} "
            f"(expected one of {allowed})")
    if args.mode != "no-SU" and getattr(args, "omega", None) is None:
        raise UsageError(f"mode {args.mode!r} requires --omega")
    if args.mode == "no-SU":
        args.omega = None


def _cmd_fit(args):
    _check_su_mode(args, ("no-SU", "posterior-mode-SU"))
    subjects, parc, _ = _load_manifest(args.manifest, need_parcellation=True)
    gamma = _parse_gamma(args.gamma, parc.region_count)
    theta, trace = saem_fit(subjects, parc, gamma, Hyperparams(),
                            _chain_config(args))
    with open(_out(args, "theta.json"), "w") as fh:
        fh.write(theta.to_json())
    trace.to_csv(_out(args, "trace.csv"))


def _cmd_sample(args):
    _check_su_mode(args, ("no-SU", "posterior-mode-SU"))
    subjects, parc, _ = _load_manifest(args.manifest, need_parcellation=True)
    gamma = _parse_gamma(args.gamma, parc.region_count)
    trace = run_chain(subjects, parc, gamma, Hyperparams(),
                      _chain_config(args))
    trace.to_csv(_out(args, "trace.csv"))
    mu_map = ScalarMap(parc.grid, trace.mu_mean)
    write_volume(_out(args, "mu_mean.vol"), mu_map)
    _slice_pgm(_out(args, "mu_mean.pgm"), mu_map)


def _cmd_sa(args):
    subjects, parc, _ = _load_manifest(args.manifest, need_parcellation=True)
    with open(args.theta) as fh:
        theta = GroupParams.from_json(fh.read())
    rng = np.random.default_rng(args.seed)
    ds = sa_displacements(subjects, theta, parc, rng, omega=args.omega,
                          steps=args.steps, rw_sigma=args.rw_sigma)
    write_displacements(_out(args, "displacements.vol"), ds)


def _cmd_evidence(args):
    _check_su_mode(args, ("no-SU", "exact-SU"))
    subjects, parc, _ = _load_manifest(args.manifest, need_parcellation=True)
    gamma = _parse_gamma(args.gamma, parc.region_count)
    res = chib_exact_su(subjects, parc, gamma, Hyperparams(),
                        _chain_config(args), base_iters=args.base_iters,
                        cap=args.cap, repeats=args.repeats)
    with open(_out(args, "evidence.json"), "w") as fh:
        json.dump({"mode": args.mode, "gamma": gamma.gamma.tolist(),
                   "log_m": res.log_m, "std": res.std, "runs": res.runs},
                  fh, indent=1)


def _paint_regions(parc: Parcellation, per_region) -> ScalarMap:
    return ScalarMap(parc.grid, np.asarray(per_region)[parc.labels])


def _cmd_select(args):
    _check_su_mode(args, ("no-SU", "posterior-mode-SU"))
    subjects, parc, _ = _load_manifest(args.manifest, need_parcellation=True)
    report = posterior_mode_pipeline(subjects, parc, Hyperparams(),
                                     _chain_config(args), mode=args.mode,
                                     c=args.penalty)
    with open(_out(args, "report.csv"), "w") as fh:
        fh.write(report.to_csv())
    with open(_out(args, "selection.json"), "w") as fh:
        json.dump({"gamma_hat": report.gamma_hat.tolist(),
                   "c": report.c, "mode": report.mode}, fh, indent=1)
    prob_map = _paint_regions(parc, [e.P_tilde for e in report.regions])
    write_volume(_out(args, "prob_map.vol"), prob_map)
    _slice_pgm(_out(args, "prob_map.pgm"), prob_map)


def _read_report_csv(path) -> list[RegionEvidence]:
    regions = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "region,P_tilde,eta_hat,B,LR,D":
            raise ValueError(f"{path} is not a selection report")
        for line in fh:
            j, p, eta, b, lr, d = line.strip().split(",")
            regions.append(RegionEvidence(
                int(j), 0.0, 0.0, float(lr), float(d), float(b),
                float(b), float(p), float(eta)))
    return regions


def _cmd_calibrate_penalty(args):
    if len(args.reports) != len(args.truths):
        raise UsageError("need one truth file per report")
    reports = [_read_report_csv(p) for p in args.reports]
    truths = [np.loadtxt(p, dtype=int, ndmin=1).astype(bool)
              for p in args.truths]
    c_star, c_grid, R = calibrate_penalty(reports, truths)
    np.savetxt(_out(args, "calibration.csv"),
               np.column_stack([c_grid, R]), delimiter=",",
               header="c,misclassified", comments="", fmt="%.10g")
    with open(_out(args, "calibration.json"), "w") as fh:
        json.dump({"c_star": c_star,
                   "misclassified_at_c_star": int(R[np.argmin(R)])},
                  fh, indent=1)


def _cmd_compare_parcellations(args):
    subjects, _, _ = _load_manifest(args.manifest)
    parcs = []
    for path in args.parcellations:
        parc = read_volume(path)
        if not isinstance(parc, Parcellation):
            raise ValueError(f"{path} is not a label volume")
        parcs.append(parc)
    rows = compare_parcellations(subjects, parcs, Hyperparams(),
                                 _chain_config(args))
    with open(_out(args, "odds.csv"), "w") as fh:
        fh.write("index,path,log_evidence,posterior_prob,log_odds_vs_best\n")
        for row, path in zip(rows, args.parcellations):
            fh.write(f"{row['index']},{path},{row['log_evidence']:.10g},"
                     f"{row['posterior_prob']:.10g},"
                     f"{row['log_odds_vs_best']:.10g}\n")


def _cmd_randthresh(args):
    vol = read_volume(args.input)
    if not isinstance(vol, ScalarMap):
        raise ValueError(f"{args.input} is not a scalar volume")
    y = vol.values
    res = estimate_count(y, sigma=args.sigma, window=args.window,
                         kappa=args.kappa)
    sigma2_hat = None
    if res.sigma2 is not None:  # plug-in variance at the selected count
        sigma2_hat = float(res.sigma2[np.flatnonzero(res.ks == res.k_hat)[0]])
    with open(_out(args, "threshold.json"), "w") as fh:
        json.dump({"k_hat": int(res.k_hat), "threshold": float(res.threshold),
                   "window": res.window, "sigma2": sigma2_hat}, fh, indent=1)
    with open(_out(args, "eta.csv"), "w") as fh:
        fh.write(res.eta_csv())
    np.savetxt(_out(args, "selected.csv"), np.sort(res.selected), fmt="%d",
               header="index", comments="")
    mask = np.zeros(y.shape[0])
    mask[res.selected] = 1.0
    write_volume(_out(args, "mask.vol"), ScalarMap(vol.grid, mask))


def _cmd_baseline(args):
    subjects, _, _ = _load_manifest(args.manifest)
    smap = t_map(subjects)
    write_volume(_out(args, "tmap.vol"), ScalarMap(
        smap.grid, np.nan_to_num(smap.values, posinf=0.0, neginf=0.0)))
    if args.procedure in ("bonferroni", "bh"):
        res = adjust_pvalues(p_values(smap), args.procedure, args.alpha)
    elif args.procedure == "maxt":
        res = permutation_maxT(subjects, alpha=args.alpha, reps=args.reps,
                               seed=args.seed)
    elif args.procedure == "cluster-size":
        res = cluster_size_test(subjects, fwer_alpha=args.alpha,
                                reps=args.reps, seed=args.seed)
        with open(_out(args, "clusters.csv"), "w") as fh:
            fh.write(res.clusters_csv())
    else:
        raise UsageError(f"unknown procedure {args.procedure!r}")
    np.savetxt(_out(args, "rejected.csv"), np.sort(res.rejected), fmt="%d",
               header="index", comments="")
    with open(_out(args, "result.json"), "w") as fh:
        json.dump({"procedure": res.procedure, "alpha": res.alpha,
                   "threshold": float(res.threshold),
                   "critical_size": res.critical_size,
                   "rejections": int(res.rejected.size)}, fh, indent=1)


def _cmd_report(args):
    parc = read_volume(args.parcellation)
    if not isinstance(parc, Parcellation):
        raise ValueError(f"{args.parcellation} is not a label volume")
    regions = _read_report_csv(args.report)
    if len(regions) != parc.region_count:
        raise ValueError("report and parcellation disagree on region count")
    prob_map = _paint_regions(parc, [e.P_tilde for e in regions])
    eta_map = _paint_regions(parc, [e.eta_hat for e in regions])
    write_volume(_out(args, "prob_map.vol"), prob_map)
    write_volume(_out(args, "eta_map.vol"), eta_map)
    _slice_pgm(_out(args, "prob_map.pgm"), prob_map)
    _slice_pgm(_out(args, "eta_map.pgm"), eta_map)
    with open(_out(args, "summary.txt"), "w") as fh:
        for e in regions:
            fh.write(f"region {e.region}: P={e.P_tilde:.4f} "
                     f"eta={e.eta_hat:.4g} B={e.B:.4g} "
                     f"{'involved' if e.P_tilde > 0.5 else 'not involved'}\n")


_HANDLERS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "sample": _cmd_sample,
    "sa": _cmd_sa,
    "evidence": _cmd_evidence,
    "select": _cmd_select,
    "calibrate-penalty": _cmd_calibrate_penalty,
    "compare-parcellations": _cmd_compare_parcellations,
    "randthresh": _cmd_randthresh,
    "baseline": _cmd_baseline,
    "report": _cmd_report,
}


# --- parser ------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None,
                        help="line-based 'key = value' option file")
    common.add_argument("--threads", type=int, default=None,
                        help="cap for numeric library threads")

    chain = argparse.ArgumentParser(add_help=False)
    chain.add_argument("--burn-in", type=int, default=100)
    chain.add_argument("--samples", type=int, default=400)
    chain.add_argument("--rw-sigma", type=float, default=1.0)

    parser = argparse.ArgumentParser(
        prog="voxelselect",
        description="Group-level signal detection on voxel lattices")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common])
    p.add_argument("--kind", required=True,
                   choices=["1d", "disc", "spheres", "sparse"])
    p.add_argument("--n", type=int, default=50_000, help="sparse sample size")
    p.add_argument("--active", type=int, default=10_000,
                   help="sparse active count")

    for name in ("fit", "sample"):
        p = sub.add_parser(name, parents=[common, chain])
        p.add_argument("--manifest", required=True)
        p.add_argument("--gamma", default=None,
                       help="comma-separated involvement indicators")
        p.add_argument("--mode", default="no-SU",
                       choices=["no-SU", "posterior-mode-SU"])
        p.add_argument("--omega", type=float, default=None)

    p = sub.add_parser("sa", parents=[common])
    p.add_argument("--manifest", required=True)
    p.add_argument("--theta", required=True, help="theta.json from fit")
    p.add_argument("--omega", type=float, required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--rw-sigma", type=float, default=1.0)

    p = sub.add_parser("evidence", parents=[common, chain])
    p.add_argument("--manifest", required=True)
    p.add_argument("--gamma", default=None)
    p.add_argument("--mode", default="no-SU", choices=["no-SU", "exact-SU"])
    p.add_argument("--omega", type=float, default=None)
    p.add_argument("--base-iters", type=int, default=3000)
    p.add_argument("--cap", type=int, default=64)
    p.add_argument("--repeats", type=int, default=1)

    p = sub.add_parser("select", parents=[common, chain])
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", default="posterior-mode-SU",
                   choices=["no-SU", "posterior-mode-SU"])
    p.add_argument("--omega", type=float, default=None)
    p.add_argument("--penalty", type=float, default=1.0,
                   help="penalty factor c on the likelihood-ratio term")

    p = sub.add_parser("calibrate-penalty", parents=[common])
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--truths", nargs="+", required=True,
                   help="one 0/1-per-line file per report")

    p = sub.add_parser("compare-parcellations", parents=[common, chain])
    p.add_argument("--manifest", required=True)
    p.add_argument("--parcellations", nargs="+", required=True)

    p = sub.add_parser("randthresh", parents=[common])
    p.add_argument("--input", required=True, help="scalar volume of values")
    p.add_argument("--window", default="varying",
                   choices=["varying", "fixed"])
    p.add_argument("--sigma", type=float, default=None,
                   help="known noise std; omit to estimate it")
    p.add_argument("--kappa", type=int, default=None)

    p = sub.add_parser("baseline", parents=[common])
    p.add_argument("--manifest", required=True)
    p.add_argument("--procedure", required=True,
                   choices=["bonferroni", "bh", "maxt", "cluster-size"])
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--reps", type=int, default=1000)

    p = sub.add_parser("report", parents=[common])
    p.add_argument("--report", required=True, help="report.csv from select")
    p.add_argument("--parcellation", required=True)
    return parser


def _fail(args, exc: BaseException, code: int) -> int:
    record = {"error": type(exc).__name__, "message": str(exc),
              "exit_code": code}
    print(f"voxelselect: error: {exc}", file=sys.stderr)
    out = getattr(args, "out", None)
    if out and os.path.isdir(out):
        with open(os.path.join(out, "error.json"), "w") as fh:
            json.dump(record, fh, indent=1)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        if args.config:
            _apply_config(args, _parse_config(args.config), argv)
        if args.threads:
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                        "MKL_NUM_THREADS"):
                os.environ[var] = str(args.threads)
        os.makedirs(args.out, exist_ok=True)
        _HANDLERS[args.command](args)
        _write_provenance(args, argv)
        return 0
    except UsageError as exc:
        return _fail(args, exc, 2)
    except _NUMERICAL_ERRORS as exc:
        return _fail(args, exc, 4)
    except _DATA_ERRORS as exc:
        return _fail(args, exc, 3)


if __name__ == "__main__":
    sys.exit(main())
