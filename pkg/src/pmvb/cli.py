"""Command-line interface: deblurring runs and estimator benchmarks.

Settings resolve as defaults < ``--config`` file < command-line flags; the
output directory can also come from ``$PMVB_OUTDIR`` (above the config file,
below ``--outdir``). Every run writes ``manifest.txt`` in the same
``key = value`` format, so ``--config manifest.txt`` repeats the run;
``result.*`` keys are ignored on reload.

Exit codes: 0 ok, 2 input/output or usage error, 3 solver divergence,
4 problem too large for the dense oracle.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from PIL import UnidentifiedImageError
from scipy import linalg

from . import bench, imgio, plotting
from .deblur import (
    DeblurProblem,
    EmConfig,
    em_blind_deblur,
    gaussian_kernel,
    kernel_ncc,
    deblur_nonblind,
    pixel_stdev,
    psnr,
)
from .gmrf import DenseSizeError, SolverConfig
from .operators import DimensionError
from .potentials import make_potential
from .solvers import DivergenceError, IndefiniteError
from .varbayes import VbConfig, VbDivergenceError

logger = logging.getLogger("pmvb")

ENV_OUTDIR = "PMVB_OUTDIR"
DEFAULT_OUTDIR = "pmvb-out"
EXIT_OK, EXIT_IO, EXIT_DIVERGED, EXIT_DENSE = 0, 2, 3, 4

# config keys accepted in addition to the flag names
ALIASES = {
    "potential.family": "potential",
    "potential.tau": "tau",
    "potential.nu": "nu",
    "potential.scale": "scale",
}
_NOT_SETTINGS = {"command", "config", "func", "verbose"}


class ConfigError(ValueError):
    pass


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        out[key] = val
    return out


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_manifest(path, command, settings: dict, results: dict):
    lines = [f"# pmvb {command}", f"command = {command}"]
    lines += [f"{k} = {_fmt(v)}" for k, v in sorted(settings.items())]
    lines += [f"result.{k} = {_fmt(v)}" for k, v in results.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_bool(s):
    t = str(s).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _apply_config(sub: argparse.ArgumentParser, cfg: dict, command: str) -> str | None:
    """Turn config entries into parser defaults. Returns the configured outdir, if any."""
    actions = {a.dest: a for a in sub._actions}
    defaults, outdir = {}, None
    for key, val in cfg.items():
        if key.startswith("result.") or key == "command":
            if key == "command" and val != command:
                logger.warning("config was written by %r, running %r", val, command)
            continue
        dest = ALIASES.get(key, key).replace("-", "_")
        if dest == "outdir":
            outdir = val or None
            continue
        act = actions.get(dest)
        if act is None or dest in _NOT_SETTINGS:
            raise ConfigError(f"unknown setting {key!r} for {command}")
        if act.nargs == 0:
            v = _parse_bool(val)
        elif val == "":
            v = None
        else:
            try:
                v = act.type(val) if act.type else val
            except (TypeError, ValueError) as err:
                raise ConfigError(f"bad value for {key}: {val!r} ({err})") from None
        if act.choices is not None and v is not None and v not in act.choices:
            raise ConfigError(f"{key} must be one of {sorted(act.choices)}")
        defaults[dest] = v
    sub.set_defaults(**defaults)
    return outdir


def _kernel_size(s):
    parts = s.lower().replace(",", "x").split("x")
    dims = tuple(int(p) for p in parts)
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or any(d < 1 or d % 2 == 0 for d in dims):
        raise argparse.ArgumentTypeError("kernel size must be odd, e.g. 5 or 5x7")
    return dims


def _common(p):
    p.add_argument("--config", help="key = value settings file (flags override it)")
    p.add_argument("--outdir", default=None, help=f"output directory (default ${ENV_OUTDIR} or {DEFAULT_OUTDIR})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                   help="concurrent sample solves; results do not depend on it")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p):
    p.add_argument("--image", required=False, help="observed image (PGM/PNG/.npy)")
    p.add_argument("--truth", help="ground-truth image of the observed size, for PSNR")
    p.add_argument("--potential", choices=["laplacian", "student"], default="laplacian")
    p.add_argument("--tau", type=float, default=15.0)
    p.add_argument("--nu", type=float, default=3.0)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--sigma2", type=float, default=1e-5)
    p.add_argument("--samples", type=int, default=20, help="samples per variance estimate")
    p.add_argument("--pcg-iters", type=int, default=20, help="PCG iterations per sample")
    p.add_argument("--outer-iters", type=int, default=6)
    p.add_argument("--variance-mode", choices=["mc", "lanczos", "exact"], default="mc")
    p.add_argument("--nl", type=int, default=None, help="Lanczos iterations (default: matched budget)")
    p.add_argument("--max-dense", type=int, default=5000)
    p.add_argument("--crop", type=int, default=0, help="border excluded from PSNR")


def build_parser():
    parser = argparse.ArgumentParser(prog="pmvb", description=__doc__.split("\n")[0])
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("deblur", help="non-blind deblurring with posterior stdev map")
    _common(p)
    _model_flags(p)
    p.add_argument("--kernel", help="kernel text file ('h w' header, then rows)")
    p.set_defaults(func=cmd_deblur)

    p = subs.add_parser("blind-deblur", help="EM kernel estimation plus deblurring")
    _common(p)
    _model_flags(p)
    p.add_argument("--kernel-size", type=_kernel_size, default=None)
    p.add_argument("--init-kernel", help="initial kernel file (default: centred Gaussian)")
    p.add_argument("--true-kernel", help="reference kernel, for the correlation score")
    p.add_argument("--em-iters", type=int, default=10)
    p.add_argument("--lambda1", type=float, default=1e-3)
    p.add_argument("--mstep-samples", type=int, default=2)
    p.set_defaults(func=cmd_blind_deblur)

    p = subs.add_parser("bench-variance", help="exact vs Monte-Carlo vs Lanczos variances")
    _common(p)
    _bench_flags(p, 48, 73)
    p.add_argument("--ns", type=int, default=20, help="Monte-Carlo samples")
    p.add_argument("--pcg-iters", type=int, default=20)
    p.add_argument("--pcg-tol", type=float, default=None, help="solve samples to a tolerance instead")
    p.add_argument("--nl", type=int, default=None, help="Lanczos iterations (default ns * pcg-iters)")
    p.add_argument("--max-dense", type=int, default=5000)
    p.set_defaults(func=cmd_bench_variance)

    p = subs.add_parser("bench-precond", help="CG vs circulant PCG residual curves")
    _common(p)
    _bench_flags(p, 64, 64)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--uniform", action="store_true", help="uniform gamma (preconditioner exact)")
    p.add_argument("--pooled", action="store_true", help="single pooled gamma in the preconditioner")
    p.set_defaults(func=cmd_bench_precond)
    return parser, subs.choices


def _bench_flags(p, rows, cols):
    p.add_argument("--rows", type=int, default=rows)
    p.add_argument("--cols", type=int, default=cols)
    p.add_argument("--kernel-size", type=int, default=7)
    p.add_argument("--boundary", choices=["periodic", "masked"], default="periodic")
    p.add_argument("--vb-iters", type=int, default=3, help="VB outer iterations that set gamma")


# commands


def _settings(args):
    return {k: v for k, v in vars(args).items() if k not in _NOT_SETTINGS}


def _vb_config(args):
    return VbConfig(outer_iters=args.outer_iters, n_samples=args.samples, variance_mode=args.variance_mode,
                    solver=SolverConfig.fixed(args.pcg_iters, jobs=args.jobs), lanczos_iters=args.nl,
                    seed=args.seed, max_dense=args.max_dense)


def _problem(args, kernel=None, kernel_shape=None):
    if not args.image:
        raise ConfigError("--image is required")
    y = imgio.read_image(args.image)
    pot = None
    if args.potential != "laplacian":
        pot = make_potential(args.potential, tau=args.tau, nu=args.nu, scale=args.scale)
    return DeblurProblem(y, kernel, kernel_shape=kernel_shape, tau=args.tau, sigma2=args.sigma2,
                         lambda1=getattr(args, "lambda1", 1e-3), crop=args.crop or None, potential=pot)


def _guard_dense(problem, args):
    n = int(np.prod(problem.ext_dims))
    if args.variance_mode == "exact" and n > args.max_dense:
        raise DenseSizeError(f"exact variances need N <= {args.max_dense}, this image gives N = {n}")


def _write_trace(path, state):
    lines = ["outer_iter,logdet,h,R,phi"]
    lines += [f"{i},{t.logdet:.17g},{t.h:.17g},{t.R:.17g},{t.phi:.17g}" for i, t in enumerate(state.trace)]
    Path(path).write_text("\n".join(lines) + "\n")


def _psnr_report(args, problem, mean, results):
    if not args.truth:
        return
    truth = imgio.read_image(args.truth)
    results["psnr_observed"] = psnr(problem.y, truth, problem.crop)
    results["psnr_mean"] = psnr(mean, truth, problem.crop)
    print(f"PSNR observed {results['psnr_observed']:.2f} dB, posterior mean {results['psnr_mean']:.2f} dB")


def cmd_deblur(args, out: Path):
    if not args.kernel:
        raise ConfigError("--kernel is required")
    kernel = imgio.read_kernel(args.kernel)
    problem = _problem(args, kernel)
    _guard_dense(problem, args)
    res = deblur_nonblind(problem, _vb_config(args))
    imgio.write_image(out / "mean.png", res.mean)
    imgio.write_image(out / "stdev.png", res.stdev, normalize=True)
    np.save(out / "stdev.npy", res.stdev)
    np.save(out / "mean.npy", res.mean)
    _write_trace(out / "trace.csv", res.state)
    results = {"outer_iters": res.state.outer_iter, "stdev_min": float(res.stdev.min()),
               "stdev_max": float(res.stdev.max()), "warnings": len(res.state.warnings)}
    _psnr_report(args, problem, res.mean, results)
    if not args.no_figures:
        plotting.image_panel(out / "deblur.png", {"observed": problem.y, "mean": res.mean, "stdev": res.stdev})
        if res.state.trace:
            plotting.free_energy_trace(out / "free_energy.png", res.state.phi)
    return results


def cmd_blind_deblur(args, out: Path):
    if args.init_kernel:
        k0 = imgio.read_kernel(args.init_kernel)
        k0 = k0 / k0.sum()
    else:
        if args.kernel_size is None:
            raise ConfigError("--kernel-size or --init-kernel is required")
        k0 = gaussian_kernel(args.kernel_size[0], max(args.kernel_size[0] / 5.0, 0.5))
        if args.kernel_size[0] != args.kernel_size[1]:
            ax = [np.exp(-0.5 * ((np.arange(n) - n // 2) / max(n / 5.0, 0.5)) ** 2) for n in args.kernel_size]
            k0 = np.outer(*ax)
            k0 /= k0.sum()
    if args.kernel_size is not None and tuple(args.kernel_size) != k0.shape:
        raise DimensionError(f"initial kernel {k0.shape} does not match --kernel-size {args.kernel_size}")
    problem = _problem(args, kernel_shape=k0.shape)
    _guard_dense(problem, args)
    kdir = out / "kernels"
    kdir.mkdir(exist_ok=True)

    def save(t, k, state):
        imgio.write_kernel(kdir / f"kernel_iter{t + 1:02d}.txt", k)

    cfg = EmConfig(em_iters=args.em_iters, mstep_samples=args.mstep_samples, lambda1=args.lambda1,
                   vb=_vb_config(args))
    res = em_blind_deblur(problem, k0, cfg, callback=save)
    imgio.write_kernel(out / "kernel.txt", res.kernel)
    imgio.write_image(out / "mean.png", res.mean)
    np.save(out / "mean.npy", res.mean)
    if res.state.batch is not None:
        stdev = problem.crop_ext(pixel_stdev(res.state.batch, res.state.x.size))
        imgio.write_image(out / "stdev.png", stdev, normalize=True)
        np.save(out / "stdev.npy", stdev)
    _write_trace(out / "trace.csv", res.state)
    lines = ["em_iter,mstep_objective,mstep_previous,phi"]
    for t, (m, phi) in enumerate(zip(res.trace.mstep, res.trace.phi)):
        lines.append(f"{t + 1},{m.objective_unnormalized:.17g},{_fmt(m.objective_previous)},{phi:.17g}")
    (out / "em_trace.csv").write_text("\n".join(lines) + "\n")
    results = {"em_iters": len(res.trace.mstep)}
    if args.true_kernel:
        results["kernel_ncc"] = kernel_ncc(res.kernel, imgio.read_kernel(args.true_kernel))
        print(f"kernel NCC {results['kernel_ncc']:.4f}")
    _psnr_report(args, problem, res.mean, results)
    if not args.no_figures:
        ks = res.trace.kernels
        plotting.kernel_strip(out / "kernels.png", ks, labels=[f"it {i}" for i in range(len(ks))])
        plotting.image_panel(out / "blind_deblur.png", {"observed": problem.y, "mean": res.mean})
    return results


def _summary_csv(path, summary):
    Path(path).write_text("key,value\n" + "".join(f"{k},{_fmt(v)}\n" for k, v in summary.items()))


def cmd_bench_variance(args, out: Path):
    n = args.rows * args.cols
    if n > args.max_dense:
        raise DenseSizeError(f"exact variances need N <= {args.max_dense}, got N = {n}")
    system = bench.desk_system(args.rows, args.cols, args.kernel_size, args.boundary, args.vb_iters, args.seed)
    res = bench.bench_variance(system, args.ns, args.pcg_iters, args.nl, seed=args.seed,
                               pcg_tol=args.pcg_tol, jobs=args.jobs, max_dense=args.max_dense)
    res.to_csv(out / "variance_scatter.csv")
    summary = {k: v for k, v in res.summary.items() if not k.startswith("seconds")}
    _summary_csv(out / "summary.csv", summary)
    for key in ("median_relerr_mc", "median_relerr_lanczos", "rms_relerr_mc"):
        print(f"{key} {summary[key]:.6f}")
    if not args.no_figures:
        plotting.variance_scatter(out / "variance_scatter.png", res.z_exact,
                                  {f"MC (N_s={args.ns})": res.z_mc, f"Lanczos (N_L={res.lanczos_iters})": res.z_lanczos})
    return summary


def cmd_bench_precond(args, out: Path):
    system = bench.desk_system(args.rows, args.cols, args.kernel_size, args.boundary, args.vb_iters,
                               args.seed, uniform=args.uniform)
    res = bench.bench_precond(system, args.tol, args.max_iter, seed=args.seed, pooled=args.pooled)
    res.cg.to_csv(out / "cg.csv")
    res.pcg.to_csv(out / "pcg.csv")
    summary = res.summary
    _summary_csv(out / "summary.csv", summary)
    print(f"iterations to {args.tol:g}: CG {summary['cg_iters']}, PCG {summary['pcg_iters']}")
    if not args.no_figures:
        plotting.residual_curves(out / "residuals.png", {"CG": res.cg.relres, "PCG": res.pcg.relres}, args.tol)
    return summary


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, subs = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre_args, _ = pre.parse_known_args(argv)
    cfg_outdir = None
    try:
        if pre_args.config:
            command = next((a for a in argv if a in subs), None)
            if command is not None:
                cfg_outdir = _apply_config(subs[command], read_config(pre_args.config), command)
    except (OSError, ConfigError) as err:
        print(f"pmvb: error: {err}", file=sys.stderr)
        return EXIT_IO
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.outdir or os.environ.get(ENV_OUTDIR) or cfg_outdir or DEFAULT_OUTDIR)
    args.outdir = str(out)
    t0 = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        results = args.func(args, out)
    except DenseSizeError as err:
        print(f"pmvb: error: {err}", file=sys.stderr)
        return EXIT_DENSE
    except (DivergenceError, VbDivergenceError, IndefiniteError, linalg.LinAlgError) as err:
        print(f"pmvb: solver diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, UnidentifiedImageError, imgio.ImageFormatError, ConfigError, DimensionError) as err:
        print(f"pmvb: error: {err}", file=sys.stderr)
        return EXIT_IO
    results = dict(results or {})
    results["seconds"] = round(time.perf_counter() - t0, 3)
    write_manifest(out / "manifest.txt", args.command, _settings(args), results)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
