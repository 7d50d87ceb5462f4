"""Command-line front end.

Every subcommand loads its inputs, calls one library operation and writes
the result to ``--out``. The invocation and seed go to a ``<out>.meta.json``
sidecar (``meta.json`` inside directory outputs), so data files stay
byte-identical across reruns with ``--no-timing``.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .clipping import (
    ClipConfig,
    FastClipConfig,
    bn_direct_clip,
    clip_top,
    concat_clip,
    fast_clip_run,
    metrics_to_csv,
    scale_clip,
)
from .closedform import GAP_PADDINGS, closed_form_spectrum, gap_stats_csv, padding_gap_experiment, spectral_bounds
from .harness import TASKS, TrainConfig, make_trainer, run_fig1_reproduction, write_reports
from .linops import PADDING_MODES, BatchNormSpec, CompositionSpec, ConvSpec
from .serialize import load_spec, save_spec
from .specmod import fit_parameters, make_plan
from .spectral import PowerQRConfig, deflated_power_baseline, make_rng, power_qr, svd_oracle

__all__ = ["main", "build_parser"]


class DomainError(Exception):
    """Valid invocation whose computation cannot be carried out."""


def _floats(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _stride(text: str) -> tuple[int, ...]:
    vals = _ints(text)
    if not 1 <= len(vals) <= 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError("stride must be INT or INT,INT with positive entries")
    return tuple(vals)


def _write_rows(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _sigma_rows(sigmas):
    return [(i, repr(float(s))) for i, s in enumerate(sigmas)]


def _write_meta(args, out: Path, extra: dict | None = None) -> None:
    meta = {"subcommand": args.command, "argv": args.argv, "seed": getattr(args, "seed", None),
            "version": __version__}
    meta.update(extra or {})
    path = out / "meta.json" if out.is_dir() else out.with_name(out.name + ".meta.json")
    path.write_text(json.dumps(meta, indent=1) + "\n")


def _clip_config(args) -> ClipConfig:
    return ClipConfig(target=args.target, lam=args.lam, inner_n=args.inner_n, probe_iters=args.iters,
                      mu=args.mu, seed=args.seed)


def _check_converged(res, what: str) -> None:
    if not res.converged:
        raise DomainError(f"{what} did not reach the target within {res.passes} passes "
                          f"(sigma1 estimate {res.estimate.sigma1:.6g})")


def cmd_extract(args):
    op = load_spec(args.spec)
    est = power_qr(op, PowerQRConfig(k=args.k, iterations=args.iters, mu=args.mu, seed=args.seed))
    _write_rows(args.out, ["index", "sigma"], _sigma_rows(est.sigmas))
    extra = {"iterations_used": est.iterations_used}
    if args.vectors:
        np.ascontiguousarray(est.V, dtype="<f8").tofile(args.vectors)
        extra["vectors"] = {"path": str(args.vectors), "dtype": "f64le", "shape": list(est.V.shape)}
    _write_meta(args, args.out, extra)


def cmd_oracle(args):
    _write_rows(args.out, ["index", "sigma"], _sigma_rows(svd_oracle(load_spec(args.spec))))
    _write_meta(args, args.out)


def cmd_clip(args):
    res = clip_top(load_spec(args.spec), _clip_config(args))
    save_spec(res.op, args.out)
    _write_meta(args, args.out, {"passes": res.passes, "converged": res.converged})
    _check_converged(res, "clip")


def cmd_scale_clip(args):
    save_spec(scale_clip(load_spec(args.spec), args.target, P=args.probe_p, seed=args.seed, mu=args.mu),
              args.out)
    _write_meta(args, args.out)


def cmd_bn_clip(args):
    bn = load_spec(args.spec)
    if not isinstance(bn, BatchNormSpec):
        raise DomainError(f"bn-clip needs a batchnorm spec, got {type(bn).__name__}")
    save_spec(bn_direct_clip(bn, args.target), args.out)
    _write_meta(args, args.out)


def cmd_concat_clip(args):
    comp = load_spec(args.spec)
    if not (isinstance(comp, CompositionSpec) and len(comp.stages) == 2
            and isinstance(comp.stages[1], BatchNormSpec)):
        raise DomainError("concat-clip needs a two-stage composition ending in a batchnorm")
    conv, bn, res = concat_clip(comp.stages[0], comp.stages[1], _clip_config(args))
    save_spec(CompositionSpec((conv, bn)), args.out)
    _write_meta(args, args.out, {"passes": res.passes, "converged": res.converged})
    _check_converged(res, "concat clip")


def cmd_closed_form(args):
    closed_form_spectrum(args.filter, args.n).to_csv(args.out)
    _write_meta(args, args.out)


def cmd_bounds(args):
    b = spectral_bounds(args.filter)
    _write_rows(args.out, ["lower", "upper"], [(repr(b.lower), repr(b.upper))])
    _write_meta(args, args.out)


def cmd_gap(args):
    stats = []
    for ch in args.channels:
        stats += padding_gap_experiment(args.kernel_size, ch, args.n, args.trials, args.seed,
                                        paddings=tuple(args.padding or GAP_PADDINGS), iterations=args.iters)
    gap_stats_csv(stats, args.out)
    _write_meta(args, args.out)


def cmd_modify_spectrum(args):
    op = load_spec(args.spec)
    est = power_qr(op, PowerQRConfig(k=args.k, iterations=args.iters, mu=args.mu, seed=args.seed))
    if args.sigmas is not None:
        if len(args.sigmas) != est.k:
            raise DomainError(f"--sigmas has {len(args.sigmas)} values for k={est.k}")
        S_prime = np.asarray(args.sigmas)
    else:
        S_prime = np.minimum(est.sigmas, args.target)
    rep = fit_parameters(make_plan(op, est, S_prime), samples=args.samples, seed=args.seed, lr=args.lr,
                         epochs=args.steps)
    spec_out = args.spec_out or args.out.with_name(args.out.stem + ".spec.json")
    save_spec(rep.fitted, spec_out)
    doc = {"residual_rms": rep.residual_rms, "iterations": rep.iterations, "spec_out": str(spec_out),
           "lr": rep.lr, "diverged": rep.diverged, "invocation": args.argv, "seed": args.seed}
    args.out.write_text(json.dumps(doc, indent=1) + "\n")
    if rep.diverged:
        raise DomainError("parameter fit diverged after all learning-rate backoffs")


def cmd_simulate(args):
    op = load_spec(args.spec)
    teacher = load_spec(args.teacher) if args.teacher else None
    trainer = make_trainer(TrainConfig(args.task, args.steps, args.lr, args.noise, args.batch, args.seed), teacher)
    cfg = FastClipConfig(target=args.target, lam=args.lam, inner_n=args.inner_n, mu=args.mu, seed=args.seed,
                         clip_every=args.clip_every, probe_every=args.probe_every)
    op, rows = fast_clip_run(op, trainer, cfg, args.steps)
    metrics_to_csv(rows, args.out, timing=not args.no_timing)
    if args.spec_out:
        save_spec(op, args.spec_out)
    _write_meta(args, args.out)


def cmd_fig1(args):
    reports = run_fig1_reproduction(seed=args.seed, steps=args.steps, target=args.target, lr=args.lr)
    write_reports(reports, args.out, timing=not args.no_timing)
    _write_meta(args, args.out)


def _bench_operator(args):
    if args.spec:
        return load_spec(args.spec)
    rng = make_rng(args.seed, 5)
    ch, k = args.channels, args.kernel_size
    return ConvSpec(rng.standard_normal((ch, ch, k, k)), (ch, args.n, args.n), stride=args.stride,
                    padding=args.padding or "zeros", pad_amount=k // 2)


def cmd_bench(args):
    op = _bench_operator(args)
    rows = []
    for k in args.k:
        for method in ("power_qr", "deflated"):
            t0 = time.perf_counter_ns()
            if method == "power_qr":
                est = power_qr(op, PowerQRConfig(k=k, iterations=args.iters, mu=args.mu, seed=args.seed))
            else:
                est = deflated_power_baseline(op, k, iters_per_vector=args.iters, seed=args.seed)
            wall = 0.0 if args.no_timing else (time.perf_counter_ns() - t0) / 1e6
            rows.append((method, k, f"{wall:.3f}", repr(est.sigma1)))
    _write_rows(args.out, ["method", "k", "wall_ms", "sigma1"], rows)
    _write_meta(args, args.out)


def _positive(kind):
    def parse(text):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specclip", description="Spectral analysis and clipping of implicitly "
                                                                   "linear layers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    pint, pfloat = _positive(int), _positive(float)

    def add(name, func, help, spec=True, out=True):
        p = sub.add_parser(name, help=help, description=help)
        p.set_defaults(func=func)
        if spec:
            p.add_argument("--spec", type=Path, required=spec is True, help="operator JSON file")
        if out:
            p.add_argument("--out", type=Path, required=True)
        p.add_argument("--seed", type=int, default=0)
        return p

    def power(p, k=True):
        if k:
            p.add_argument("--k", type=pint, default=1, help="number of singular values")
        p.add_argument("--iters", type=pint, default=300)
        p.add_argument("--mu", type=float, default=1.0)

    def clipping(p):
        p.add_argument("--target", type=pfloat, default=1.0)
        p.add_argument("--lambda", dest="lam", type=pfloat, default=None,
                       help="descent step size (default depends on the layer type)")
        p.add_argument("--inner-n", type=pint, default=1)

    p = add("extract", cmd_extract, "top-k singular values by subspace iteration")
    power(p)
    p.add_argument("--vectors", type=Path, help="also write V as raw little-endian f64")

    add("oracle", cmd_oracle, "full singular value dump from the materialized operator")

    p = add("clip", cmd_clip, "clip every singular value above the target")
    clipping(p)
    power(p, k=False)

    p = add("scale-clip", cmd_scale_clip, "divide all parameters by sigma1 / target")
    p.add_argument("--target", type=pfloat, default=1.0)
    p.add_argument("--probe-p", type=pint, default=300, help="power iterations for the sigma1 estimate")
    p.add_argument("--mu", type=float, default=1.0)

    p = add("bn-clip", cmd_bn_clip, "clip batch-norm gains directly")
    p.add_argument("--target", type=pfloat, default=1.0)

    p = add("concat-clip", cmd_concat_clip, "clip a conv + batch-norm composition through the conv stage")
    clipping(p)
    power(p, k=False)

    for name, func, help in (("closed-form", cmd_closed_form, "exact spectrum of a circular 1-D conv"),
                             ("bounds", cmd_bounds, "lower and upper bounds on sigma1 of a circular 1-D conv")):
        p = add(name, func, help, spec=False)
        p.add_argument("--filter", type=_floats, action="append", required=True,
                       help="comma-separated taps; repeat for each channel")
        if name == "closed-form":
            p.add_argument("--n", type=pint, required=True, help="signal length")

    p = add("gap", cmd_gap, "sigma1 gap between circular and other paddings", spec=False)
    p.add_argument("--kernel-size", type=pint, default=3)
    p.add_argument("--channels", type=_ints, default=[1, 4, 16])
    p.add_argument("--n", type=pint, default=16)
    p.add_argument("--trials", type=pint, default=100)
    p.add_argument("--padding", choices=GAP_PADDINGS, action="append")
    p.add_argument("--iters", type=pint, default=300)

    p = add("modify-spectrum", cmd_modify_spectrum, "edit the top-k spectrum and refit parameters")
    power(p)
    p.add_argument("--target", type=pfloat, default=1.0, help="new values are min(sigma, target)")
    p.add_argument("--sigmas", type=_floats, help="explicit new values, one per extracted sigma")
    p.add_argument("--lr", type=pfloat, default=1e-2)
    p.add_argument("--steps", type=pint, default=500, help="fit epochs")
    p.add_argument("--samples", type=pint, default=256)
    p.add_argument("--spec-out", type=Path)

    p = add("simulate", cmd_simulate, "train with periodic clipping and record metrics")
    clipping(p)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--task", choices=TASKS, default="least_squares")
    p.add_argument("--teacher", type=Path, help="teacher operator for least_squares")
    p.add_argument("--steps", type=pint, default=1000)
    p.add_argument("--lr", type=pfloat, default=1e-3)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--batch", type=pint, default=8)
    p.add_argument("--clip-every", type=pint, default=100)
    p.add_argument("--probe-every", type=int, default=100)
    p.add_argument("--spec-out", type=Path)
    p.add_argument("--no-timing", action="store_true")

    p = add("fig1", cmd_fig1, "four-setting conv clipping reproduction (out is a directory)", spec=False)
    p.add_argument("--steps", type=pint, default=2000)
    p.add_argument("--target", type=pfloat, default=1.0)
    p.add_argument("--lr", type=pfloat, default=1e-5)
    p.add_argument("--no-timing", action="store_true")

    p = add("bench", cmd_bench, "wall time of subspace iteration against the deflated power method", spec="optional")
    p.add_argument("--k", type=_ints, required=True, help="comma-separated block sizes")
    p.add_argument("--iters", type=pint, default=300)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--channels", type=pint, default=16, help="random conv when --spec is absent")
    p.add_argument("--n", type=pint, default=32, help="input height and width of the random conv")
    p.add_argument("--kernel-size", type=pint, default=3)
    p.add_argument("--padding", choices=PADDING_MODES)
    p.add_argument("--stride", type=_stride, default=(1,))
    p.add_argument("--no-timing", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    if args.command == "bench" and (not args.k or min(args.k) < 1):
        print("specclip bench: error: --k needs at least one positive integer", file=sys.stderr)
        return 2
    if args.command == "bench" and len(args.stride) == 1:
        args.stride = args.stride * 2
    try:
        args.func(args)
    except (DomainError, ValueError, OSError) as exc:
        print(f"specclip {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
