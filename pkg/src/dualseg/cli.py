"""Command-line entry point: ``dualseg <command> ...``.

Errors are reported on stderr as one JSON object and the exit status is
nonzero. Every command accepts ``--config`` and ``--seed``; the seed given on
the command line overrides the config's ``seed`` key.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import io
from .config import RunConfig, load_config
from .errors import DualSegError
from .grid import Mask, Volume

log = logging.getLogger("dualseg")

METRIC_HEADER = ("case_id", "stage", "dsc", "asd", "hd95", "centroid_mm", "fallback_flag")


class CliError(DualSegError):
    pass


def _config(args) -> RunConfig:
    rc = load_config(args.config)
    if args.seed is not None:
        rc = rc.with_overrides(seed=args.seed)
    return rc


def _metric_row(case_id, stage, m):
    return (case_id, stage, m["dsc"], m["asd"], m["hd95"], m["centroid_mm"], m["fallback_flag"])


# --- commands ------------------------------------------------------------------

def cmd_phantom_gen(args) -> int:
    from .phantom import STYLES, gen_dataset

    rc = _config(args)
    counts = rc["phantom.counts"]
    unknown = set(counts) - set(STYLES)
    if unknown:
        raise CliError(f"unknown phantom domains: {', '.join(sorted(unknown))}")
    path = gen_dataset([STYLES[n] for n in STYLES if n in counts], counts, rc["seed"], args.out,
                       rc["phantom.dims"], rc["phantom.spacing"])
    print(path)
    return 0


def cmd_train(args) -> int:
    from .report import plot_loss_curves
    from .trainer import TrainConfig, load_dataset, network_config, train, write_loss_log

    rc = _config(args)
    overrides = {"arm": args.arm} if args.arm else {}
    if args.iters is not None:
        overrides["max_iter"] = args.iters
    cfg = TrainConfig.from_run_config(rc, **overrides)
    data = load_dataset(args.data, cfg.target, rc["train.domains"])
    net, records = train(cfg, data, network_config(rc))
    out = Path(args.out)
    io.save_checkpoint(net, out, {"arm": cfg.arm, "target": cfg.target, "seed": cfg.seed,
                                  "iterations": len(records)})
    log_path = Path(args.loss_log) if args.loss_log else out.with_suffix(".loss.csv")
    write_loss_log(records, log_path)
    plot_loss_curves(io.read_csv(log_path), log_path.with_suffix(".png"), f"arm {cfg.arm}")
    print(out)
    return 0


def cmd_infer(args) -> int:
    from .pipeline import binarize, infer_patchwise

    rc = _config(args)
    net = io.load_checkpoint(args.ckpt)
    vol = io.read_dsv1(args.inp, Volume)
    threshold = rc["pipeline.threshold"] if args.threshold is None else args.threshold
    out = infer_patchwise(net, vol, rc["pipeline.patch"], rc["pipeline.overlap"])
    io.write_dsv1(binarize(out.seg_prob, threshold, vol.spacing), args.out)
    print(args.out)
    return 0


def cmd_pipeline_run(args) -> int:
    from .metrics import evaluate
    from .pipeline import STAGE_HEADER, PipelineConfig, run_two_stage, stage_rows

    rc = _config(args)
    manifest = rc["pipeline.manifest"]
    if not manifest:
        raise CliError("config key pipeline.manifest is required")
    rows = {r.case_id: r for r in io.read_manifest(manifest)}
    if args.case not in rows:
        raise CliError(f"case {args.case!r} not in manifest")
    row = rows[args.case]
    vol = io.read_dsv1(io.resolve(manifest, row.volume_path), Volume)
    organ_ref = io.read_dsv1(io.resolve(manifest, row.organ_path), Mask)
    lesion_ref = io.read_dsv1(io.resolve(manifest, row.lesion_path), Mask)
    keys = ("organ_coarse", "organ_fine", "lesion_coarse", "lesion_fine")
    nets = {}
    for k in keys:
        path = rc[f"pipeline.{k}"]
        if not path:
            if args.roi == "mask" and k.startswith("organ"):
                nets[k] = None
                continue
            raise CliError(f"config key pipeline.{k} is required")
        nets[k] = io.load_checkpoint(path)
    res = run_two_stage(vol, *(nets[k] for k in keys), PipelineConfig.from_run_config(rc), args.roi,
                        organ_ref if args.roi == "mask" else None)
    out = Path(args.out)
    io.write_dsv1(res.organ, out / f"{args.case}_organ.dsv")
    io.write_dsv1(res.lesion, out / f"{args.case}_lesion.dsv")
    io.write_csv(out / f"{args.case}_stages.csv", STAGE_HEADER, stage_rows(args.case, res, args.timings))
    metrics = [_metric_row(args.case, f"organ_{args.roi}", evaluate(res.organ, organ_ref, vol.spacing)),
               _metric_row(args.case, f"lesion_{args.roi}", evaluate(res.lesion, lesion_ref, vol.spacing))]
    io.write_csv(out / f"{args.case}_metrics.csv", METRIC_HEADER, metrics)
    for s in res.stages:
        log.info("stage %s: %.3fs roi %s..%s%s", s.name, s.seconds, s.roi.lo, s.roi.hi,
                 f" ({s.warning})" if s.warning else "")
    print(out / f"{args.case}_lesion.dsv")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate
    from .report import plot_metrics

    pred_dir, ref_dir = Path(args.pred), Path(args.ref)
    names = sorted(p.name for p in pred_dir.glob("*.dsv"))
    if not names:
        raise CliError(f"no .dsv files in {pred_dir}")
    rows = []
    for name in names:
        ref_path = ref_dir / name
        if not ref_path.exists():
            raise CliError(f"no reference for {name} in {ref_dir}")
        pred = io.read_dsv1(pred_dir / name, Mask)
        ref = io.read_dsv1(ref_path, Mask)
        if pred.dims != ref.dims:
            raise CliError(f"{name}: prediction dims {pred.dims} differ from reference {ref.dims}")
        rows.append(_metric_row(Path(name).stem, args.stage, evaluate(pred, ref, ref.spacing)))
    out = io.write_csv(args.out, METRIC_HEADER, rows)
    plot_metrics(io.read_csv(out), Path(out).with_suffix(".png"))
    print(out)
    return 0


def cmd_sdt(args) -> int:
    from .sdt import DistanceMap, distmap_to_mask, signed_distance_map

    rc = _config(args)
    cap = rc["sdt.cap_mm"] if args.cap is None else args.cap
    if args.invert:
        d = io.read_dsv1(args.inp, DistanceMap, cap=cap)
        io.write_dsv1(distmap_to_mask(d), args.out)
    else:
        io.write_dsv1(signed_distance_map(io.read_dsv1(args.inp, Mask), cap), args.out)
    print(args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_losses, check_network

    rc = _config(args)
    both = not (args.losses or args.net)
    results = []
    if args.losses or both:
        results += check_losses(points=args.points, seed=rc["seed"])
    if args.net or both:
        results.append(check_network(n_params=30, seed=rc["seed"]))
    for r in results:
        print(f"{r.name:12s} max_rel_error={r.max_rel_error:.3e} tol={r.tol:.0e} "
              f"{'ok' if r.ok else 'FAIL'}")
    return 0 if all(r.ok for r in results) else 1


def cmd_experiment(args) -> int:
    from .experiment import (CASE_HEADER, RUN_HEADER, ExperimentConfig, case_rows, run_experiment, run_rows,
                             summarize)
    from .report import plot_experiment
    from .trainer import TrainConfig, network_config

    rc = _config(args)
    overrides = {"max_iter": args.iters} if args.iters is not None else {}
    tc = TrainConfig.from_run_config(rc, **overrides)
    ecfg = ExperimentConfig.from_run_config(rc)
    results = run_experiment(ecfg, tc, network_config(rc))
    out = Path(args.out)
    runs = io.write_csv(out / "runs.csv", RUN_HEADER, run_rows(results, args.timings))
    io.write_csv(out / "cases.csv", CASE_HEADER, case_rows(results))
    plot_experiment(io.read_csv(runs), out / "experiment.png")
    summary = summarize(results, *ecfg.arms[::-1]) if len(ecfg.arms) == 2 else {}
    io.atomic_write(out / "summary.json", (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode())
    print(json.dumps(summary, sort_keys=True))
    return 0


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value run config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dualseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic datasets")
    ph_sub = ph.add_subparsers(dest="action", required=True)
    g = ph_sub.add_parser("gen", parents=[common], help="write phantom volumes, masks and a manifest")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_phantom_gen)

    t = sub.add_parser("train", parents=[common], help="train one network")
    t.add_argument("--data", required=True, help="manifest.csv")
    t.add_argument("--arm", choices=("bl", "idr", "dtl", "dsl", "full"))
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--loss-log", help="CSV loss log (default: next to the checkpoint)")
    t.add_argument("--iters", type=int, help="overrides train.max_iter")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="segment one volume")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="inp", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--threshold", type=float)
    i.set_defaults(func=cmd_infer)

    pl = sub.add_parser("pipeline", help="coarse-to-fine inference")
    pl_sub = pl.add_subparsers(dest="action", required=True)
    r = pl_sub.add_parser("run", parents=[common], help="run the four-stage cascade on one case")
    r.add_argument("--case", required=True)
    r.add_argument("--roi", choices=("seg", "mask"), default="seg")
    r.add_argument("--out", default=".")
    r.add_argument("--timings", action="store_true", help="write wall-clock stage times into the report")
    r.set_defaults(func=cmd_pipeline_run)

    e = sub.add_parser("eval", parents=[common], help="metrics for a directory of predicted masks")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--stage", default="pred", help="value of the stage column")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sdt", parents=[common], help="mask -> signed distance map, or back with --invert")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--cap", type=float, help="clamp in mm (default sdt.cap_mm)")
    s.add_argument("--invert", action="store_true")
    s.set_defaults(func=cmd_sdt)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    gc.add_argument("--losses", action="store_true")
    gc.add_argument("--net", action="store_true")
    gc.add_argument("--points", type=int, default=50)
    gc.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("experiment", parents=[common], help="cross-domain ablation on phantoms")
    x.add_argument("--out", required=True)
    x.add_argument("--iters", type=int, help="overrides train.max_iter")
    x.add_argument("--timings", action="store_true", help="write training times into runs.csv")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    np.seterr(over="ignore", under="ignore")
    try:
        return args.func(args)
    except (DualSegError, OSError, ValueError, TypeError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
