"""
Command-line front door.

    lmreg simulate-pair --seed 7 --out runs/pair7
    lmreg train --phantoms 4 --variant ce --out runs/model
    lmreg match --checkpoint runs/model/matcher.ckpt --target t.mha --source s.mha --out runs/match
    lmreg register --target t.mha --source s.mha --guidance runs/match/correspondences.txt --out runs/reg
    lmreg evaluate --dvf runs/pair7/dvf.mha --correspondences runs/match/correspondences.txt --out runs/eval
    lmreg gradcheck --out runs/gradcheck
    lmreg report runs/reg runs/eval --out runs/report --push

Every command writes manifest.json (enough to repeat the run) and
summary.json (headline numbers) into its output directory.
"""

import argparse
import csv
import logging
import shlex
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import httpx
import numpy as np

import lmreg
from lmreg import tensorcore as tc
from lmreg.config import LMREG_LOG_LEVEL, LMREG_RESULTS_URL, LMREG_THREADS, ExperimentConfig, config_hash, dump_config, parse_config_text
from lmreg.dcnn_match import CorrespondenceSet, SiameseMatcher, infer_pairs, load_correspondences, save_correspondences, train
from lmreg.deform_sim import load_dvf, load_points, make_phantom, make_rng, save_dvf, save_points, simulate_pair, warp_volume
from lmreg.errors import ConfigError, DataError, LmregError
from lmreg.evaluation import (
    RunManifest,
    RunSummary,
    cumulative_error_distribution,
    jacobian_report,
    landmark_deformation_histogram,
    overlay_slices,
    spatial_matching_error,
    tre,
    write_error_csv,
    write_json,
    write_paired_csv,
)
from lmreg.registration import gradcheck_metrics, register_pipeline
from lmreg.volume import GridGeometry, Volume3, load_volume, resample_to_spacing, save_volume, window_and_normalize

logger = logging.getLogger("lmreg")

DEFAULT_DIMS = (64, 64, 64)


class Run:
    """Output directory, effective config, RNG and manifest of one command"""

    def __init__(self, args: argparse.Namespace, argv: Sequence[str]):
        self.args = args
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg = _load_config(args)
        self.seed = self.cfg.seed
        self.threads = args.threads or LMREG_THREADS
        self.rng = make_rng(self.seed, self.cfg.sim.rng_algorithm)
        self.started = time.perf_counter()
        self.manifest = RunManifest(
            command=args.command,
            argv=list(argv),
            config_hash=config_hash(self.cfg),
            config=dump_config(self.cfg),
            seed=self.seed,
            started=datetime.now(timezone.utc).isoformat(),
            code_version=lmreg.__version__,
            threads=self.threads,
            precision=tc.get_dtype().name,
        )

    def input(self, name: str, path) -> Path:
        self.manifest.inputs[name] = str(path)
        return Path(path)

    def output(self, name: str, path: Path) -> Path:
        self.manifest.outputs[name] = str(path)
        return path

    def summary(self, **fields) -> RunSummary:
        return RunSummary(
            command=self.args.command,
            out_dir=str(self.out),
            seed=self.seed,
            config_hash=self.manifest.config_hash,
            elapsed_seconds=time.perf_counter() - self.started,
            **fields,
        )

    def finish(self, summary: Optional[RunSummary] = None) -> None:
        if summary is not None:
            write_json(self.output("summary", self.out / "summary.json"), summary)
        self.manifest.finished = datetime.now(timezone.utc).isoformat()
        write_json(self.out / "manifest.json", self.manifest)


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    text = ""
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
    extra = list(args.set or [])
    if args.seed is not None:
        extra.append(f"seed = {args.seed}")
    for item in extra:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
    return parse_config_text(text + "\n" + "\n".join(extra))


def _override(run: Run, cfg: ExperimentConfig) -> ExperimentConfig:
    """Adopt a command-line adjusted config and re-record it in the manifest"""
    run.cfg = cfg
    run.manifest.config_hash = config_hash(cfg)
    run.manifest.config = dump_config(cfg)
    return cfg


def _prepare(run: Run, name: str, path) -> Volume3:
    """Load a volume; --hu resamples to the working spacing and windows to [0, 1]"""
    vol = load_volume(run.input(name, path))
    if run.args.hu:
        vol = window_and_normalize(resample_to_spacing(vol, run.cfg.vol.spacing), run.cfg.vol.window_lo, run.cfg.vol.window_hi)
    return vol


def _phantom(run: Run) -> Volume3:
    geometry = GridGeometry(tuple(run.args.dims), run.cfg.vol.spacing)
    return make_phantom(geometry, run.rng, kind=run.args.phantom_kind)


def _banner(run: Run) -> None:
    print("=" * 60, file=sys.stderr)
    print(f"lmreg {lmreg.__version__}: {run.args.command}", file=sys.stderr)
    print("=" * 60, file=sys.stderr)
    print(f"Command: {shlex.join(run.manifest.argv)}", file=sys.stderr)
    print(f"Config hash: {run.manifest.config_hash[:16]}", file=sys.stderr)
    print(f"Seed: {run.seed}  Threads: {run.threads}  Precision: {run.manifest.precision}", file=sys.stderr)
    print(f"Output: {run.out}", file=sys.stderr)
    print("=" * 60, file=sys.stderr)


# Commands
def cmd_simulate_pair(run: Run) -> RunSummary:
    target = _prepare(run, "volume", run.args.volume) if run.args.volume else _phantom(run)
    n_points = run.args.n_points or run.cfg.eval.n_eval_points
    pair = simulate_pair(run.rng, run.cfg.sim, target, n_points=n_points, kind=run.args.kind)
    save_volume(pair.target, run.output("target", run.out / "target.mha"))
    save_volume(pair.source, run.output("source", run.out / "source.mha"))
    save_dvf(pair.dvf, run.output("dvf", run.out / "dvf.mha"))
    save_points(run.output("points_target", run.out / "points_target.txt"), pair.points_target)
    save_points(run.output("points_source", run.out / "points_source.txt"), pair.points_source)
    max_disp = float(pair.dvf.magnitude().max())
    logger.info("Simulated %s pair on %s: max displacement %.2f mm, %d oracle points (%d dropped)",
                run.args.kind, pair.target.dims, max_disp, len(pair.points_target), pair.dropped)
    return run.summary(n_pairs=len(pair.points_target))


def cmd_train(run: Run) -> RunSummary:
    cfg = run.cfg
    if run.args.variant:
        cfg = _override(run, cfg.model_copy(update={"train": cfg.train.model_copy(update={"variant": run.args.variant})}))
    if run.args.volumes:
        volumes = [_prepare(run, f"volume{i}", p) for i, p in enumerate(run.args.volumes)]
    else:
        volumes = [_phantom(run) for _ in range(run.args.phantoms)]
    result = train(volumes, cfg, run.rng, steps=run.args.steps)
    result.matcher.save(run.output("checkpoint", run.out / "matcher.ckpt"), cfg)
    smoothed = result.smoothed(cfg.train.smoothing_window)
    path = run.output("losses", run.out / "losses.csv")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(result.losses, start=1):
            writer.writerow([step, repr(loss)])
    logger.info("Trained %d steps (%s); smoothed loss %.4f -> %.4f", len(result.losses), cfg.train.variant,
                smoothed[0] if len(smoothed) else float("nan"), smoothed[-1] if len(smoothed) else float("nan"))
    return run.summary(variant=cfg.train.variant)


def cmd_match(run: Run) -> RunSummary:
    matcher, trained = SiameseMatcher.load(run.input("checkpoint", run.args.checkpoint))
    variant = run.args.variant or trained.train.variant
    target = _prepare(run, "target", run.args.target)
    source = _prepare(run, "source", run.args.source)
    pairs = infer_pairs(target, source, matcher, variant, threads=run.threads)
    save_correspondences(pairs, run.output("correspondences", run.out / "correspondences.txt"))
    return run.summary(variant=variant, n_pairs=len(pairs))


def cmd_register(run: Run) -> RunSummary:
    cfg = run.cfg
    if run.args.no_guidance:
        cfg = _override(run, cfg.model_copy(update={"reg": cfg.reg.model_copy(update={"metric2_weight": 0.0})}))
    target = _prepare(run, "target", run.args.target)
    source = _prepare(run, "source", run.args.source)
    guidance = None
    if run.args.guidance and not run.args.no_guidance:
        guidance = load_correspondences(run.input("guidance", run.args.guidance))
    result = register_pipeline(target, source, guidance, cfg.reg, run.rng, affine=not run.args.no_affine)

    save_dvf(result.dense_dvf, run.output("dvf", run.out / "dvf.mha"))
    save_volume(warp_volume(source, result.dense_dvf), run.output("warped", run.out / "warped.mha"))
    np.savez(
        run.output("transform", run.out / "transform.npz"),
        grid_origin=result.bspline.grid_origin,
        grid_spacing=result.bspline.grid_spacing,
        coefficients=result.bspline.coefficients,
        affine_linear=result.affine.linear,
        affine_translation=result.affine.translation,
    )
    path = run.output("trace", run.out / "trace.csv")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["level", "iteration", "objective", "mi", "bending", "points"])
        for e in result.trace:
            writer.writerow([e.level, e.iteration, repr(e.objective), repr(e.mi), repr(e.bending), repr(e.points)])

    fields: Dict = {"guidance": cfg.reg.metric2_weight > 0 and guidance is not None}
    if run.args.points_target and run.args.points_source:
        pt = load_points(run.input("points_target", run.args.points_target))
        ps = load_points(run.input("points_source", run.args.points_source))
        before = tre(pt, ps, None)
        after = tre(pt, ps, result.transform)
        write_error_csv(run.output("tre_after", run.out / "tre_after.csv"), after)
        write_paired_csv(run.output("tre_paired", run.out / "tre_paired.csv"),
                         {"tre_before_mm": before.errors, "tre_after_mm": after.errors})
        logger.info("TRE before %.3f mm, after %.3f mm (%d points)", before.mean, after.mean, after.count)
        fields.update(tre_before=before.mean, tre_after=after.mean, n_pairs=after.count)
    jac = jacobian_report(result.dense_dvf)
    write_json(run.output("jacobian", run.out / "jacobian.json"), jac)
    if jac.fraction_nonpositive > 0:
        logger.warning("%.4f%% of voxels fold (min det %.3f)", 100 * jac.fraction_nonpositive, jac.min_determinant)
    logger.info("Registration finished in %.1f s", result.elapsed)
    return run.summary(**fields)


def cmd_evaluate(run: Run) -> RunSummary:
    cfg, args = run.cfg.eval, run.args
    fields: Dict = {}
    known = load_dvf(run.input("dvf", args.dvf)) if args.dvf else None
    if args.correspondences:
        if known is None:
            raise ConfigError("--correspondences needs --dvf (the known simulation field)")
        pairs = load_correspondences(run.input("correspondences", args.correspondences))
        sim = run.cfg.sim
        report = spatial_matching_error(pairs, known, sim.inversion_tol, sim.inversion_max_iter)
        write_error_csv(run.output("matching_errors", run.out / "matching_errors.csv"), report)
        write_json(run.output("matching_summary", run.out / "matching_summary.json"), report.summary())
        if report.count:
            cdf = cumulative_error_distribution(report.errors, cfg.cdf_bin_edges)
            write_json(run.output("matching_cdf", run.out / "matching_cdf.json"), cdf)
        hist = landmark_deformation_histogram(pairs, known, cfg.deformation_bin_edges, cfg.error_threshold,
                                              sim.inversion_tol, sim.inversion_max_iter)
        write_json(run.output("deformation_histogram", run.out / "deformation_histogram.json"), hist)
        logger.info("Matching error over %d pairs: mean %s mm (%d dropped)", report.count,
                    f"{report.mean:.3f}" if report.mean is not None else "n/a", report.dropped)
        fields.update(n_pairs=report.count, matching_error_mean=report.mean)

    registered = load_dvf(run.input("registered_dvf", args.registered_dvf)) if args.registered_dvf else None
    if args.points_target and args.points_source:
        pt = load_points(run.input("points_target", args.points_target))
        ps = load_points(run.input("points_source", args.points_source))
        before = tre(pt, ps, None)
        columns = {"tre_before_mm": before.errors}
        fields.update(tre_before=before.mean)
        if registered is not None:
            after = tre(pt, ps, registered)
            columns["tre_after_mm"] = after.errors
            fields.update(tre_after=after.mean)
            write_error_csv(run.output("tre_after", run.out / "tre_after.csv"), after)
        write_paired_csv(run.output("tre_paired", run.out / "tre_paired.csv"), columns)
    if registered is not None:
        write_json(run.output("jacobian", run.out / "jacobian.json"), jacobian_report(registered))

    if args.target and args.warped:
        target = load_volume(run.input("target", args.target))
        warped = load_volume(run.input("warped", args.warped))
        axis = args.overlay_axis
        indices = args.slices or [target.dims[axis] // 2]
        for p in overlay_slices(target, warped, axis, indices, run.out / "overlays"):
            run.output(p.stem, p)
    return run.summary(**fields)


def cmd_gradcheck(run: Run) -> RunSummary:
    errors = {f"tensor.{k}": v for k, v in tc.run_gradcheck_suite(run.seed, run.args.tolerance).items()}
    errors.update({f"registration.{k}": v for k, v in gradcheck_metrics(run.seed).items()})
    write_json(run.output("gradcheck", run.out / "gradcheck.json"), errors)
    logger.info("All %d gradient checks passed (worst %.3e)", len(errors), max(errors.values()))
    return run.summary()


def cmd_report(run: Run) -> RunSummary:
    summaries: List[RunSummary] = []
    for directory in run.args.runs:
        path = run.input(Path(directory).name, Path(directory) / "summary.json")
        if not path.is_file():
            raise DataError(f"no summary.json in {directory}")
        summaries.append(RunSummary.model_validate_json(path.read_text()))
    columns = list(RunSummary.model_fields)
    with open(run.output("report", run.out / "report.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for s in summaries:
            writer.writerow(s.model_dump())
    url = run.args.url or LMREG_RESULTS_URL
    if run.args.push:
        if not url:
            raise ConfigError("--push needs --url or LMREG_RESULTS_URL")
        failed = 0
        for s in summaries:
            try:
                response = httpx.post(f"{url.rstrip('/')}/api/runs", json=s.model_dump(mode="json"), timeout=10.0)
                response.raise_for_status()
            except httpx.HTTPError as e:
                failed += 1
                logger.error("Could not push %s: %s", s.out_dir, e)
        if failed:
            raise LmregError(f"{failed} of {len(summaries)} summaries were not pushed to {url}")
        logger.info("Pushed %d summaries to %s", len(summaries), url)
    return run.summary(n_pairs=len(summaries))


COMMANDS = {
    "simulate-pair": cmd_simulate_pair,
    "train": cmd_train,
    "match": cmd_match,
    "register": cmd_register,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmreg", description="Landmark-guided deformable registration")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="Output directory")
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override one config entry (repeatable)")
    common.add_argument("--seed", type=int, help="Overrides the config seed")
    common.add_argument("--threads", type=int, default=0, help="Worker threads (default: LMREG_THREADS)")
    common.add_argument("--hu", action="store_true", help="Inputs are raw CT: resample and window to [0, 1]")

    phantom = argparse.ArgumentParser(add_help=False)
    phantom.add_argument("--dims", type=int, nargs=3, default=DEFAULT_DIMS, metavar=("D", "H", "W"),
                         help="Phantom grid size in voxels")
    phantom.add_argument("--phantom-kind", choices=["ellipsoid", "sphere"], default="ellipsoid")

    p = sub.add_parser("simulate-pair", parents=[common, phantom], help="Deform a volume and emit oracle points")
    p.add_argument("--volume", help="Target volume (default: synthetic phantom)")
    p.add_argument("--kind", choices=["elastic", "translation", "rotation", "scale"], default="elastic")
    p.add_argument("--n-points", type=int, help="Oracle points (default: eval.n_eval_points)")

    p = sub.add_parser("train", parents=[common, phantom], help="Train the matcher on simulated pairs")
    p.add_argument("--volumes", nargs="*", help="Training volumes (default: synthetic phantoms)")
    p.add_argument("--phantoms", type=int, default=4, help="Number of phantoms when no volumes are given")
    p.add_argument("--variant", choices=["hinge", "ce", "hinge-ce", "hinge01-ce", "hinge02-ce"])
    p.add_argument("--steps", type=int, help="Overrides train.steps")

    p = sub.add_parser("match", parents=[common], help="Predict correspondences between two volumes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--variant", choices=["hinge", "ce", "hinge-ce", "hinge01-ce", "hinge02-ce"],
                   help="Scoring mode (default: the trained variant)")

    p = sub.add_parser("register", parents=[common], help="Affine + B-spline registration")
    p.add_argument("--target", required=True)
    p.add_argument("--source", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--guidance", help="Correspondence table used as landmark guidance")
    group.add_argument("--no-guidance", action="store_true", help="Intensity-only baseline (reg.Metric2Weight = 0)")
    p.add_argument("--no-affine", action="store_true", help="Skip the affine stage")
    p.add_argument("--points-target", help="Evaluation points in the target (x y z rows)")
    p.add_argument("--points-source", help="Their true source correspondents")

    p = sub.add_parser("evaluate", parents=[common], help="Matching error, TRE, Jacobian and overlays")
    p.add_argument("--dvf", help="Known simulation field")
    p.add_argument("--correspondences", help="Predicted correspondence table")
    p.add_argument("--registered-dvf", help="DVF produced by registration")
    p.add_argument("--points-target")
    p.add_argument("--points-source")
    p.add_argument("--target", help="Target volume for overlays")
    p.add_argument("--warped", help="Warped source volume for overlays")
    p.add_argument("--overlay-axis", type=int, choices=[0, 1, 2], default=0)
    p.add_argument("--slices", type=int, nargs="*", help="Slice indices (default: middle)")

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference checks of every differentiable op")
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("report", parents=[common], help="Aggregate run summaries")
    p.add_argument("runs", nargs="+", help="Run output directories")
    p.add_argument("--push", action="store_true", help="Post each summary to the results service")
    p.add_argument("--url", help="Results service base URL (default: LMREG_RESULTS_URL)")
    return parser


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(
        level=getattr(logging, LMREG_LOG_LEVEL, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        run = Run(args, argv)
        _banner(run)
        summary = COMMANDS[args.command](run)
        run.finish(summary)
    except LmregError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(cli_main())
