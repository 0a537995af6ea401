"""Command-line entry point: ``rvf <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
FUSION_CHOICES = ("add", "mul", "cat", "sac")

log = logging.getLogger("rvfusion")


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_json(path, what: str) -> dict:
    from .data import DataError
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"{what} not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{what} {path} is not valid JSON: {exc}") from exc


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def _kernels(text: str) -> tuple:
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad kernel list {text!r}") from exc
    if not ks:
        raise argparse.ArgumentTypeError("kernel list is empty")
    return ks


# -- configs ------------------------------------------------------------------------------------

def _run_config(path, fusion=None, sac_kernels=None, seed=None):
    """(ModelConfig, TrainConfig) from a JSON file with optional ``model``/``train`` sections."""
    from .model import ModelConfig
    from .training import TrainConfig
    raw = _read_json(path, "config") if path else {}
    model_d = dict(raw.get("model", {}))
    train_d = dict(raw.get("train", {}))
    if fusion:
        model_d["fusion"] = fusion
    if sac_kernels:
        model_d["sac_kernels"] = list(sac_kernels)
    if seed is not None:
        model_d["seed"] = seed
        train_d["seed"] = seed
    try:
        return ModelConfig.from_dict(model_d), TrainConfig.from_dict(train_d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc


def _train_model(data_dir, mcfg, tcfg, split="train", progress=True):
    from .data import load_dataset
    from .model import RVPAFCOS
    from .training import train
    samples = load_dataset(data_dir, split)
    if not samples:
        from .data import DataError
        raise DataError(f"split '{split}' of {data_dir} is empty")
    model = RVPAFCOS(mcfg)

    def report(it, parts):
        if progress and (it % 100 == 0 or it == 1):
            log.info("iter %d total %.4f cls %.4f reg %.4f ctr %.4f", it, parts["total"], parts["cls"],
                     parts["reg"], parts["centerness"])

    result = train(model, samples, tcfg, progress=report)
    return model, result


def _detections(model, samples):
    from .data import detections_to_records
    from .training import predict
    dets = predict(model, samples)
    return detections_to_records([s.image_id for s in samples], dets)


# -- commands -------------------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .scene_sim import SimConfig, emit_dataset
    raw = _read_json(args.config, "config") if args.config else {}
    try:
        cfg = SimConfig.from_dict(raw.get("sim", raw))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid simulation config: {exc}") from exc
    if args.image_size:
        cfg.image_size = args.image_size
        cfg.rig = None if not raw.get("rig") else cfg.rig
    if args.frames < 10:
        raise UsageError("--frames must be >= 10")
    manifest = emit_dataset(cfg, args.frames, args.out, seed=args.seed)
    print(json.dumps(manifest.counts))
    return EXIT_OK


def cmd_encode_radar(args) -> int:
    from PIL import Image
    from .geometry import load_rig
    from .radar_imaging import load_frame, render_radar_frame
    rig = load_rig(args.rig)
    try:
        frame = load_frame(args.input)
    except FileNotFoundError as exc:
        from .data import DataError
        raise DataError(f"radar frame not found: {args.input}") from exc
    img, stats = render_radar_frame(frame, rig, splat_radius=args.splat, return_stats=True)
    Image.fromarray(img).save(args.out)
    print(f"rendered {stats.rendered} dropped {stats.dropped}")
    return EXIT_OK


def cmd_project(args) -> int:
    from .geometry import RadarDetection, load_rig, project_radar_to_pixel
    rig = load_rig(args.rig)
    try:
        det = RadarDetection(args.rho, math.radians(args.theta_deg), math.radians(args.phi_deg), 0.0)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    res = project_radar_to_pixel(det, rig)
    print(f"x_p {res.x_p:.6f} y_p {res.y_p:.6f} depth {res.z_c:.6f} in_frame {str(res.in_frame).lower()}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import write_loss_csv
    from .weights import save_weights
    mcfg, tcfg = _run_config(args.config, args.fusion, args.sac_kernels, args.seed)
    model, result = _train_model(args.data, mcfg, tcfg, args.split)
    save_weights(model, args.out)
    if args.loss_csv:
        write_loss_csv(result.curve, args.loss_csv)
    losses = result.losses()
    if len(losses):
        print(f"final loss {losses[-1]:.6f} after {len(losses)} iterations")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .data import load_dataset
    from .weights import load_weights
    model = load_weights(args.weights)
    samples = load_dataset(args.data, args.split)
    records = _detections(model, samples)
    _write_json(args.out, records)
    print(f"{len(records)} detections on {len(samples)} images")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_annotations, load_detections
    from .evaluation import evaluate_records
    ann = load_annotations(args.ann)
    dets = load_detections(args.dets)
    report = evaluate_records(dets, ann.to_dict())
    print(report.to_text(args.label))
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import network_check, op_suite
    results = op_suite()
    if args.full:
        results.append(network_check(probes=args.probes))
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<28} rel err {r.error:.3e} (tol {r.tolerance:.0e})")
    if not all(r.passed for r in results):
        raise NumericalFailure("gradient check failed")
    return EXIT_OK


def radar_ablation_delta(model, samples) -> float:
    """Largest absolute change in head outputs when the radar input is zeroed."""
    from .tensor_core import no_grad
    from .training import prepare_sample
    size = model.cfg.input_size
    prepared = [prepare_sample(s, size) for s in samples[:2]]
    vis = np.stack([p.vision for p in prepared]).astype(model.cfg.np_dtype)
    rad = np.stack([p.radar for p in prepared]).astype(model.cfg.np_dtype)
    with no_grad():
        a = model(vis, rad)
        b = model(vis, np.zeros_like(rad))
    delta = 0.0
    for xs, ys in ((a.cls_logits, b.cls_logits), (a.reg, b.reg), (a.centerness, b.centerness)):
        for x, y in zip(xs, ys):
            delta = max(delta, float(np.abs(x.data - y.data).max()))
    return delta


def cmd_ablate_fusion(args) -> int:
    from .data import load_annotations, load_dataset
    from .evaluation import evaluate_records, format_table
    from .weights import save_weights
    mcfg, tcfg = _run_config(args.config, seed=args.seed)
    eval_samples = load_dataset(args.data, args.eval_split)
    ann = load_annotations(Path(args.data) / f"annotations_{args.eval_split}.json").to_dict()
    reports, summary = {}, {}
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    for mode in ("ADD", "MUL", "CAT", "SAC"):
        cfg = type(mcfg).from_dict({**mcfg.to_dict(), "fusion": mode})
        log.info("training %s", mode)
        model, result = _train_model(args.data, cfg, tcfg, args.train_split)
        report = evaluate_records(_detections(model, eval_samples), ann)
        reports[mode] = report
        entry = {"metrics": report.to_dict(), "final_loss": float(result.losses()[-1]) if result.curve else None}
        if mode == "SAC":
            entry["radar_ablation_delta"] = radar_ablation_delta(model, eval_samples or load_dataset(
                args.data, args.train_split))
        summary[mode] = entry
        if out_dir:
            save_weights(model, out_dir / f"{mode.lower()}.rvpw")
    print(format_table(reports))
    order = sorted(reports, key=lambda k: -reports[k].ap)
    print("AP ordering: " + " > ".join(order))
    finite = all(math.isfinite(v) for r in reports.values() for v in r.values())
    live = summary["SAC"]["radar_ablation_delta"] > 0
    print(f"all AP finite: {str(finite).lower()}; SAC radar path live: {str(live).lower()} "
          f"(max delta {summary['SAC']['radar_ablation_delta']:.3e})")
    if out_dir:
        _write_json(out_dir / "ablation.json", {"runs": summary, "ap_ordering": order,
                                                "all_finite": finite, "sac_radar_live": live})
    if not (finite and live):
        raise NumericalFailure("fusion ablation sanity check failed")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rvf", description="Radar-vision fusion detector toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic paired dataset")
    s.add_argument("--config", help="simulation config JSON (optional)")
    s.add_argument("--frames", type=int, required=True, help="number of frames (>= 10)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0, help="dataset seed")
    s.add_argument("--image-size", type=int, help="override image size (square)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("encode-radar", help="render a radar frame JSON to a radar image")
    s.add_argument("--in", dest="input", required=True, help="radar frame JSON")
    s.add_argument("--rig", required=True, help="sensor rig JSON")
    s.add_argument("--out", required=True, help="output PNG")
    s.add_argument("--splat", type=int, default=2, help="disc radius in pixels")
    s.set_defaults(func=cmd_encode_radar)

    s = sub.add_parser("project", help="project one radar detection to the image")
    s.add_argument("--rig", required=True, help="sensor rig JSON")
    s.add_argument("--rho", type=float, required=True, help="range in meters")
    s.add_argument("--theta-deg", type=float, required=True, help="azimuth in degrees")
    s.add_argument("--phi-deg", type=float, required=True, help="elevation in degrees")
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("train", help="train a model and write weights")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--config", help="run config JSON with 'model' and 'train' sections")
    s.add_argument("--fusion", choices=FUSION_CHOICES, type=str.lower, help="fusion module")
    s.add_argument("--sac-kernels", type=_kernels, help="comma-separated SAC kernel sizes, e.g. 1,3,5")
    s.add_argument("--out", required=True, help="output weights file (.rvpw)")
    s.add_argument("--split", default="train", help="training split")
    s.add_argument("--seed", type=int, help="override model and training seed")
    s.add_argument("--loss-csv", help="write the per-iteration loss curve here")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="run a trained model over a split")
    s.add_argument("--weights", required=True, help="weights file (.rvpw with .json sidecar)")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--split", default="test", help="split to run on")
    s.add_argument("--out", required=True, help="output detections JSON")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score detections against annotations")
    s.add_argument("--dets", required=True, help="detections JSON")
    s.add_argument("--ann", required=True, help="annotation JSON")
    s.add_argument("--json", help="also write the report as JSON here")
    s.add_argument("--label", default="model", help="row label in the table")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="run the gradient verification suites")
    s.add_argument("--full", action="store_true", help="include the whole-network check")
    s.add_argument("--probes", type=int, default=20, help="directional probes for --full")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate-fusion", help="train all four fusion modules and compare")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--config", help="run config JSON")
    s.add_argument("--seed", type=int, help="override model and training seed")
    s.add_argument("--train-split", default="train", help="training split")
    s.add_argument("--eval-split", default="test", help="evaluation split")
    s.add_argument("--out", help="directory for weights and ablation.json")
    s.set_defaults(func=cmd_ablate_fusion)
    return p


def main(argv=None) -> int:
    from .data import DataError
    from .geometry import RigFileError
    from .training import DivergenceError
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, RigFileError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, DivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
