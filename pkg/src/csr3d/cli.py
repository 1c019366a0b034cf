"""Command-line interface.

Exit codes: 0 success, 1 validation/parse errors, 2 numerical/degeneracy
errors, 3 I/O and file-format errors. Diagnostics go to stderr, data and
summaries to stdout or the requested output files; all file outputs are
written atomically and are byte-deterministic for fixed inputs and seeds.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import experiments, serialization, synthdata
from .cascade import train_cascade
from .exceptions import (
    DegenerateGeometryError,
    FileFormatError,
    ValidationError,
)
from .geometry import mask_to_reference
from .metrics import mae, npde, region_mae, vertex_regions


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {exc}")


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip() != ""]


def _ridge(text):
    if text == "auto":
        return "auto"
    try:
        return float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError("ridge must be a number or 'auto'") from exc


def build_parser():
    parser = argparse.ArgumentParser(
        prog="csr3d",
        description="Cascaded shape regression: dense 3D reconstruction "
        "from sparse 2D landmarks.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="base random seed")
    common.add_argument("--threads", type=int, default=1,
                        help="worker parallelism for ablation grids")
    common.add_argument("--out", help="output file or directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--subjects", type=int, default=40)
    p.add_argument("--expressions", type=int, default=5,
                   help="expressions per subject (slot 0 is neutral)")
    p.add_argument("--yaw-grid", type=_float_list, default=list(synthdata.DESK_YAW_GRID))
    p.add_argument("--pitch-grid", type=_float_list, default=list(synthdata.DESK_PITCH_GRID))
    p.add_argument("--vertices", type=int, default=1500)
    p.add_argument("--rank-id", type=int, default=8)
    p.add_argument("--rank-ex", type=int, default=6)
    p.add_argument("--camera-scale", type=float, default=None,
                   help="default: inter-eye distance maps to 220 image units")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a cascade on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--stages", type=int, default=5)
    p.add_argument("--ridge", type=_ridge, default="auto")
    p.add_argument("--noise-std", type=float, default=0.0,
                   help="train-time landmark disturbance, image units")
    p.add_argument("--noise-replicas", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common],
                       help="reconstruct a shape from a landmark CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--landmarks", required=True, help="CSV rows index,u,v,visible")
    p.add_argument("--y-down", action="store_true",
                   help="landmark file uses y-down image coordinates")
    p.add_argument("--emit-obj", action="store_true",
                   help="write an OBJ mesh instead of a vertex CSV (needs --mesh)")
    p.add_argument("--mesh", help="topology OBJ; also enables visibility estimation")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="score a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--no-align", action="store_true",
                   help="skip Procrustes alignment before the error metrics")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-landmarks", parents=[common],
                       help="accuracy vs number of driving landmarks")
    p.add_argument("--data", required=True)
    p.add_argument("--train-fraction", type=float, default=0.5)
    p.add_argument("--stages", type=int, default=5)
    p.add_argument("--ridge", type=_ridge, default="auto")
    p.add_argument("--subsets-json", help="JSON file with nested landmark position lists")
    p.set_defaults(func=cmd_ablate_landmarks)

    p = sub.add_parser("ablate-coverage", parents=[common],
                       help="accuracy vs reconstructed vertex coverage")
    p.add_argument("--data", required=True)
    p.add_argument("--train-fraction", type=float, default=0.5)
    p.add_argument("--stages", type=int, default=5)
    p.add_argument("--ridge", type=_ridge, default="auto")
    p.add_argument("--grid-points", type=int, default=4)
    p.set_defaults(func=cmd_ablate_coverage)

    p = sub.add_parser("ablate-density", parents=[common],
                       help="accuracy vs vertex density over a fixed region")
    p.add_argument("--data", required=True)
    p.add_argument("--train-fraction", type=float, default=0.5)
    p.add_argument("--stages", type=int, default=5)
    p.add_argument("--ridge", type=_ridge, default="auto")
    p.add_argument("--factors", type=_int_list, default=[8, 4, 2, 1])
    p.set_defaults(func=cmd_ablate_density)

    p = sub.add_parser("convergence", parents=[common],
                       help="training objective per stage")
    p.add_argument("--data", required=True)
    p.add_argument("--stages", type=int, default=10)
    p.add_argument("--ridge", type=_ridge, default="auto")
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("compare-noise", parents=[common],
                       help="clean-trained vs disturbance-trained on noisy input")
    p.add_argument("--data", required=True)
    p.add_argument("--train-fraction", type=float, default=0.5)
    p.add_argument("--stages", type=int, default=5)
    p.add_argument("--ridge", type=_ridge, default="auto")
    p.add_argument("--sigma-train", type=float, default=None,
                   help="default: 0.11 x inter-eye distance in image units")
    p.add_argument("--sigma-test", type=float, default=None,
                   help="default: same as --sigma-train")
    p.add_argument("--noise-replicas", type=int, default=1)
    p.set_defaults(func=cmd_compare_noise)

    p = sub.add_parser("export-obj", parents=[common],
                       help="combine a vertex CSV with a topology OBJ")
    p.add_argument("--vertices", required=True, help="CSV of x,y,z rows")
    p.add_argument("--mesh", required=True, help="OBJ supplying the triangles")
    p.set_defaults(func=cmd_export_obj)

    p = sub.add_parser("bench", parents=[common], help="inference throughput check")
    p.add_argument("--vertices", type=int, default=53215)
    p.add_argument("--landmarks", type=int, default=68)
    p.add_argument("--stages", type=int, default=5)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--multithread", action="store_true",
                   help="let BLAS use all cores (default: single thread)")
    p.set_defaults(func=cmd_bench)
    return parser


def _require_out(args):
    if not args.out:
        raise ValidationError("--out is required for this subcommand")
    return args.out


def cmd_synth(args):
    out = _require_out(args)
    model = synthdata.build_shape_model(
        n_vertices=args.vertices, rank_identity=args.rank_id,
        rank_expression=args.rank_ex, seed=args.seed,
    )
    dataset = synthdata.generate_dataset(
        model, subjects=args.subjects, expressions_per_subject=args.expressions,
        yaw_grid=args.yaw_grid, pitch_grid=args.pitch_grid,
        camera_scale=args.camera_scale, seed=args.seed,
    )
    serialization.save_dataset(dataset, out)
    print(f"wrote {dataset.n_samples} samples "
          f"(n={dataset.n_vertices}, l={dataset.n_landmarks}, "
          f"f={dataset.camera_scale:.6g}) to {out}")
    return 0


def cmd_train(args):
    out = _require_out(args)
    dataset = serialization.load_dataset(args.data)
    model = train_cascade(
        dataset, n_stages=args.stages, ridge=args.ridge,
        noise_std=args.noise_std, noise_replicas=args.noise_replicas,
        random_state=args.seed,
    )
    serialization.save_model(model, out)
    obj = model.report_.objective_per_stage
    print(f"trained K={args.stages} on {model.report_.sample_count} samples; "
          f"objective {obj[0]:.6g} -> {obj[-1]:.6g}; model at {out}")
    return 0


def cmd_predict(args):
    out = _require_out(args)
    model = serialization.load_model(args.model)
    landmarks = serialization.import_landmarks(
        args.landmarks, model.n_landmarks_, y_down=args.y_down
    )
    topo = None
    if args.mesh:
        _, topo = serialization.load_obj(args.mesh)
        estimated = model.estimate_visibility(landmarks, topo)
        landmarks = mask_to_reference(landmarks, estimated)
    shape = model.predict_shape(landmarks)
    if args.emit_obj:
        if topo is None:
            raise ValidationError("--emit-obj needs --mesh for the triangulation")
        serialization.export_obj(shape, topo, out)
    else:
        lines = "".join(
            f"{float(x)!r},{float(y)!r},{float(z)!r}\n" for x, y, z in shape
        )
        serialization._atomic_write(out, ("x,y,z\n" + lines).encode())
    print(f"reconstructed {shape.shape[0]} vertices "
          f"({int(landmarks.visibility.sum())} visible landmarks) to {out}")
    return 0


def cmd_eval(args):
    out = _require_out(args)
    model = serialization.load_model(args.model)
    dataset = serialization.load_dataset(args.data)
    align = not args.no_align
    recon = experiments.predict_dataset(model, dataset)
    regions = None
    if dataset.neutral_shape is not None:
        regions = vertex_regions(dataset.neutral_shape, dataset.landmark_spec)
    rows = []
    overall = np.empty(dataset.n_samples)
    depth = np.empty(dataset.n_samples)
    per_region = {}
    for i in range(dataset.n_samples):
        overall[i] = mae(dataset.shapes[i], recon[i], align=align)[0]
        depth[i] = npde(dataset.shapes[i], recon[i])[0]
        if regions is not None:
            for name, value in region_mae(
                dataset.shapes[i], recon[i], regions, align=align
            ).items():
                per_region.setdefault(name, []).append(value)
    rows.append(experiments.MetricRow(0.0, "all", "mae",
                                      float(overall.mean()), float(overall.std())))
    rows.append(experiments.MetricRow(0.0, "all", "npde",
                                      float(depth.mean()), float(depth.std())))
    for name, values in per_region.items():
        arr = np.asarray(values)
        rows.append(experiments.MetricRow(0.0, name, "mae",
                                          float(np.nanmean(arr)), float(np.nanstd(arr))))
    serialization.write_report_csv(rows, out)
    print(f"mae {overall.mean():.6g} mm, npde {depth.mean():.6g}; report at {out}")
    return 0


def _load_split(args):
    dataset = serialization.load_dataset(args.data)
    return synthdata.split_dataset(dataset, args.train_fraction, seed=args.seed)


def cmd_ablate_landmarks(args):
    out = _require_out(args)
    train, test = _load_split(args)
    subsets = None
    if args.subsets_json:
        with open(args.subsets_json, "r", encoding="utf-8") as fh:
            subsets = [np.asarray(s, dtype=np.int64) for s in json.load(fh)]
    result = experiments.landmark_ablation(
        train, test, subsets=subsets, n_stages=args.stages, ridge=args.ridge,
        random_state=args.seed, n_jobs=args.threads,
    )
    serialization.write_report_csv(result.rows, out)
    print(f"landmark ablation over {list(result.grid.astype(int))}; report at {out}")
    return 0


def cmd_ablate_coverage(args):
    out = _require_out(args)
    train, test = _load_split(args)
    subsets = experiments.default_coverage_subsets(
        train, synthdata.INNER_LANDMARKS, n_grid=args.grid_points
    )
    result = experiments.vertex_coverage_ablation(
        train, test, vertex_subsets=subsets, n_stages=args.stages,
        ridge=args.ridge, random_state=args.seed, n_jobs=args.threads,
    )
    serialization.write_report_csv(result.rows, out)
    print(f"coverage ablation over {list(result.grid.astype(int))} vertices; report at {out}")
    return 0


def cmd_ablate_density(args):
    out = _require_out(args)
    train, test = _load_split(args)
    result = experiments.vertex_density_ablation(
        train, test, factors=args.factors, n_stages=args.stages,
        ridge=args.ridge, random_state=args.seed, n_jobs=args.threads,
    )
    serialization.write_report_csv(result.rows, out)
    print(f"density ablation over {list(result.grid.astype(int))} vertices; report at {out}")
    return 0


def cmd_convergence(args):
    out = _require_out(args)
    dataset = serialization.load_dataset(args.data)
    result = experiments.convergence_curve(
        dataset, n_stages=args.stages, ridge=args.ridge, random_state=args.seed
    )
    serialization.write_report_csv(result.rows, out)
    curve = result.curve("objective_normalized")
    print(f"objective curve: {np.array2string(curve, precision=4)}; report at {out}")
    return 0


def cmd_compare_noise(args):
    out = _require_out(args)
    train, test = _load_split(args)
    sigma_train = args.sigma_train
    if sigma_train is None:
        sigma_train = 0.11 * synthdata.inter_eye_image_units(train)
    sigma_test = args.sigma_test if args.sigma_test is not None else sigma_train
    result = experiments.noise_mode_comparison(
        train, test, sigma_test=sigma_test, sigma_train=sigma_train,
        noise_replicas=args.noise_replicas, n_stages=args.stages,
        ridge=args.ridge, random_state=args.seed, eval_seed=args.seed,
    )
    serialization.write_report_csv(result.rows, out)
    maes = result.curve("mae")
    print(f"clean-trained mae {maes[0]:.6g} mm, disturbance-trained mae "
          f"{maes[1]:.6g} mm (sigma_train {sigma_train:.4g}); report at {out}")
    return 0


def cmd_export_obj(args):
    out = _require_out(args)
    rows = np.genfromtxt(args.vertices, delimiter=",", skip_header=1)
    if rows.ndim != 2 or rows.shape[1] != 3 or not np.all(np.isfinite(rows)):
        raise ValidationError(f"{args.vertices}: expected finite x,y,z rows")
    _, topo = serialization.load_obj(args.mesh)
    serialization.export_obj(rows, topo, out)
    print(f"wrote mesh with {rows.shape[0]} vertices to {out}")
    return 0


def cmd_bench(args):
    stats = experiments.benchmark_predict(
        n_vertices=args.vertices, n_landmarks=args.landmarks,
        n_stages=args.stages, batch=args.batch, repeats=args.repeats,
        seed=args.seed, single_thread=not args.multithread,
    )
    print(f"n={stats['n_vertices']} l={stats['n_landmarks']} K={stats['n_stages']}")
    print(f"per-image latency, batched (batch={stats['batch']}): "
          f"{stats['ms_per_image_batched']:.2f} ms ({stats['fps_batched']:.1f} fps)")
    print(f"single-image latency: {stats['ms_single_image']:.2f} ms")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if not exc.code else 1
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DegenerateGeometryError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    except (FileFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


def entry():  # console-script hook
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
