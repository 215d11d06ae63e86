"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import platform
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def version_string() -> str:
    """Package version plus ``git describe`` of the checkout when available."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True,
                             timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def run_record(args, extra: dict | None = None) -> dict:
    import numba
    rec = {
        "command": args.command,
        "argv": sys.argv[1:],
        "flags": {k: v for k, v in vars(args).items() if k not in ("func",)},
        "seed": getattr(args, "seed", None),
        "version": version_string(),
        "threads": numba.get_num_threads(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
    }
    if extra:
        rec.update(extra)
    return rec


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def _finite(x):
    """JSON-safe number: infinities become the strings "inf" / "-inf"."""
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def dump_json(obj) -> str:
    def clean(o):
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, (float, np.floating)):
            return _finite(float(o))
        return o
    return json.dumps(clean(obj), default=_json_default, sort_keys=True)


def write_record(path: Path, rec: dict) -> None:
    path.write_text(dump_json(rec) + "\n")


def emit_record(args, rec: dict) -> None:
    """Reproducibility record for commands that write no files of their own."""
    if getattr(args, "record", None):
        write_record(Path(args.record), rec)
    elif not getattr(args, "json", False):
        print("# run " + dump_json(rec), file=sys.stderr)


def _parse_floats(text: str, n: int | None, what: str) -> list[float]:
    try:
        vals = [float(v) for v in text.replace(" ", "").split(",") if v != ""]
    except ValueError:
        raise UsageError(f"{what}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise UsageError(f"{what}: expected {n} numbers, got {len(vals)}")
    return vals


def parse_camera(spec: str, data: str | None, width: int | None, height: int | None):
    """Inline ``fx,0,cx,0,fy,cy,0,0,1`` + 12 pose numbers, or a manifest frame index."""
    from .scene import Camera
    spec = spec.strip()
    if "," not in spec:
        if data is None:
            raise UsageError("camera given as a frame index needs --data")
        from .io import load_manifest
        try:
            i = int(spec)
        except ValueError:
            raise UsageError(f"--camera: not a frame index or 21 numbers: {spec!r}") from None
        man = load_manifest(data)
        if not 0 <= i < len(man.frames):
            raise UsageError(f"--camera: frame index {i} outside 0..{len(man.frames) - 1}")
        cam = man.frames[i].camera
        if width or height:
            sx = (width or cam.width) / cam.width
            sy = (height or cam.height) / cam.height
            cam = Camera(width or cam.width, height or cam.height, cam.fx * sx, cam.fy * sy,
                         cam.cx * sx, cam.cy * sy, cam.world_to_camera)
        return cam
    v = _parse_floats(spec, 21, "--camera")
    K = np.array(v[:9]).reshape(3, 3)
    pose = np.eye(4)
    pose[:3, :] = np.array(v[9:]).reshape(3, 4)
    W = width or int(round(2 * K[0, 2]))
    H = height or int(round(2 * K[1, 2]))
    try:
        return Camera(W, H, K[0, 0], K[1, 1], K[0, 2], K[1, 2], pose)
    except ValueError as e:
        raise UsageError(f"--camera: {e}") from None


def _model_from_args(args):
    from .scene import MotionModel
    tvs = getattr(args, "time_varying_scale", False)
    if args.poly is not None:
        return MotionModel.polynomial(args.poly, tvs)
    if args.spline is not None:
        return MotionModel.spline(args.spline, tvs)
    return MotionModel.fourier(args.l, tvs)


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    from .io import load_dataset, save_any
    from .trainer import TrainConfig, evaluate, train, train_chunked

    data = load_dataset(args.data, downscale=args.downscale)
    base = TrainConfig(seed=args.seed, lambda_dssim=args.lambda_dssim,
                       lambda_flow=0.0 if args.no_flow else args.lambda_flow,
                       chunk_size=args.chunk, init_points=args.init_points,
                       max_gaussians=args.max_gaussians, log_every=args.log_every)
    cfg = base if args.iters == base.total_iters else base.scaled(args.iters)
    if args.static_iters is not None:
        from dataclasses import replace
        cfg = replace(cfg, static_iters=args.static_iters)
        cfg.__post_init__()
    model = _model_from_args(args)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with open(log_path, "w") as logf:
        def on_log(rec):
            logf.write(dump_json(rec) + "\n")
            logf.flush()
            if not args.quiet:
                print(f"iter {rec['iter']:>6} {rec['stage']:<7} loss {rec['total']:.5f} "
                      f"N {rec['n']:>6} probe PSNR {rec.get('psnr_probe', float('nan')):.2f}",
                      file=sys.stderr)

        if cfg.chunk_size is not None:
            scene, _ = train_chunked(data, cfg, model, args.sh, on_log=on_log)
        else:
            scene, _ = train(data, cfg, model, args.sh, on_log=on_log)
    elapsed = time.perf_counter() - t0
    size = save_any(out, scene)
    metrics = evaluate(scene, data.test_frames, data) if data.test_frames else None
    rec = run_record(args, {"config": cfg.to_dict(), "model": model.describe(), "scene_bytes": size,
                            "train_seconds": elapsed, "heldout": metrics, "log": str(log_path)})
    write_record(out.with_name(out.name + ".run.json"), rec)
    summary = {"scene": str(out), "bytes": size, "heldout": metrics}
    print(dump_json(summary) if args.json else
          f"wrote {out} ({size:,} bytes)" + (f"; held-out PSNR {metrics['psnr']:.2f} dB "
                                             f"SSIM {metrics['ssim']:.4f}" if metrics else ""))
    return EXIT_OK


def _scene_for_time(scene, t: float):
    from .scene import ChunkedScene
    if isinstance(scene, ChunkedScene):
        try:
            sub, t_local, ratio = scene.locate(t)
        except ValueError as e:
            raise UsageError(str(e)) from None
        return sub, t_local, ratio
    lo, hi = scene.time_range
    if not lo <= t <= hi:
        raise UsageError(f"t={t} is outside the scene time range [{lo}, {hi}]")
    return scene, (t - lo) / (hi - lo) if (lo, hi) != (0.0, 1.0) else t, 1.0 / (hi - lo)


def cmd_render(args) -> int:
    from .io import load_any, load_manifest, write_flo, write_image
    from .rasterizer import render

    scene = load_any(args.scene)
    cam = parse_camera(args.camera, args.data, args.width, args.height)
    sub, t_local, ratio = _scene_for_time(scene, args.t)
    dt = None
    if args.flow_out:
        if args.dt is not None:
            dt = args.dt
        elif args.data:
            dt = 1.0 / load_manifest(args.data).n_times
        else:
            raise UsageError("--flow-out needs --dt (or --data to take 1/T from the manifest)")
    bg = np.asarray(_parse_floats(args.background, 3, "--background"))
    r = render(sub, cam, t_local, None if dt is None else dt * ratio)
    write_image(args.out, np.clip(r.composite(bg), 0, 1))
    outputs = [args.out]
    if args.flow_out:
        fwd_path = Path(args.flow_out)
        bwd_path = fwd_path.with_name(fwd_path.stem + "_bwd" + (fwd_path.suffix or ".flo"))
        write_flo(fwd_path, r.flow.fwd)
        write_flo(bwd_path, r.flow.bwd)
        outputs += [str(fwd_path), str(bwd_path)]
    write_record(Path(args.out).with_name(Path(args.out).name + ".run.json"),
                 run_record(args, {"outputs": outputs}))
    print(dump_json({"outputs": outputs}) if args.json else "wrote " + ", ".join(map(str, outputs)))
    return EXIT_OK


def cmd_compose(args) -> int:
    from scipy.spatial.transform import Rotation

    from .io import load_scene, save_scene
    from .scene import compose

    a, b = load_scene(args.a), load_scene(args.b)
    T = np.eye(4)
    T[:3, :3] = args.scale * Rotation.from_euler("xyz", _parse_floats(args.rotate, 3, "--rotate"),
                                                 degrees=True).as_matrix()
    T[:3, 3] = _parse_floats(args.translate, 3, "--translate")
    try:
        out = compose(a, b, T, time_shift=args.tshift)
    except ValueError as e:
        raise UsageError(str(e)) from None
    size = save_scene(args.out, out)
    write_record(Path(args.out).with_name(Path(args.out).name + ".run.json"), run_record(args))
    print(dump_json({"scene": args.out, "n": len(out), "bytes": size}) if args.json
          else f"wrote {args.out}: {len(out)} gaussians, {size:,} bytes")
    return EXIT_OK


def scene_info(scene, T: int) -> dict:
    from .io import CHUNK_ENTRY, CHUNK_HEADER, HEADER_SIZE, scene_file_size
    from .scene import ChunkedScene, param_count_per_gaussian
    from .trainer import baseline_d3dgs_memory, compression_ratio

    scenes = [s for _, _, s in scene.chunks] if isinstance(scene, ChunkedScene) else [scene]
    s0 = scenes[0]
    n = sum(len(s) for s in scenes)
    per = param_count_per_gaussian(s0.model, s0.sh_degree)
    payload = n * per * 4
    file_bytes = sum(scene_file_size(len(s), s0.model, s0.sh_degree) for s in scenes)
    if isinstance(scene, ChunkedScene):
        file_bytes += CHUNK_HEADER.size + CHUNK_ENTRY.size * len(scenes)
    baseline = baseline_d3dgs_memory(n, T, s0.sh_degree)
    return {
        "n_gaussians": n, "chunks": len(scenes), "model": s0.model.describe(),
        "sh_degree": s0.sh_degree, "param_count_per_gaussian": per,
        "payload_bytes": payload, "header_bytes": HEADER_SIZE * len(scenes), "file_bytes": file_bytes,
        "T": T, "baseline_bytes": baseline,
        "compression_ratio_motion": compression_ratio(s0.model, T, s0.sh_degree, motion_only=True),
        "compression_ratio_total": baseline / payload if payload else float("nan"),
        "time_range": [s0.time_range[0], scenes[-1].time_range[1]], "extent": s0.extent,
    }


def cmd_info(args) -> int:
    from .io import load_any
    info = scene_info(load_any(args.scene), args.T)
    if args.json:
        print(dump_json({**info, "run": run_record(args)}))
    else:
        print(f"gaussians: {info['n_gaussians']:,} in {info['chunks']} chunk(s)")
        print(f"model: {info['model']}, sh degree {info['sh_degree']}")
        print(f"params per gaussian: {info['param_count_per_gaussian']}")
        print(f"{info['payload_bytes']:,} payload bytes; file {info['file_bytes']:,} bytes")
        print(f"per-timestep baseline at T={info['T']}: {info['baseline_bytes']:,} bytes")
        print(f"compression vs baseline: motion {info['compression_ratio_motion']:.1f}x, "
              f"total {info['compression_ratio_total']:.1f}x")
        emit_record(args, run_record(args))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .io import load_any, load_dataset
    from .trainer import evaluate

    scene = load_any(args.scene)
    data = load_dataset(args.data, downscale=args.downscale)
    frames = data.test_frames if args.split == "test" else data.frames
    if not frames:
        raise UsageError(f"split {args.split!r} has no frames")
    m = evaluate(scene, frames, data)
    if args.json:
        print(dump_json({**m, "split": args.split, "run": run_record(args)}))
    else:
        ps = "inf" if math.isinf(m["psnr"]) else f"{m['psnr']:.3f}"
        print(f"{args.split}: {m['n_frames']} frames, PSNR {ps} dB, SSIM {m['ssim']:.4f}")
        emit_record(args, run_record(args))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradients import grad_check
    from .scene import MotionModel
    from .synthetic import random_scene, ring_cameras

    losses = ["recon", "flow", "total"] if args.loss == "all" else [args.loss]
    worst, results = 0.0, []
    for k in range(args.scenes):
        rng = np.random.default_rng(args.seed + k)
        scene = random_scene(rng, args.n, MotionModel.fourier(args.l), sh_degree=args.sh)
        cam = ring_cameras(1, size=args.res, phase=rng.uniform(0, 2 * np.pi))[0]
        t = float(rng.uniform(0, 1))
        for loss in losses:
            t0 = time.perf_counter()
            rep = grad_check(scene, cam, t, loss, h=args.h, seed=args.seed + k, rel_tol=args.tol)
            row = {"scene": k, "loss": loss, **rep.as_dict(), "seconds": time.perf_counter() - t0}
            results.append(row)
            worst = max(worst, rep.max_rel_err if rep.passed else math.inf)
            if not args.json:
                print(f"scene {k} {loss:<6} max_rel_err {rep.max_rel_err:.2e} worst {rep.worst_param} "
                      f"h={rep.h:g} {'ok' if rep.passed else 'FAIL'}")
    ok = all(r["passed"] for r in results)
    if args.json:
        print(dump_json({"passed": ok, "results": results, "run": run_record(args)}))
    else:
        emit_record(args, run_record(args))
    return EXIT_OK if ok else EXIT_NUMERIC


def bench_renders(scene, cam, t: float, frames: int, repeats: int = 5) -> dict:
    from .rasterizer import render
    render(scene, cam, t)  # warm-up / compile
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for i in range(frames):
            render(scene, cam, (t + i / max(frames, 1)) % 1.0)
        times.append(time.perf_counter() - t0)
    med = float(np.median(times))
    return {"frames": frames, "repeats": repeats, "median_seconds": med,
            "fps": frames / med if med > 0 else float("inf"), "width": cam.width, "height": cam.height}


def cmd_bench(args) -> int:
    from .io import load_any
    from .scene import ChunkedScene
    from .synthetic import ground_truth_scene, ring_cameras

    scene = load_any(args.scene) if args.scene else ground_truth_scene(0)
    if isinstance(scene, ChunkedScene):
        scene = scene.chunks[0][2]
    if args.camera:
        cam = parse_camera(args.camera, args.data, args.size, args.size)
    else:
        cam = ring_cameras(1, size=args.size)[0]
    res = bench_renders(scene, cam, 0.0, args.frames)
    if args.json:
        print(dump_json({**res, "n_gaussians": len(scene), "run": run_record(args)}))
    else:
        print(f"{len(scene)} gaussians at {cam.width}x{cam.height}: {res['fps']:.1f} renders/s "
              f"(median of {res['repeats']} x {args.frames} renders)")
        emit_record(args, run_record(args))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdgs", description="Compact dynamic Gaussian splatting.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, json_flag=True):
        sp.add_argument("--threads", type=int, default=None, help="cap kernel threads")
        if json_flag:
            sp.add_argument("--json", action="store_true", help="machine-readable output")
        sp.add_argument("--record", default=None, help="write the run record to this path")

    t = sub.add_parser("train", help="train a scene from a dataset manifest")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    g = t.add_mutually_exclusive_group()
    g.add_argument("--l", type=int, default=5, help="Fourier harmonics L (default 5)")
    g.add_argument("--poly", type=int, default=None, help="polynomial degree instead of Fourier")
    g.add_argument("--spline", type=int, default=None, help="spline control points instead of Fourier")
    t.add_argument("--time-varying-scale", action="store_true")
    t.add_argument("--sh", type=int, default=3, choices=range(4))
    t.add_argument("--iters", type=int, default=30_000)
    t.add_argument("--static-iters", type=int, default=None,
                   help="default: 3000, scaled with --iters")
    t.add_argument("--lambda-flow", type=float, default=1000.0)
    t.add_argument("--lambda-dssim", type=float, default=0.2)
    t.add_argument("--no-flow", action="store_true", help="drop the flow loss")
    t.add_argument("--chunk", type=int, default=None, help="frames (timesteps) per chunk")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--init-points", type=int, default=5_000)
    t.add_argument("--max-gaussians", type=int, default=None)
    t.add_argument("--downscale", type=int, default=1)
    t.add_argument("--log", default=None, help="training log path (default OUT.log.jsonl)")
    t.add_argument("--log-every", type=int, default=100)
    t.add_argument("--quiet", action="store_true")
    common(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render one image (and optional flow)")
    r.add_argument("--scene", required=True)
    r.add_argument("--camera", required=True,
                   help="frame index into --data, or 21 numbers: K (9, row-major) then world-to-camera 3x4")
    r.add_argument("--t", type=float, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--flow-out", default=None, help="forward flow .flo; backward goes to *_bwd.flo")
    r.add_argument("--dt", type=float, default=None)
    r.add_argument("--data", default=None)
    r.add_argument("--width", type=int, default=None)
    r.add_argument("--height", type=int, default=None)
    r.add_argument("--background", default="0,0,0")
    common(r)
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("compose", help="insert scene B into scene A")
    c.add_argument("--a", required=True)
    c.add_argument("--b", required=True)
    c.add_argument("--translate", default="0,0,0")
    c.add_argument("--rotate", default="0,0,0", help="xyz Euler angles in degrees")
    c.add_argument("--scale", type=float, default=1.0)
    c.add_argument("--tshift", type=float, default=0.0)
    c.add_argument("--out", required=True)
    common(c)
    c.set_defaults(func=cmd_compose)

    i = sub.add_parser("info", help="size and compression report")
    i.add_argument("--scene", required=True)
    i.add_argument("--T", type=int, default=300, help="timesteps for the baseline comparison")
    common(i)
    i.set_defaults(func=cmd_info)

    e = sub.add_parser("eval", help="PSNR / SSIM over a dataset split")
    e.add_argument("--scene", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--downscale", type=int, default=1)
    common(e)
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference check on random scenes")
    gc.add_argument("--n", type=int, default=10, help="gaussians per scene")
    gc.add_argument("--res", type=int, default=32)
    gc.add_argument("--scenes", type=int, default=1)
    gc.add_argument("--l", type=int, default=2)
    gc.add_argument("--sh", type=int, default=1, choices=range(4))
    gc.add_argument("--loss", default="all", choices=("all", "recon", "flow", "total", "quadratic"))
    gc.add_argument("--h", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-3)
    gc.add_argument("--seed", type=int, default=0)
    common(gc)
    gc.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="render throughput")
    b.add_argument("--scene", default=None, help="default: the 50-gaussian synthetic scene")
    b.add_argument("--camera", default=None)
    b.add_argument("--data", default=None)
    b.add_argument("--frames", type=int, default=30)
    b.add_argument("--size", type=int, default=256)
    common(b)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        import numba
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    from .io import DataError
    from .motion import DegenerateRotationError
    from .trainer import NonFiniteError
    from .gradients import NonFiniteGradientError
    try:
        return args.func(args)
    except UsageError as e:
        print(f"cdgs {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, NonFiniteGradientError, DegenerateRotationError, FloatingPointError) as e:
        print(f"cdgs {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"cdgs {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
