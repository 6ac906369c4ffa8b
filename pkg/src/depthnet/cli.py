"""``depthnet`` command line: complete, verify, count, bench."""

from __future__ import annotations

import argparse
import hashlib
import os
import statistics
import sys
import threading

from .core import QFormat
from .graph import FixedPointConfig, build_depthnet, count_ops, count_params, layer_table, random_init
from .kernels import TileConfig
from .preprocess import DEFAULT_SCALE_MM, kitti_like_calibration, run_pipeline, synthetic_plane

EXIT_RUNTIME = 1
EXIT_INPUT = 2


class StageError(Exception):
    """Failure attributed to one pipeline stage."""

    def __init__(self, stage: str, message: str, code: int = EXIT_RUNTIME):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.code = code


def _size(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected AxB, got {text!r}") from None
    return a, b


def _qformat(text: str) -> QFormat:
    try:
        return QFormat.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _fixed_config(args) -> FixedPointConfig | None:
    if not args.fixed:
        return None
    feature = args.qf
    accum = args.acc or QFormat(32, min(2 * feature.frac_bits, 31))
    try:
        return FixedPointConfig(feature, accum, wide_pointwise=not args.narrow_pw)
    except ValueError as exc:
        raise StageError("config", str(exc), EXIT_INPUT) from None


def _network(args):
    h, w = args.size
    try:
        return build_depthnet(args.ds, h, w, args.encoder_units, args.decoder_convs)
    except ValueError as exc:
        raise StageError("config", str(exc), EXIT_INPUT) from None


def _weights(args, net):
    if args.weights is None:
        return random_init(net, args.seed)
    from .weights_io import load_weights

    if not os.path.exists(args.weights):
        raise StageError("weights", f"file not found: {args.weights}", EXIT_INPUT)
    try:
        return load_weights(args.weights, net)
    except (ValueError, OSError) as exc:
        raise StageError("weights", f"{args.weights}: {exc}", EXIT_INPUT) from None


def _calibration(args):
    from .lidar_io import read_calib

    if not os.path.exists(args.calib):
        raise StageError("calib", f"file not found: {args.calib}", EXIT_INPUT)
    w, h = args.image_size
    try:
        return read_calib(args.calib, w, h)
    except (ValueError, OSError) as exc:
        raise StageError("calib", f"{args.calib}: {exc}", EXIT_INPUT) from None


def _tile(args) -> TileConfig | None:
    return TileConfig(channel_partition=args.tile) if args.tile else None


def _frame_path(out: str, index: int, total: int) -> str:
    if total <= 1:
        return out
    root, ext = os.path.splitext(out)
    return f"{root}_{index:04d}{ext or '.pgm'}"


def _run(cloud, calib, net, weights, args, fixed, tile, timings=None):
    try:
        return run_pipeline(cloud, calib, net, weights, args.scale, fixed, tile, timings)
    except (ValueError, ArithmeticError) as exc:
        raise StageError("pipeline", str(exc)) from None


def _print_timings(timings: dict, out=None):
    parts = " ".join(f"{k}={v * 1000:.1f}ms" for k, v in timings.items())
    print(f"timing: {parts} total={sum(timings.values()) * 1000:.1f}ms", file=out or sys.stdout)


# ------------------------------------------------------------------ commands


def cmd_complete(args) -> int:
    from .lidar_io import FrameQueue, UdpCapture, read_kitti_bin
    from .pgm import write_pgm

    calib = _calibration(args)
    net = _network(args)
    weights = _weights(args, net)
    fixed = _fixed_config(args)
    tile = _tile(args)

    if args.bin is not None:
        if not os.path.exists(args.bin):
            raise StageError("input", f"file not found: {args.bin}", EXIT_INPUT)
        try:
            clouds = [read_kitti_bin(args.bin)]
        except (ValueError, OSError) as exc:
            raise StageError("input", f"{args.bin}: {exc}", EXIT_INPUT) from None
    else:
        queue = FrameQueue(capacity=2)
        try:
            cap = UdpCapture(args.udp, args.host)
        except OSError as exc:
            raise StageError("capture", str(exc), EXIT_INPUT) from None
        worker = threading.Thread(
            target=cap.run, args=(queue,),
            kwargs={"idle_timeout": args.idle_timeout, "max_frames": args.frames}, daemon=True)
        worker.start()
        clouds = _drain(queue, worker, args.frames)
        if not clouds:
            raise StageError("capture", f"no complete revolution received on UDP port {cap.port}")

    for i, cloud in enumerate(clouds):
        timings: dict = {}
        dense = _run(cloud, calib, net, weights, args, fixed, tile, timings)
        path = _frame_path(args.out, i, len(clouds))
        try:
            write_pgm(path, dense)
        except OSError as exc:
            raise StageError("output", f"{path}: {exc}") from None
        print(f"wrote {path} ({dense.width}x{dense.height})")
        _print_timings(timings)
    return 0


def _drain(queue, worker, limit):
    clouds = []
    while len(clouds) < limit:
        try:
            clouds.append(queue.get(timeout=0.1))
        except TimeoutError:
            if not worker.is_alive() and len(queue) == 0:
                break
    return clouds


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all(args.cases, args.seed, fault=args.inject_fault)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("verify: all suites passed" if ok else "verify: FAILED")
    return 0 if ok else EXIT_RUNTIME


def cmd_count(args) -> int:
    h, w = args.size
    nets = {ds: build_depthnet(ds, h, w, args.encoder_units, args.decoder_convs) for ds in (False, True)}
    shown = nets[args.ds]
    print(f"{'block':<10}{'input':>16}{'output':>16}{'params':>12}{'GOP':>10}")
    for row in layer_table(shown):
        shape_in = "x".join(map(str, row["input"]))
        shape_out = "x".join(map(str, row["output"]))
        print(f"{row['name']:<10}{shape_in:>16}{shape_out:>16}{row['params']:>12,}{row['ops'] / 1e9:>10.2f}")
        for sub in row["layers"]:
            label = f"  {sub['path']} [{sub['op']}]"
            print(f"{label:<42}{sub['params']:>12,}{sub['ops'] / 1e9:>10.2f}")
    for ds, net in nets.items():
        name = "ds" if ds else "standard"
        print(f"{name}: params={count_params(net):,} ops={count_ops(net) / 1e9:.2f} GOP")
    factor = count_params(nets[False]) / count_params(nets[True])
    print(f"ds reduction factor: {factor:.2f}")
    return 0


def cmd_bench(args) -> int:
    net = _network(args)
    weights = _weights(args, net)  # excluded from the timed region
    fixed = _fixed_config(args)
    tile = _tile(args)
    if args.bin is not None:
        from .lidar_io import read_kitti_bin

        calib = _calibration(args)
        cloud = read_kitti_bin(args.bin)
    else:
        w, h = args.image_size
        calib = kitti_like_calibration(w, h)
        cloud = synthetic_plane(calib)

    for _ in range(args.warmup):
        _run(cloud, calib, net, weights, args, fixed, tile)
    runs: list[dict] = []
    dense = None
    for _ in range(args.frames):
        timings: dict = {}
        dense = _run(cloud, calib, net, weights, args, fixed, tile, timings)
        runs.append(timings)

    for stage in runs[0]:
        ms = [r[stage] * 1000 for r in runs]
        print(f"{stage:<8} mean={statistics.mean(ms):9.2f} ms  median={statistics.median(ms):9.2f} ms")
    total_ms = statistics.mean(sum(r.values()) * 1000 for r in runs)
    cnn_s = statistics.mean(r["cnn"] for r in runs)
    ops = count_ops(net)
    print(f"latency={total_ms:.2f} ms fps={1000.0 / total_ms:.3f}")
    print(f"ops={ops / 1e9:.2f} GOP effective={ops / cnn_s / 1e9:.3f} GOPS")
    print(f"checksum={hashlib.sha256(dense.values.tobytes()).hexdigest()}")
    print("reference (FPGA accelerator): 90.1 ms, 11.1 fps, 168.1 GOPS")
    return 0


# ------------------------------------------------------------------- parser


def _add_model_args(p):
    p.add_argument("--weights", metavar="PATH", help="weight file (default: seeded random weights)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ds", action="store_true", help="depthwise separable variant")
    p.add_argument("--fixed", action="store_true", help="fixed-point arithmetic")
    p.add_argument("--qf", type=_qformat, default=QFormat(16, 8), metavar="TOTAL:FRAC",
                   help="feature format (default 16:8)")
    p.add_argument("--acc", type=_qformat, default=None, metavar="TOTAL:FRAC",
                   help="accumulator format (default 32:2*FRAC)")
    p.add_argument("--narrow-pw", action="store_true", help="accumulate pointwise sums in the feature format")
    p.add_argument("--scale", type=float, default=DEFAULT_SCALE_MM, metavar="MM", help="residual scale in mm")
    p.add_argument("--tile", type=int, default=0, metavar="N", help="channel partition for tiled execution")
    p.add_argument("--size", type=_size, default=(256, 1216), metavar="HxW", help="network input size")
    p.add_argument("--image-size", type=_size, default=(1242, 375), metavar="WxH", help="camera image size")
    p.add_argument("--encoder-units", type=int, default=2, help=argparse.SUPPRESS)
    p.add_argument("--decoder-convs", type=int, default=2, help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthnet", description="LiDAR depth completion engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("complete", help="dense depth map from a scan or a live sensor")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--bin", metavar="PATH", help="KITTI velodyne .bin scan")
    src.add_argument("--udp", type=int, metavar="PORT", help="listen for VLP-16 packets")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--frames", type=int, default=1, help="revolutions to process in UDP mode")
    p.add_argument("--idle-timeout", type=float, default=5.0, metavar="S")
    p.add_argument("--calib", required=True, metavar="PATH")
    p.add_argument("--out", default="dense.pgm", metavar="PATH")
    _add_model_args(p)
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("verify", help="check fast kernels against slow oracles")
    p.add_argument("--cases", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true", help="perturb the reference path (must fail)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("count", help="parameter and operation counts")
    p.add_argument("--ds", action="store_true", help="show the per-layer table of the DS variant")
    p.add_argument("--size", type=_size, default=(256, 1216), metavar="HxW")
    p.add_argument("--encoder-units", type=int, default=2, help=argparse.SUPPRESS)
    p.add_argument("--decoder-convs", type=int, default=2, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("bench", help="per-stage latency and throughput")
    p.add_argument("--bin", metavar="PATH", help="scan to use (default: synthetic plane)")
    p.add_argument("--calib", metavar="PATH", help="required with --bin")
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    _add_model_args(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "tile", 0) < 0:
        parser.error("--tile must be positive")
    if args.command == "bench" and args.bin and not args.calib:
        parser.error("--bin requires --calib")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"depthnet: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
