"""``infergate`` command line: serve, sim, eval, quantize, make-model."""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading

from . import evaluation, modelfile
from .config import ConfigError, GatewayConfig, load_config, parse_addr
from .detect import MicroCNNDetector, OracleDetector, ServiceTimeDetector
from .gateway import BindError, Gateway
from .nn import Conv, micro_detector, quantize_stack
from .quant import model_size_report
from .sim import StreamProfile, run_robots, write_report

EXIT_OK, EXIT_CONFIG, EXIT_BIND = 0, 2, 3


def build_detector(cfg: GatewayConfig):
    if cfg.detector == "oracle":
        det = OracleDetector(cfg.oracle_jitter_px, cfg.oracle_fp_rate, cfg.seed, len(cfg.classes))
    else:
        if cfg.model:
            try:
                stack = modelfile.load(cfg.model)
            except (OSError, modelfile.ModelFormatError) as e:
                raise ConfigError(f"cannot load model {cfg.model}: {e}") from None
        else:
            stack = micro_detector(num_classes=len(cfg.classes), seed=cfg.seed)
        if stack.num_classes != len(cfg.classes):
            raise ConfigError(f"model predicts {stack.num_classes} classes, config lists {len(cfg.classes)}")
        det = MicroCNNDetector(stack, cfg.conf_threshold, cfg.nms_threshold)
    if cfg.service_time_ms > 0:
        det = ServiceTimeDetector(det, cfg.service_time_ms / 1000)
    return det


def cmd_serve(args) -> int:
    try:
        cfg = load_config(args.config) if args.config else GatewayConfig()
        if args.listen:
            parse_addr(args.listen)
            cfg.listen = args.listen
        if args.detector:
            cfg.detector = args.detector
        if args.model:
            cfg.model = args.model
        if args.stats_interval is not None:
            cfg.stats_interval = args.stats_interval
        detector = build_detector(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    gateway = Gateway(cfg, detector)
    try:
        host, port = gateway.start()
    except BindError as e:
        print(f"bind error: {e}", file=sys.stderr)
        return EXIT_BIND
    print(f"listening on {host}:{port} detector={cfg.detector}", file=sys.stderr, flush=True)
    done = threading.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: done.set())
    while not done.wait(0.5):
        pass
    gateway.stop()
    return EXIT_OK


def cmd_sim(args) -> int:
    addr = parse_addr(args.gateway)
    profile = StreamProfile(args.fps, args.jitter, args.stall_prob)
    reports = run_robots(
        addr, args.robots, args.fps, args.duration, args.crowding, args.seed, profile, args.time_scale
    )
    if args.report:
        write_report(reports, args.report)
    failed = False
    for rep in reports:
        lat = evaluation.latency_summary(rep.latencies_us())
        mean = "-" if lat is None else f"{lat['mean'] / 1000:.2f}ms"
        status = rep.failure or rep.disconnect_reason or "ok"
        print(f"{rep.robot_id}: sent={rep.sent} results={rep.results} misrouted={rep.misrouted} "
              f"actions={len(rep.actions)} mean_latency={mean} ({status})")
        failed |= rep.failed
    return 1 if failed else 0


def cmd_eval(args) -> int:
    from .sim import ReportFormatError, read_records

    try:
        records = read_records(args.records)
        baselines = evaluation.load_baselines(args.baseline)
    except (OSError, ReportFormatError, evaluation.FixtureError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    rep = evaluation.report(records, args.crowded_threshold)
    lines = [f"frames {rep.frames}"]
    for c, ap in rep.ap_per_class.items():
        lines.append(f"ap50 class {c} {ap:.6f}")
    lines.append(f"map50 {'-' if rep.map50 is None else f'{rep.map50:.6f}'}")
    fp = rep.false_positive_pct
    lines.append(f"false_positive_pct {'-' if fp is None else f'{fp:.3f}'}")
    if rep.latency:
        lines.append("latency_us " + " ".join(f"{k}={v:.0f}" for k, v in rep.latency.items()))
    lines.append("")
    lines.append(evaluation.render_comparison(baselines, [evaluation.measured_row(args.name, rep)]))
    text = "\n".join(lines)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text, end="")
    return 0


def cmd_quantize(args) -> int:
    try:
        stack = modelfile.load(args.input)
    except (OSError, modelfile.ModelFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if args.mask == "all":
        mask = [True] * len(stack.parametric)
    else:
        mask = [isinstance(stack.layers[i], Conv) for i in stack.parametric]
    q = quantize_stack(stack, mask)
    modelfile.save(q, args.output)
    rep = model_size_report(stack, mask)
    print(f"fp32_bytes {rep.fp32_bytes} quantized_bytes {rep.quantized_bytes} ratio {rep.ratio:.4f}")
    return 0


def cmd_make_model(args) -> int:
    stack = micro_detector(num_classes=args.classes, num_boxes=args.boxes, seed=args.seed)
    modelfile.save(stack, args.out)
    print(f"wrote {args.out}: {stack.param_count()} parameters")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="infergate", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the inference gateway")
    s.add_argument("--listen", help="addr:port (default from config, 127.0.0.1:7700)")
    s.add_argument("--config")
    s.add_argument("--detector", choices=["micro-cnn", "oracle"])
    s.add_argument("--model")
    s.add_argument("--stats-interval", type=float)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("sim", help="run simulated robot clients")
    s.add_argument("--gateway", required=True)
    s.add_argument("--robots", type=int, default=1)
    s.add_argument("--fps", type=float, default=30.0)
    s.add_argument("--duration", type=float, default=10.0)
    s.add_argument("--crowding", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jitter", type=float, default=0.0)
    s.add_argument("--stall-prob", type=float, default=0.0)
    s.add_argument("--time-scale", type=float, default=1.0)
    s.add_argument("--report")
    s.set_defaults(func=cmd_sim)

    s = sub.add_parser("eval", help="score a simulator report")
    s.add_argument("--records", required=True)
    s.add_argument("--crowded-threshold", type=int, default=10)
    s.add_argument("--baseline")
    s.add_argument("--name", default="this run")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("quantize", help="int8-quantize a Q8M1 model file")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--mask", choices=["conv", "all"], default="all")
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("make-model", help="write a randomly initialised micro detector")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--boxes", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_model)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
