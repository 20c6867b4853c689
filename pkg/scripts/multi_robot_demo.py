"""Several simulated robots share one in-process gateway; print per-robot
routing counts and the resulting metric report."""

import argparse

from infergate import evaluation as ev
from infergate.config import GatewayConfig
from infergate.detect import OracleDetector
from infergate.gateway import Gateway
from infergate.sim import run_robots, to_records


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--robots", type=int, default=3)
    ap.add_argument("--fps", type=float, default=10.0)
    ap.add_argument("--duration", type=float, default=10.0)
    ap.add_argument("--crowding", type=int, default=3)
    ap.add_argument("--time-scale", type=float, default=5.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    gw = Gateway(GatewayConfig(listen="127.0.0.1:0"), OracleDetector(seed=args.seed), stats_out=lambda _: None)
    addr = gw.start()
    try:
        reports = run_robots(addr, args.robots, args.fps, args.duration, args.crowding, args.seed,
                             time_scale=args.time_scale)
    finally:
        gw.stop()

    for r in reports:
        print(f"{r.robot_id}: sent={r.sent} results={r.results} misrouted={r.misrouted} "
              f"dropped={gw.stats.dropped_for(r.robot_id)}")
    rep = ev.report(to_records(reports))
    print(f"mAP50={rep.map50:.4f} frames={rep.frames}")
    if rep.latency:
        print("latency_us " + " ".join(f"{k}={v:.0f}" for k, v in rep.latency.items()))


if __name__ == "__main__":
    main()
