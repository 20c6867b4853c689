"""Drive the gateway faster than its detector can serve and report how the
frame-dropping policy keeps the queue fresh."""

import argparse

from infergate.config import GatewayConfig
from infergate.detect import OracleDetector, ServiceTimeDetector
from infergate.gateway import Gateway
from infergate.sim import run_robots


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--robots", type=int, default=2)
    ap.add_argument("--fps", type=float, default=30.0)
    ap.add_argument("--duration", type=float, default=10.0)
    ap.add_argument("--service-ms", type=float, default=50.0)
    ap.add_argument("--seed", type=int, default=8)
    args = ap.parse_args()

    stub = ServiceTimeDetector(OracleDetector(), args.service_ms / 1000)
    gw = Gateway(GatewayConfig(listen="127.0.0.1:0"), stub, stats_out=lambda _: None)
    addr = gw.start()
    try:
        reports = run_robots(addr, args.robots, args.fps, args.duration, 3, args.seed)
    finally:
        gw.stop()

    for r in reports:
        lat = sorted(r.latencies_us())
        p50 = lat[len(lat) // 2] / 1000 if lat else float("nan")
        print(f"{r.robot_id}: sent={r.sent} results={r.results} "
              f"dropped={gw.stats.dropped_for(r.robot_id)} p50_latency={p50:.1f}ms")
    events = gw.pipeline.queue.drop_events
    sizes = [len(e.purged) for e in events]
    print(f"drop events={len(events)} frames purged={sum(sizes)} largest purge={max(sizes, default=0)}")
    print("stats:", gw.stats.pipeline.line())


if __name__ == "__main__":
    main()
