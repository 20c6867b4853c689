"""Gateway overhead (end-to-end latency minus detector service time) as the
number of concurrent clients grows."""

import argparse

import numpy as np

from infergate.config import GatewayConfig
from infergate.detect import OracleDetector, ServiceTimeDetector
from infergate.gateway import Gateway
from infergate.sim import run_robots


def overhead_ms(n_clients, service_s, duration, fps):
    stub = ServiceTimeDetector(OracleDetector(), service_s)
    gw = Gateway(GatewayConfig(listen="127.0.0.1:0"), stub, stats_out=lambda _: None)
    addr = gw.start()
    try:
        reports = run_robots(addr, n_clients, fps, duration, 3, 9)
    finally:
        gw.stop()
    gateway = gw.stats.pipeline.latency.mean() / 1000 - service_s * 1000
    client = float(np.mean([x for r in reports for x in r.latencies_us()])) / 1000 - service_s * 1000
    return gateway, client


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--clients", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--service-ms", type=float, default=2.0)
    ap.add_argument("--duration", type=float, default=5.0)
    ap.add_argument("--fps", type=float, default=30.0)
    args = ap.parse_args()

    print(f"{'clients':>7} {'gateway_ms':>10} {'client_ms':>9}")
    for n in args.clients:
        g, c = overhead_ms(n, args.service_ms / 1000, args.duration, args.fps)
        print(f"{n:>7} {g:>10.2f} {c:>9.2f}")


if __name__ == "__main__":
    main()
