"""Size ratio of random detectors quantized in full and with a per-layer
mask chosen to hit a target ratio."""

import argparse

import numpy as np

from infergate import nn, quant


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--target", type=float, default=236.52 / 94.89, help="fp32/quantized size ratio to aim for")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    micro = nn.micro_detector(seed=args.seed)
    print(f"micro: params={micro.param_count()} full ratio={quant.model_size_report(micro).ratio:.4f}")

    print(f"target {args.target:.4f}: closed-form fraction {quant.fraction_for_ratio(args.target):.5f}")
    print(f"{'input':>6} {'classes':>7} {'params':>10} {'ratio':>8} {'fraction':>8}")
    for side in (128, 224, 416):
        for classes in (4, 80):
            stack = nn.build_stack(nn.full_scale_architecture(), (side, side, 3), 8, classes,
                                   np.random.default_rng(args.seed))
            sizes = stack.tensor_sizes()
            mask = quant.mask_for_ratio(sizes, args.target)
            ratio = quant.size_report(sizes, mask).ratio
            frac = sum(sum(s) for s, m in zip(sizes, mask) if m) / stack.param_count()
            print(f"{side:>6} {classes:>7} {stack.param_count():>10} {ratio:>8.4f} {frac:>8.4f}")


if __name__ == "__main__":
    main()
