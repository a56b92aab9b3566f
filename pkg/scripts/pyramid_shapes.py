"""Run the default network once at full crop size and print the feature pyramid.

Needs about 3 GB of memory and a couple of minutes on one core.
"""
import argparse
import time

import numpy as np

from srmamba.network import NetworkConfig, forward, init_weights, param_count
from srmamba.tensor import Tensor, no_grad


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, nargs=3, default=[224, 224, 64])
    args = ap.parse_args()

    cfg = NetworkConfig()
    w = init_weights(cfg, seed=0)
    x = Tensor(np.random.default_rng(0).standard_normal((1, *args.size)).astype(np.float32))
    t0 = time.perf_counter()
    with no_grad():
        out = forward(x, w, cfg)
    print(f"parameters: {param_count(cfg):,}")
    for i, f in enumerate(out.features, 1):
        print(f"f{i}: {f.shape}")
    for i in sorted(out.maps, reverse=True):
        print(f"S{i}: {out.maps[i].shape}")
    print(f"logits: {out.logits.shape}  ({time.perf_counter() - t0:.1f}s)")


if __name__ == "__main__":
    main()
