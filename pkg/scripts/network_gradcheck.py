"""Finite-difference check of the whole network loss on a sampled fraction of weights.

Uses a small pyramid at its real initialisation, f64 throughout, and
extrapolated differences. A few minutes per seed.
"""
import argparse
import json

import numpy as np

from srmamba import config
from srmamba.gradcheck import finite_diff_check
from srmamba.network import NetworkConfig, forward, init_weights
from srmamba.tensor import Tensor
from srmamba.train import sphere_volume, total_loss


def check(seed, fraction, cfg, size):
    rng = np.random.default_rng(seed)
    w = init_weights(cfg, seed=seed, dtype=np.float64)
    xv, m = sphere_volume(size, seed=seed)
    x = Tensor(xv[None], dtype=np.float64)
    leaves = list(w.values())
    sizes = [t.size for t in leaves]
    flat = rng.choice(sum(sizes), size=max(1, int(sum(sizes) * fraction)), replace=False)
    bounds = np.cumsum([0] + sizes)
    idx = [np.sort(flat[(flat >= lo) & (flat < hi)] - lo) for lo, hi in zip(bounds[:-1], bounds[1:])]
    rep = finite_diff_check(lambda *_: total_loss(forward(x, w, cfg), m)[0], leaves,
                            h=1e-3, tol=1e-3, indices=idx, extrapolate=True)
    out = {"seed": seed, "checked": rep.checked, "max_rel_err": rep.max_rel_err, "pass": rep.passed}
    if rep.worst:
        k, i, ana, num = rep.worst
        out["worst"] = {"weight": list(w)[k], "index": i, "analytic": ana, "numeric": num}
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--fraction", type=float, default=0.01)
    ap.add_argument("--channels", type=int, nargs="+", default=[4, 8, 16])
    ap.add_argument("--state-dim", type=int, default=4)
    ap.add_argument("--size", type=int, nargs=3, default=[16, 16, 8])
    args = ap.parse_args()
    cfg = NetworkConfig(stage_channels=tuple(args.channels), state_dim=args.state_dim)
    with config.precision("f64"):
        for s in args.seeds:
            print(json.dumps(check(s, args.fraction, cfg, tuple(args.size))), flush=True)


if __name__ == "__main__":
    main()
