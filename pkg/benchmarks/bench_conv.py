"""Compare the compiled conv1d kernels with the numpy fallback.

Usage: python benchmarks/bench_conv.py [--repeat 5] [--csv out.csv]

Shapes are the ones the default constructor bank issues for a batch of 32
8-channel, 720-step windows. Every case first checks that all backends
agree, then reports the best wall time over ``--repeat`` runs for forward,
input gradient and weight gradient. The "active" column times whatever
``catsts.kernels`` dispatches to in this process.
"""
import argparse
import csv
import sys
import timeit

import numpy as np

from catsts import kernels

try:
    from catsts._ext import _conv
except ImportError:
    _conv = None

# name, (B, C_in, L), (C_out, C_in / groups, K), stride, groups
CASES = [
    ("dense K=193", (32, 8, 912), (8, 8, 193), 1, 1),
    ("dense K=49", (32, 8, 768), (8, 8, 49), 1, 1),
    ("depthwise K=49", (32, 8, 768), (8, 1, 49), 1, 8),
    ("patch K=24 s=24", (32, 8, 720), (192, 8, 24), 24, 1),
    ("patch K=12 s=12", (32, 8, 720), (96, 8, 12), 12, 1),
    ("pointwise K=1", (32, 8, 720), (8, 8, 1), 1, 1),
]

OPS = ("forward", "grad_input", "grad_weight")


def backends():
    out = {"numpy": dict(zip(OPS, kernels._NUMPY))}
    if _conv is not None:
        out["cython"] = dict(zip(OPS, (_conv.conv1d_forward, _conv.conv1d_backward_input, _conv.conv1d_backward_weight)))
    out["active"] = dict(
        zip(OPS, (kernels.conv1d_forward, kernels.conv1d_backward_input, kernels.conv1d_backward_weight))
    )
    return out


def _calls(ops, x, w, g, stride, groups):
    K = w.shape[-1]
    return {
        "forward": lambda: ops["forward"](x, w, stride, groups),
        "grad_input": lambda: ops["grad_input"](g, w, x.shape[-1], stride, groups),
        "grad_weight": lambda: ops["grad_weight"](g, x, K, stride, groups),
    }


def run(repeat):
    rng = np.random.default_rng(0)
    impls = backends()
    rows = []
    for name, xs, ws, stride, groups in CASES:
        x = rng.normal(size=xs)
        w = rng.normal(size=ws)
        g = rng.normal(size=impls["numpy"]["forward"](x, w, stride, groups).shape)
        calls = {b: _calls(ops, x, w, g, stride, groups) for b, ops in impls.items()}
        for op in OPS:
            ref = calls["numpy"][op]()
            times = {}
            for b in impls:
                np.testing.assert_allclose(calls[b][op](), ref, rtol=1e-10, atol=1e-10)
                times[b] = min(timeit.repeat(calls[b][op], number=1, repeat=repeat))
            rows.append((name, op, times["numpy"], times.get("cython"), times["active"]))
    return rows


def _ms(t):
    return f"{1e3 * t:10.2f}" if t is not None else f"{'-':>10}"


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5, help="timing runs per case (best is kept)")
    parser.add_argument("--csv", help="also write the table to this CSV file")
    args = parser.parse_args(argv)

    print(f"active backend: {kernels.BACKEND}; compiled module available: {_conv is not None}")
    rows = run(args.repeat)
    print(f"{'case':<18}{'op':<13}{'numpy ms':>10}{'cython ms':>10}{'active ms':>10}{'speedup':>9}")
    for name, op, t_np, t_cy, t_act in rows:
        print(f"{name:<18}{op:<13}{_ms(t_np)}{_ms(t_cy)}{_ms(t_act)}{t_np / t_act:8.2f}x")
    total = {k: sum(r[i] for r in rows) for k, i in (("numpy", 2), ("active", 4))}
    print(f"total: numpy {1e3 * total['numpy']:.1f} ms, active {1e3 * total['active']:.1f} ms")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case", "op", "numpy_s", "cython_s", "active_s"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
