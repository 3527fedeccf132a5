"""Smoke test for the fbs_py extension.

Build with `cargo build --release -p fbs-py`, then run this script; it
looks for the shared library under target/release and loads it by path.
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import sys

ROOT = pathlib.Path(__file__).resolve().parents[1]


def load():
    for name in ("libfbs_py.so", "libfbs_py.dylib", "fbs_py.dll"):
        path = ROOT / "target" / "release" / name
        if path.exists():
            loader = importlib.machinery.ExtensionFileLoader("fbs_py", str(path))
            spec = importlib.util.spec_from_loader("fbs_py", loader)
            mod = importlib.util.module_from_spec(spec)
            loader.exec_module(mod)
            return mod
    sys.exit("fbs_py library not found; run `cargo build --release -p fbs-py` first")


def main():
    fbs = load()
    assert abs(fbs.reward(0.70, 1.0, 0.0) - 0.030) < 1e-12
    assert abs(fbs.reward(0.95, 1.0, -0.2) - 0.005) < 1e-12
    ratio, p = fbs.odds_ratio(0.432, 0.261)
    assert abs(ratio - 2.15) <= 0.01 and 0.0 <= p <= 1.0
    assert fbs.anneal_tau(0, 100) == 0.9 and abs(fbs.anneal_tau(100, 100) - 0.7) < 1e-12
    assert fbs.parse_labels("BIIOS") == [(0, 3, False), (3, 4, True), (4, 5, False)]
    assert abs(fbs.ctc_nll([[0.0] * 5], [0]) - math.log(5)) < 1e-12
    assert fbs.ctc_nll([[0.0] * 5], [0, 1]) is None
    assert abs(fbs.spearman([1, 2, 3, 4], [10, 20, 30, 45]) - 1.0) < 1e-12
    try:
        fbs.parse_labels("BX")
    except ValueError:
        pass
    else:
        raise AssertionError("bad label accepted")
    print("fbs_py smoke test passed")


if __name__ == "__main__":
    main()
