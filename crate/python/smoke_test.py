"""Smoke test for the Python extension.

Build first:

    cargo build --release -p thetaflex-py --features extension-module

then run `python3 python/smoke_test.py`. The script copies the built library
into a temporary directory under the module name and imports it from there.
"""

import json
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load():
    try:
        import thetaflex  # noqa: F401 - already installed

        return thetaflex
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libthetaflex.so")
        if os.path.exists(lib):
            tmp = tempfile.mkdtemp()
            shutil.copy(lib, os.path.join(tmp, "thetaflex.so"))
            sys.path.insert(0, tmp)
            import thetaflex

            return thetaflex
    sys.exit("build the extension first (see the module docstring)")


def main():
    tf = load()

    tau = tf.RiemannMatrix.identity(1)
    value, _, bound = tf.theta_eval([0j], tau)
    expected = math.pi ** 0.25 / math.gamma(0.75)
    assert abs(value - expected) < 1e-12, value
    assert bound <= 1e-15

    # derivative along a zero direction vanishes
    _, derivs, _ = tf.theta_eval([0.3 + 0.1j], tau, [[[0j]]])
    assert derivs[0] == 0

    problem = {
        "tau": json.loads(tau.to_json()),
        "target": "hirota",
        "free_vars": {"v": True, "w": True, "d": True},
        "init": {"U": [{"re": 1.0, "im": 0.0}]},
        "sample_count": 100,
        "seed": 42,
        "budget": {"restarts": 4, "iterations": 200},
        "tolerance": 1e-9,
    }
    result = json.loads(tf.fit(json.dumps(problem)))
    assert result["converged"], result["best_residual"]
    jet = json.dumps(result["best_jet"])
    assert tf.hirota_residual([0.2 + 0.3j], tau, jet) < 1e-9

    tau2 = tf.RiemannMatrix.random(2, 7)
    assert tf.decomposability_indicator(tau2) >= 1e-2
    product = tf.RiemannMatrix([[1j, 0j], [0j, 2j]])
    assert tf.decomposability_indicator(product) <= 1e-10
    assert len(tf.kummer_map([0.1j, 0.2 + 0j], tau2)) == 4

    try:
        tf.RiemannMatrix([[1j, 1 + 0j], [0j, 1j]])
    except ValueError as e:
        assert str(e).startswith("TAU_NOT_SYMMETRIC"), e
    else:
        raise AssertionError("asymmetric tau accepted")

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
