"""Smoke test for the smpcontrol_py extension.

Build and install the wheel first:

    cd crates/python && maturin build --release -o dist && pip install dist/*.whl
    python python/smoke_test.py
"""

import math
import sys

import smpcontrol_py as smp


def check(label, ok, detail=""):
    print(f"{'PASS' if ok else 'FAIL'} {label} {detail}".rstrip())
    return ok


def main():
    results = []

    r = smp.riccati(1)
    results.append(check("riccati K0", abs(r["K0"] - 0.9586) < 5e-4, f"K0={r['K0']:.6f}"))

    for n, expected in [(1, -0.9586), (2, -1.8275), (5, -4.3638)]:
        p0 = smp.riccati(n, terminal="ones")["p0"]
        results.append(check(f"riccati ones n={n}", abs(p0 - expected) < 1e-3, f"p0={p0:.5f}"))

    results.append(check("gexp exact", smp.gexp_value(100, sigma_hi=2.0) == 400.0))

    value, se = smp.hopf_cole(10, samples=50_000)
    results.append(check("hopf-cole n=10", abs(value - 2.156) < 0.03 and se < 0.01, f"value={value:.4f} se={se:.4f}"))

    cfg = '{"iterations": 300, "steps": 25, "test_paths": 256}'
    out = smp.solve("lq", "3", 2, seed=1, config=cfg)
    p0 = sum(out["p0"]) / len(out["p0"])
    results.append(check("solve lq alg3", math.isfinite(out["cost"]) and abs(p0 + 0.9586) < 0.05, f"p0={p0:.4f} cost={out['cost']:.4f}"))
    results.append(check("curve recorded", out["curve"][0][0] == 0 and out["curve"][-1][0] == 300))

    try:
        smp.solve("gexp", "2", 2)
        results.append(check("gexp+alg2 rejected", False))
    except ValueError as e:
        results.append(check("gexp+alg2 rejected", "H_θ" in str(e)))

    results.append(check("gradcheck", all(passed for _, _, passed in smp.gradcheck())))
    results.append(check("problem names", "nonlinear" in smp.problems()))

    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main())
