"""Smoke test for the gpr_pricer_py extension module.

Build the extension first, then run with the build directory on the path:

    cargo build --release -p gpr-pricer-py
    cp target/release/libgpr_pricer_py.so gpr_pricer_py.so  # into a dir on sys.path
    python python/smoke_test.py
"""

import math

import gpr_pricer_py


def main() -> None:
    # deterministic benchmark: the 1000-step CRR price of the d=5 geometric
    # basket put (reference value 3.45)
    price, seconds = gpr_pricer_py.price_bs(
        "crr-benchmark", "geo-put", 5, n_steps=1000
    )
    assert math.isfinite(price) and seconds >= 0.0
    assert abs(price - 3.45) < 0.01, price
    print(f"crr-benchmark d=5 geo-put: {price:.4f} ({seconds:.1f}s)")

    # a deep in-the-money rough Bergomi put exercises immediately
    price, seconds = gpr_pricer_py.price_rbergomi(
        "gpr-ei", 140.0, n_steps=4, p_count=64
    )
    assert price == 40.0, price
    print(f"rbergomi gpr-ei K=140 deep ITM: {price:.2f} ({seconds:.1f}s)")

    # a tiny GPR-EI Black-Scholes run stays within no-arbitrage bounds
    price, seconds = gpr_pricer_py.price_bs(
        "gpr-ei", "geo-put", 2, n_steps=5, p_count=200
    )
    assert 0.0 <= price <= 100.0
    print(f"gpr-ei d=2 geo-put (reduced scale): {price:.4f} ({seconds:.1f}s)")

    print("smoke test passed")


if __name__ == "__main__":
    main()
