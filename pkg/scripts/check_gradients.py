"""Run the finite-difference gradient suite and print one line per case."""
import sys
import time

from rfnet.gradient_suite import run_gradient_suite


def main():
    start = time.perf_counter()
    results = run_gradient_suite()
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        print(f"{status} {r.name:40s} {r.kind:9s} err {r.error:.2e} (tol {r.tolerance:.0e})  {r.seconds:.2f}s")
    print(f"total {time.perf_counter() - start:.1f}s")
    return 0 if all(r.passed for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
