"""How many Sinkhorn iterations reach 1e-6 marginals, as a function of epsilon.

    python scripts/sinkhorn_convergence.py

Scores are uniform in [-1, 1] with K <= 8 prototypes and B <= 16 images.
Prints, per epsilon, the fraction of matrices within tolerance after a
given number of iterations. Takes a few minutes.
"""

import numpy as np

from woundfill.swav import sinkhorn_codes


def marginal_error(q):
    k, b = q.shape
    return max(np.abs(q.sum(axis=1) - 1 / k).max(), np.abs(q.sum(axis=0) - 1 / b).max())


def main(n=100, tol=1e-6):
    rng = np.random.default_rng(0)
    mats = [rng.uniform(-1, 1, (rng.integers(1, 9), rng.integers(1, 17))) for _ in range(n)]
    iters = (10, 50, 100, 200, 500, 1000, 2000)
    print("epsilon," + ",".join(f"iters_{i}" for i in iters))
    for eps in (0.02, 0.05, 0.1, 0.2, 0.5, 1.0):
        row = [np.mean([marginal_error(sinkhorn_codes(s, eps, it)) <= tol for s in mats]) for it in iters]
        print(f"{eps}," + ",".join(f"{r:.2f}" for r in row))


if __name__ == "__main__":
    main()
