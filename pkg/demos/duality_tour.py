"""Recover scores from velocities, first analytically and then from a trained net.

    python demos/duality_tour.py
"""

import numpy as np

from scoreflow.oracles import (
    GaussianData,
    MixtureData,
    gaussian_marginal_score,
    gaussian_optimal_velocity,
    train_mixture_velocity,
    trained_velocity_duality,
)
from scoreflow.score import closed_form_score


def analytic():
    data = GaussianData(np.array([0.0]), 4.0)
    a = np.array([1.0])
    print("Gaussian data N(0, 4), query a = 1")
    print(f"{'t':>5} {'velocity':>10} {'score from v':>13} {'exact score':>12}")
    for t in (0.0, 0.25, 0.5, 0.75, 0.99):
        v = gaussian_optimal_velocity(data, a, t)
        print(f"{t:5.2f} {v[0]:10.5f} {closed_form_score(v, a, t)[0]:13.5f} "
              f"{gaussian_marginal_score(data, a, t)[0]:12.5f}")


def trained():
    mix = MixtureData(np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]), np.array([0.0625, 0.0625]))
    print("\nfitting a velocity field to a two-mode mixture (about 20 s)")
    res = train_mixture_velocity(mix, steps=3000)
    t_grid = np.linspace(0.0, 0.9, 10)
    rep = trained_velocity_duality(res.params, mix, np.linspace(-2, 2, 81), t_grid)
    print(f"final FM loss {res.final_loss:.4f}")
    print(f"median score error in the bulk {rep.median_bulk_error:.4f}, worst {rep.max_bulk_error:.4f}")
    for i, t in enumerate(t_grid):
        row = rep.errors[i][rep.bulk[i]]
        if row.size:
            print(f"  t = {t:.1f}: median {np.median(row):.4f} over {row.size} bulk points")


if __name__ == "__main__":
    analytic()
    trained()
