"""Explain reconstructions of new samples through the training set.

Encodes a training set, fits a ridge-regularised dictionary on the codes,
rebuilds that dictionary as a weighted combination of training samples and
lists the training samples that contribute most to one test reconstruction.

    python3 demos/representer.py [--top 5]
"""

import argparse
import warnings

import numpy as np

from pudle.datagen import make_problem
from pudle.encoder import EncoderConfig, LambdaSchedule, StepSizeWarning, encode
from pudle.interpret import (build_model, code_similarity_contributions, reconstruct_dictionary,
                             ridge_fit_dictionary, top_contributors)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--top", type=int, default=5)
    ap.add_argument("--omega", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    warnings.simplefilter("ignore", StepSizeWarning)

    problem = make_problem(50, 100, 510, 5, seed=args.seed)
    x_train, x_test = problem.x[:, :500], problem.x[:, 500:]
    enc = EncoderConfig(T=100, alpha=0.2, schedule=LambdaSchedule.fixed(0.2))
    z_train = encode(x_train, problem.d_star, enc).z_T

    d, gnorm, iters = ridge_fit_dictionary(x_train, z_train, args.omega, d0=problem.d_star)
    model = build_model(x_train, z_train, args.omega)
    d_tilde = reconstruct_dictionary(model)
    print(f"ridge fit: {iters} iterations, gradient norm {gnorm:.1e}")
    print(f"dictionary vs training-set form: relative difference "
          f"{np.linalg.norm(d - d_tilde) / np.linalg.norm(d):.1e}")

    z = encode(x_test[:, 0], d, enc).z_T
    c = code_similarity_contributions(model, z)
    print(f"test sample 0: reconstruction error vs sum of contributions "
          f"{np.linalg.norm(d_tilde @ z - c.reconstruction):.1e}")
    print(f"top {args.top} training samples by weight "
          f"(reconstruction norm {np.linalg.norm(c.reconstruction):.3f}):")
    for k in top_contributors(c.beta, args.top):
        print(f"  train {k:4d}  beta {c.beta[k]:+.4f}  code similarity {c.similarity[k]:+.3f}  "
              f"contribution norm {np.linalg.norm(c.vectors[:, k]):.3f}")


if __name__ == "__main__":
    main()
