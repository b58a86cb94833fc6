"""How far each gradient estimator sits from the local and global
descent directions as the encoder unrolls.

Local direction: decoder gradient at the lasso solution for the current
dictionary.  Global direction: decoder gradient at the true codes, evaluated
at the generating dictionary itself, where any nonzero error is bias.

    python3 demos/gradient_bias.py [--T 200]
"""

import argparse
import warnings

from pudle.datagen import InitSpec, make_problem, perturb_dictionary, tau_over_log_m
from pudle.encoder import EncoderConfig, LambdaSchedule, StepSizeWarning
from pudle.theory import gradient_error_curves, plateau_check


def show(title, curves, T):
    marks = [t for t in (1, 10, 50, 100, 150, 200) if t <= T]
    print(title)
    print("  t        " + "".join(f"{t:>11d}" for t in marks))
    for kind, curve in curves.items():
        print(f"  {kind:9s}" + "".join(f"{curve[t - 1]:11.2e}" for t in marks))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    warnings.simplefilter("ignore", StepSizeWarning)

    problem = make_problem(50, 100, 200, 5, seed=args.seed)
    d = perturb_dictionary(problem.d_star, InitSpec(tau_over_log_m(0.55, 50), args.seed))
    enc = EncoderConfig(T=args.T, alpha=0.2, schedule=LambdaSchedule.fixed(0.2))

    near = gradient_error_curves(problem, d, enc)
    show("error against the local direction, D near D*", near.grad_vs_hat, args.T)
    flat, a, b = plateau_check(near.grad_vs_hat["ae-ls"], near.grad_vs_hat["ae-lasso"])
    print(f"  ae-ls tail slope {a:.1e} vs ae-lasso {b:.1e} (log10 per layer); plateau: {flat}")

    at_star = gradient_error_curves(problem, problem.d_star, enc)
    show("error against the global direction, D = D*", at_star.grad_vs_star, args.T)


if __name__ == "__main__":
    main()
