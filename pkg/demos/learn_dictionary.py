"""Learn a dictionary with an unrolled ISTA encoder and compare the three
gradient estimators.

Starts from a perturbed copy of the generating dictionary and trains with
the decoder-only gradient and the two backpropagated gradients.  Prints the
relative dictionary error every few epochs.

    python3 demos/learn_dictionary.py [--epochs 200] [--T 25]
"""

import argparse
import warnings

from pudle.datagen import InitSpec, make_problem, perturb_dictionary, tau_over_log_m
from pudle.encoder import EncoderConfig, LambdaSchedule, StepSizeWarning
from pudle.trainer import Optimizer, TrainConfig, train_pudle


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--T", type=int, default=25)
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    warnings.simplefilter("ignore", StepSizeWarning)

    problem = make_problem(50, 100, args.n, 5, seed=args.seed)
    d0 = perturb_dictionary(problem.d_star, InitSpec(tau_over_log_m(2.8, 50), args.seed))
    enc = EncoderConfig(T=args.T, alpha=0.2, schedule=LambdaSchedule.fixed(0.2))

    every = max(args.epochs // 8, 1)
    for kind in ("dec", "ae-lasso", "ae-ls"):
        cfg = TrainConfig(grad_kind=kind, eta=1e-3, epochs=args.epochs,
                          optimizer=Optimizer("adam", eps=1e-8), seed=args.seed)
        _, hist = train_pudle(problem, d0, enc, cfg)
        errs = hist.column("rel_error")
        trace = " ".join(f"{e:.3f}" for e in errs[every - 1::every])
        print(f"{kind:9s} initial {hist.initial_rel_error:.3f} | {trace} | final {errs[-1]:.4f}")


if __name__ == "__main__":
    main()
