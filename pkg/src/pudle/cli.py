"""Command-line experiment harness.

    pudle <gen|encode|train|theory|interpret> --config <path|preset>
          [--out DIR] [--force] [--threads N]

Every command reads one JSON config (validated before any compute), reads
its inputs from ``input_dir`` (default: the output directory) and writes
its outputs plus a merged ``manifest.json`` under the output directory.
``PUDLE_SEED`` overrides the config seed.

Exit codes: 0 success, 1 a configured assertion failed, 2 bad config or
usage, 3 budget guard, 4 missing input or output collision.
"""

import argparse
import json
import os
import subprocess
import sys
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import config as C
from . import io
from .datagen import SyntheticProblem, coherence, make_problem, perturb_dictionary
from .encoder import LambdaSchedule, StepSizeWarning, encode, solve_lasso
from .interpret import (build_model, code_similarity_contributions, reconstruct_dictionary,
                        ridge_fit_dictionary, stationarity_residual, top_contributors,
                        transformed_samples, atom_weights)
from .metrics import relative_error, support_stats
from .theory import (amplitude_bias, code_error_curves, first_increase, gradient_error_curves,
                     jacobian_decay_fit, jacobian_error_curve, one_step_support_recovery_rate,
                     plateau_check, precision_floor, rate_fit, support_preservation_trace, support_selection_step)
from .trainer import train_altmin, train_pudle

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_BUDGET, EXIT_IO = 0, 1, 2, 3, 4
COMMANDS = ("gen", "encode", "train", "theory", "interpret")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


class Run:
    """Shared state of one command invocation."""

    def __init__(self, command, cfg, out, force, seed):
        self.command = command
        self.cfg = cfg
        self.out = Path(out)
        self.input = Path(cfg.get("input_dir", out))
        self.force = force
        self.seed = seed
        self.budget = {**C.DEFAULT_BUDGET, **cfg.get("budget", {})}
        self.outputs = []
        self.assertions = []

    def section(self, name):
        if name not in self.cfg:
            raise CliError(f"command {self.command!r} needs a {name!r} section in the config",
                           EXIT_CONFIG)
        return self.cfg[name]

    def claim(self, *paths):
        """Refuse to overwrite existing outputs unless ``--force`` was given."""
        for p in paths:
            p = self.out / p
            if p.exists() and not self.force:
                raise CliError(f"output {p} already exists; pass --force to overwrite", EXIT_IO)

    def save_matrix(self, name, a):
        self.claim(f"{name}.bin", f"{name}.meta.json")
        io.save_matrix(self.out, name, a)
        self.outputs += [f"{name}.bin", f"{name}.meta.json"]

    def write_csv(self, name, header, rows):
        self.claim(name)
        io.write_rows_csv(self.out / name, header, rows)
        self.outputs.append(name)

    def write_json(self, name, obj):
        self.claim(name)
        io.write_json_atomic(self.out / name, obj)
        self.outputs.append(name)

    def check(self, name, passed, **detail):
        self.assertions.append({"name": name, "passed": bool(passed), **_jsonable(detail)})
        return passed

    def load(self, name):
        try:
            return io.load_matrix(self.input, name)
        except FileNotFoundError:
            raise CliError(f"missing input matrix {name!r} in {self.input}; run `pudle gen` first",
                           EXIT_IO) from None

    def load_problem(self):
        meta_path = self.input / "problem.json"
        if not meta_path.exists():
            raise CliError(f"no problem.json in {self.input}; run `pudle gen` first", EXIT_IO)
        meta = json.loads(meta_path.read_text())
        law = C.amplitude_law({"amplitude": dict(meta["amplitude"])})
        z_star = self.load("z_star") if io.matrix_exists(self.input, "z_star") else None
        return SyntheticProblem(self.load("d_star"), z_star, self.load("x"), meta["s"], law,
                                meta["snr_db"], meta["seed"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _git_describe():
    try:
        r = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                           text=True, timeout=5, cwd=Path(__file__).parent)
        return r.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def _check_mp(run, m, p):
    if m * p > run.budget["max_mp"]:
        raise CliError(f"m*p = {m * p} exceeds the training budget {run.budget['max_mp']}",
                       EXIT_BUDGET)


# --------------------------------------------------------------------------
# commands


def cmd_gen(run: Run):
    pc = run.section("problem")
    if pc["s"] > pc["p"]:
        raise CliError("problem.s must not exceed problem.p", EXIT_CONFIG)
    law = C.amplitude_law(pc)
    prob = make_problem(pc["m"], pc["p"], pc["n"], pc["s"], law, pc.get("snr_db"), run.seed)
    run.save_matrix("d_star", prob.d_star)
    run.save_matrix("z_star", prob.z_star)
    run.save_matrix("x", prob.x)
    summary = {**prob.metadata(), "c_min": prob.c_min}
    if prob.p > 1:
        summary["coherence"] = coherence(prob.d_star)
    if "init" in run.cfg:
        spec = C.init_spec(run.cfg["init"], prob.m, run.seed)
        d0 = perturb_dictionary(prob.d_star, spec)
        run.save_matrix("d_init", d0)
        summary["tau_b"] = spec.tau_b
        summary["initial_rel_error"] = relative_error(d0, prob.d_star)
    run.write_json("problem.json", summary)
    return summary


def cmd_encode(run: Run):
    prob = run.load_problem()
    enc_cfg = C.encoder_config(run.section("encoder"))
    ec = run.cfg.get("encode", {})
    d = run.load(ec.get("dictionary", "d_init" if io.matrix_exists(run.input, "d_init") else "d_star"))
    traj = encode(prob.x, d, enc_cfg, z_star=prob.z_star)
    run.save_matrix("codes", traj.z_T)
    summary = {"T": traj.T, "margin_ok_fraction": float(np.mean(traj.margin_ok()))}
    if "trajectory_sample" in ec:
        i = ec["trajectory_sample"]
        if i >= prob.n:
            raise CliError(f"trajectory_sample {i} out of range for n={prob.n}", EXIT_CONFIG)
        run.save_matrix(f"trajectory_{i}", traj.states[:, :, i])
    if prob.z_star is not None:
        st = support_stats(traj.z_T, prob.z_star)
        summary.update(exact_signed_support=st.exact_signed, precision=st.precision,
                       recall=st.recall)
    run.write_json("encode_summary.json", summary)
    return summary


def cmd_train(run: Run):
    prob = run.load_problem()
    _check_mp(run, prob.m, prob.p)
    base_enc = C.encoder_config(run.section("encoder"))
    d0 = run.load("d_init") if io.matrix_exists(run.input, "d_init") else run.load("d_star")
    results = {}
    for name, settings in C.train_runs(run.section("train")):
        enc = base_enc
        if "T" in settings:
            enc = enc.with_(T=settings["T"])
        if "schedule" in settings:
            enc = enc.with_(schedule=C.schedule(settings["schedule"]))
        tcfg = C.train_config(settings, run.seed)
        variants = [(name, enc)]
        if "b_grid" in settings:
            if tcfg.grad_kind != "ae-ls-ht":
                raise CliError(f"run {name}: b_grid needs grad_kind ae-ls-ht", EXIT_CONFIG)
            variants = [(f"{name}_b{b:g}", enc.with_(schedule=LambdaSchedule.fixed(b)))
                        for b in settings["b_grid"]]
        for vname, venc in variants:
            run.claim(f"history_{vname}.csv")
            if tcfg.grad_kind == "altmin":
                lam = settings.get("lam", venc.schedule.lam)
                d, hist = train_altmin(prob, d0, lam, settings.get("tol", 1e-10), tcfg)
            else:
                d, hist = train_pudle(prob, d0, venc, tcfg)
            hist.to_csv(run.out / f"history_{vname}.csv")
            run.outputs.append(f"history_{vname}.csv")
            run.save_matrix(f"d_final_{vname}", d)
            results[vname] = {"initial_rel_error": hist.initial_rel_error,
                              "final_rel_error": hist.final_rel_error, "updates": len(hist)}
    run.write_json("train_summary.json", results)
    return results


def _validate_code_convergence(run, prob, d, enc, v, rows):
    traj = encode(prob.x, d, enc, z_star=prob.z_star, check_step=False)
    lam = enc.schedule.lam
    z_hat = solve_lasso(prob.x, d, lam, tol=v.get("tol", 1e-10))
    vs_hat, vs_star = code_error_curves(traj, z_hat, prob.z_star)
    for t, val in enumerate(vs_hat.mean(axis=1)):
        rows.append(("code_convergence", "code-vs-hat", t, float(val), run.seed))
    if vs_star is not None:
        for t, val in enumerate(vs_star.mean(axis=1)):
            rows.append(("code_convergence", "code-vs-star", t, float(val), run.seed))
    B = support_selection_step(traj)
    min_r2 = v.get("min_r2", 0.99)
    good, fitted, increases, rhos = 0, 0, 0, []
    for i in range(prob.n):
        try:
            fit = rate_fit(vs_hat[:, i], max(int(B[i]), 1))
        except ValueError:
            continue
        fitted += 1
        rhos.append(fit.rho_hat)
        good += fit.rho_hat < 1 and fit.r_squared > min_r2
        increases += first_increase(vs_hat[:, i], max(int(B[i]), 1)) is not None
    frac = good / prob.n
    out = {"fraction_linear": frac, "fitted": fitted, "median_rho": float(np.median(rhos)) if rhos else None,
           "samples_with_increase": increases, "max_support_selection_step": int(B.max())}
    if "min_fraction" in v:
        run.check("code_convergence.linear_rate", frac >= v["min_fraction"],
                  value=frac, threshold=v["min_fraction"])
        run.check("code_convergence.monotone_after_selection", increases == 0, value=increases)
    return out


def _validate_gradient_errors(run, prob, d, enc, v, rows):
    kinds = tuple(v.get("kinds", ["dec", "ae-lasso", "ae-ls"]))
    curves = gradient_error_curves(prob, d, enc, tol=v.get("tol", 1e-10), kinds=kinds)
    rows.extend(curves.long_rows("gradient_errors", run.seed))
    final_hat = {k: float(c[-1]) for k, c in curves.grad_vs_hat.items()}
    final_star = {k: float(c[-1]) for k, c in curves.grad_vs_star.items()}
    out = {"final_vs_hat": final_hat, "final_vs_star": final_star}
    for a in v.get("assertions", []):
        if a == "ae_lasso_beats_dec_local":
            run.check(a, final_hat["ae-lasso"] < final_hat["dec"],
                      ae_lasso=final_hat["ae-lasso"], dec=final_hat["dec"])
        elif a == "ae_ls_plateau_local":
            ok, s_ls, s_lasso = plateau_check(curves.grad_vs_hat["ae-ls"],
                                              curves.grad_vs_hat["ae-lasso"],
                                              ratio=v.get("plateau_ratio", 0.1))
            level = final_hat["ae-ls"] / final_hat["ae-lasso"] if final_hat["ae-lasso"] > 0 else np.inf
            need = v.get("plateau_level", 10.0)
            run.check(a, ok and level >= need, slope_ae_ls=s_ls, slope_ae_lasso=s_lasso,
                      level_ratio=level, level_threshold=need)
        elif a == "ae_ls_beats_ae_lasso_global":
            run.check(a, final_star["ae-ls"] < final_star["ae-lasso"],
                      ae_ls=final_star["ae-ls"], ae_lasso=final_star["ae-lasso"])
        elif a == "global_errors_positive":
            run.check(a, final_star["ae-ls"] > 0 and final_star["ae-lasso"] > 0, **final_star)
    return out


def _validate_support_recovery(run, prob, d, enc, v, rows):
    alpha = v.get("alpha", enc.alpha)
    out = {}
    best = 0.0
    for f in v.get("lambda0_factors", [0.25, 0.5]):
        est = one_step_support_recovery_rate(prob, d, f * prob.c_min, alpha)
        out[f"{f:g}"] = {"rate": est.rate, "wilson95": [est.lower, est.upper]}
        best = max(best, est.rate)
    if "min_rate" in v:
        run.check("support_recovery.rate", best >= v["min_rate"], value=best,
                  threshold=v["min_rate"])
    return out


def _validate_support_preservation(run, prob, d, enc, v, rows):
    traj = encode(prob.x, d, enc, z_star=prob.z_star, check_step=False)
    tr = support_preservation_trace(traj, prob.z_star)
    est = tr.preserved_rate()
    for t, frac in enumerate(tr.flags.mean(axis=1), start=1):
        rows.append(("support_preservation", "fraction-exact", t, float(frac), run.seed))
    if "min_rate" in v:
        run.check("support_preservation.rate", est.rate >= v["min_rate"], value=est.rate,
                  threshold=v["min_rate"])
    return {"rate": est.rate, "wilson95": [est.lower, est.upper]}


def _validate_jacobian(run, prob, d, enc, v, rows):
    m, p = d.shape
    if m * p * p > run.budget["max_jacobian"]:
        raise CliError(f"explicit Jacobian needs m*p^2 = {m * p * p} entries, over the budget "
                       f"{run.budget['max_jacobian']}", EXIT_BUDGET)
    i = v.get("sample", 0)
    x = prob.x[:, i]
    traj = encode(x, d, enc, check_step=False)
    z_hat = solve_lasso(x, d, enc.schedule.lam)
    curve = jacobian_error_curve(traj, d, x, z_hat)
    for t, val in enumerate(curve):
        rows.append(("jacobian", "jacobian-vs-hat", t, float(val), run.seed))
    B = int(support_selection_step(traj)[0])
    # J_0 = 0, so curve[0] is the size of the reference Jacobian
    fit = jacobian_decay_fit(curve, max(B, 1), floor=precision_floor(curve[0]))
    out = {"final": float(curve[-1]), "slope": fit.slope, "r_squared": fit.r_squared}
    if "max_error" in v:
        by = min(v.get("by_t", traj.T), traj.T)
        run.check("jacobian.error_by_t", curve[by] < v["max_error"], value=float(curve[by]), t=by)
        run.check("jacobian.decay_fit", fit.slope < 0 and fit.r_squared > v.get("min_r2", 0.95),
                  slope=fit.slope, r_squared=fit.r_squared)
    return out


def _validate_amplitude_bias(run, prob, d, enc, v, rows):
    lams = v.get("lams", [enc.schedule.lam])
    vals = [amplitude_bias(prob, lam, v.get("tol", 1e-10)) for lam in lams]
    for lam, b in zip(lams, vals):
        rows.append(("amplitude_bias", f"lambda={lam:g}", 0, float(b), run.seed))
    order = np.argsort(lams)
    mono = bool(np.all(np.diff(np.asarray(vals)[order]) >= -1e-12))
    run.check("amplitude_bias.monotone", mono)
    return {"lams": lams, "bias": vals}


VALIDATORS = {
    "code_convergence": _validate_code_convergence,
    "gradient_errors": _validate_gradient_errors,
    "support_recovery": _validate_support_recovery,
    "support_preservation": _validate_support_preservation,
    "jacobian": _validate_jacobian,
    "amplitude_bias": _validate_amplitude_bias,
}


def cmd_theory(run: Run):
    prob = run.load_problem()
    th = run.section("theory")
    enc = C.encoder_config(run.section("encoder"))
    d = run.load(th.get("dictionary", "d_init"))
    run.claim("curves.csv", "theory_summary.json")
    rows, results = [], {}
    for v in th["validators"]:
        results[v["kind"]] = VALIDATORS[v["kind"]](run, prob, d, enc, v, rows)
    run.write_csv("curves.csv", ["experiment", "kind", "t", "value", "seed"], rows)
    summary = {"results": results, "assertions": run.assertions}
    run.write_json("theory_summary.json", _jsonable(summary))
    return summary


def cmd_interpret(run: Run):
    prob = run.load_problem()
    ic = run.cfg.get("interpret", {})
    enc = C.encoder_config(run.section("encoder"))
    d = run.load(ic.get("dictionary", "d_star"))
    n_test = ic.get("n_test", 0)
    n_train = prob.n - n_test
    if n_train < 1:
        raise CliError("n_test leaves no training samples", EXIT_CONFIG)
    if "max_train" in ic:
        n_train = min(n_train, ic["max_train"])
    if n_train > run.budget["max_representer_n"]:
        raise CliError(f"representer model over {n_train} training samples exceeds the budget of "
                       f"{run.budget['max_representer_n']}; set interpret.max_train to subsample",
                       EXIT_BUDGET)
    omega = ic.get("omega", 1e-3)
    x_train = prob.x[:, :n_train]
    x_test = prob.x[:, prob.n - n_test:]
    z_train = encode(x_train, d, enc, check_step=False).z_T
    if ic.get("ridge_fit", False):
        d, gnorm, _ = ridge_fit_dictionary(x_train, z_train, omega, d0=d)
    model = build_model(x_train, z_train, omega, budget=run.budget["max_representer_n"])
    d_tilde = reconstruct_dictionary(model)
    resid = stationarity_residual(d, x_train, z_train, omega)
    rel = float(np.linalg.norm(d - d_tilde) / max(np.linalg.norm(d), 1e-300))
    summary = {"n_train": n_train, "n_test": n_test, "omega": omega,
               "stationarity_residual": resid, "reconstruction_rel_diff": rel}
    if "max_stationarity" in ic:
        run.check("interpret.stationarity", resid <= ic["max_stationarity"], value=resid,
                  threshold=ic["max_stationarity"])
    run.save_matrix("d_representer", d_tilde)

    atoms = ic.get("atoms", [])
    if atoms:
        rows = []
        for j in atoms:
            if j >= model.p:
                raise CliError(f"atom {j} out of range for p={model.p}", EXIT_CONFIG)
            w = atom_weights(model, j)
            rows += [(j, k, float(w[k])) for k in range(n_train)]
        run.write_csv("atom_weights.csv", ["atom", "train_id", "weight"], rows)

    if n_test:
        k = min(ic.get("top_k", 10), n_train)
        z_test = encode(x_test, d, enc, check_step=False).z_T
        xg = transformed_samples(model)
        rows = []
        for i in range(n_test):
            c = code_similarity_contributions(model, z_test[:, i], transformed=xg)
            beta = c.beta
            if ic.get("normalize_beta", False) and np.abs(beta).sum() > 0:
                beta = beta / np.abs(beta).sum()
            for rank, tr in enumerate(top_contributors(beta, k)):
                rows.append((i, int(tr), float(beta[tr]), float(c.similarity[tr]), rank))
        run.write_csv("attribution.csv", ["test_id", "train_id", "beta", "similarity", "rank"], rows)
    summary["assertions"] = run.assertions
    run.write_json("interpret_summary.json", _jsonable(summary))
    return summary


HANDLERS = {"gen": cmd_gen, "encode": cmd_encode, "train": cmd_train, "theory": cmd_theory,
            "interpret": cmd_interpret}


# --------------------------------------------------------------------------
# entry point


def _write_manifest(run: Run, started, finished, cfg_ref):
    path = run.out / "manifest.json"
    manifest = {}
    if path.exists():
        try:
            manifest = json.loads(path.read_text())
        except json.JSONDecodeError:
            manifest = {}
    manifest.setdefault("tool", "pudle")
    manifest["version"] = __version__
    manifest["git_describe"] = _git_describe()
    commands = manifest.setdefault("commands", {})
    commands[run.command] = {
        "config_ref": str(cfg_ref),
        "config": run.cfg,
        "seed": run.seed,
        "started": started,
        "finished": finished,
        "outputs": {name: io.sha256_file(run.out / name) for name in sorted(set(run.outputs))},
        "assertions": run.assertions,
    }
    io.write_json_atomic(path, _jsonable(manifest))


def _parser():
    ap = argparse.ArgumentParser(prog="pudle", description="Unrolled dictionary learning experiments.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="config file path or preset name")
    ap.add_argument("--out", help="output directory (overrides output_dir in the config)")
    ap.add_argument("--force", action="store_true", help="overwrite existing outputs")
    ap.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    return ap


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_command(command, cfg_ref, out=None, force=False, threads=None):
    """Programmatic entry: returns ``(exit_code, summary_or_error)``."""
    try:
        cfg = C.load_config(cfg_ref)
    except C.ConfigError as exc:
        return EXIT_CONFIG, {"error": str(exc)}
    seed = cfg.get("seed", 0)
    if os.environ.get("PUDLE_SEED"):
        try:
            seed = int(os.environ["PUDLE_SEED"])
        except ValueError:
            return EXIT_CONFIG, {"error": "PUDLE_SEED must be an integer"}
    out = out or cfg.get("output_dir")
    if not out:
        return EXIT_CONFIG, {"error": "no output directory: pass --out or set output_dir"}
    Path(out).mkdir(parents=True, exist_ok=True)
    run = Run(command, cfg, out, force, seed)
    started = _now()
    try:
        if threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=threads):
                summary = _run(run)
        else:
            summary = _run(run)
    except CliError as exc:
        return exc.code, {"error": str(exc)}
    except MemoryError as exc:  # budget guards raised inside the library
        return EXIT_BUDGET, {"error": str(exc)}
    except ValueError as exc:
        return EXIT_CONFIG, {"error": f"{type(exc).__name__}: {exc}"}
    _write_manifest(run, started, _now(), cfg_ref)
    failed = [a["name"] for a in run.assertions if not a["passed"]]
    if failed:
        return EXIT_ASSERT, {"failed_assertions": failed, "summary": _jsonable(summary)}
    return EXIT_OK, _jsonable(summary)


def _run(run):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StepSizeWarning)
        return HANDLERS[run.command](run)


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print(json.dumps({"error": "--threads must be >= 1"}), file=sys.stderr)
        return EXIT_CONFIG
    t0 = time.perf_counter()
    code, result = run_command(args.command, args.config, args.out, args.force, args.threads)
    stream = sys.stdout if code == EXIT_OK else sys.stderr
    print(json.dumps({"command": args.command, "exit_code": code,
                      "seconds": round(time.perf_counter() - t0, 3), "result": result},
                     indent=2, default=str), file=stream)
    return code


if __name__ == "__main__":
    sys.exit(main())
