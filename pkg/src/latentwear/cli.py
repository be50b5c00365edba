"""Command-line entry point wiring the pipeline:
simulate / impute / classify / fit / predict / evaluate / sbc / pipeline.

Every run writes a ``run-manifest.json`` capturing the resolved configuration,
seed and package version; rerunning with ``--config run-manifest.json``
reproduces the outputs byte for byte (manifest timestamp aside).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, evaluation, fleet, gp, hmm, inference, sbc as sbc_mod
from .fleet import PanelFormatError, StateThresholds
from .mcmc import ChainDiagnosticError, SamplerOptions


class CliUsageError(ValueError):
    """Bad flag combination or missing required option."""


DEFAULTS: dict[str, dict] = {
    "simulate": {
        "ships": 99, "ages": 31, "engine_types": 5, "periods": 1,
        "lam": None, "p21": None, "p31": None, "missingness": 0.0,
        "seed": None, "out": "fleet.csv",
    },
    "impute": {
        "in_": None, "out": "imputed.csv", "sd_out": None, "hyper_out": None,
        "mode": "mean", "method": "mcmc", "draws": 500, "chains": 2,
        "impute_draws": 50, "seed": None,
    },
    "classify": {
        "in_": None, "out": "states.csv", "thresholds_out": None,
        "by_engine": False,
    },
    "fit": {
        "in_": None, "periods": 1, "chains": 4, "warmup": 1000, "draws": 1000,
        "rate_bound": 50.0, "seed": None, "out": "posterior.csv",
        "summary": "summary.json",
    },
    "predict": {
        "posterior": None, "lam": None, "p21": None, "p31": None,
        "periods": 1, "ages": 31, "rule": "argmax", "seed": None,
        "out": "predicted.csv", "rate_bound": 50.0,
    },
    "evaluate": {
        "in_": None, "test_size": 5, "repeats": 1000, "fitter": "mle",
        "periods": 1, "restarts": 3, "seed": None, "out": "mse.csv",
        "occupancy": None, "sum_over_age": False, "rate_bound": 50.0,
    },
    "sbc": {
        "ships": 30, "ages": 15, "replications": 200, "draws_per_rank": 63,
        "periods": 1, "rate_bound": sbc_mod.SBC_RATE_BOUND, "bins": 20,
        "chains": 2, "warmup": 800, "draws": 1280, "seed": None,
        "out": "ranks.csv", "histogram": None,
    },
    "pipeline": {
        "in_": None, "periods": 1, "chains": 4, "warmup": 1000, "draws": 1000,
        "rate_bound": 50.0, "test_size": 5, "repeats": 100, "fitter": "mle",
        "restarts": 3, "seed": None, "by_engine": False,
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentwear",
        description="Infer latent equipment deterioration hidden under "
                    "periodic maintenance from annual failure-count panels.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", type=str, default=None,
                       help="JSON config or a previous run-manifest.json; "
                            "explicit flags win")
        p.add_argument("--out-dir", type=str, default=None, dest="out_dir")

    p = sub.add_parser("simulate", help="draw a synthetic state panel")
    p.add_argument("--ships", type=int)
    p.add_argument("--ages", type=int)
    p.add_argument("--engine-types", type=int, dest="engine_types")
    p.add_argument("--periods", type=int)
    p.add_argument("--lambda", dest="lam",
                   help="comma-separated rates, 3 per period")
    p.add_argument("--p21", type=float)
    p.add_argument("--p31", type=float)
    p.add_argument("--missingness", type=float)
    p.add_argument("--out")
    add_common(p)

    p = sub.add_parser("impute", help="GP-impute missing failure counts")
    p.add_argument("--in", dest="in_")
    p.add_argument("--out")
    p.add_argument("--sd-out", dest="sd_out")
    p.add_argument("--hyper-out", dest="hyper_out",
                   help="CSV of hyperparameter draws, one column per parameter")
    p.add_argument("--mode", choices=["mean", "sample"])
    p.add_argument("--method", choices=["mcmc", "optimize"])
    p.add_argument("--draws", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--impute-draws", type=int, dest="impute_draws",
                   help="max hyper-draws pushed through conditioning")
    add_common(p)

    p = sub.add_parser("classify", help="standardize counts and assign states")
    p.add_argument("--in", dest="in_")
    p.add_argument("--out")
    p.add_argument("--thresholds-out", dest="thresholds_out")
    p.add_argument("--by-engine", action="store_true", default=None,
                   dest="by_engine")
    add_common(p)

    p = sub.add_parser("fit", help="posterior over rates and repair probabilities")
    p.add_argument("--in", dest="in_")
    p.add_argument("--periods", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--draws", type=int)
    p.add_argument("--rate-bound", type=float, dest="rate_bound")
    p.add_argument("--out")
    p.add_argument("--summary")
    add_common(p)

    p = sub.add_parser("predict", help="latent trajectory and modal states")
    p.add_argument("--posterior", help="posterior.csv to average")
    p.add_argument("--lambda", dest="lam", help="explicit rates, 3 per period")
    p.add_argument("--p21", type=float)
    p.add_argument("--p31", type=float)
    p.add_argument("--periods", type=int)
    p.add_argument("--ages", type=int)
    p.add_argument("--rule", choices=["argmax", "sample"])
    p.add_argument("--rate-bound", type=float, dest="rate_bound")
    p.add_argument("--out")
    add_common(p)

    p = sub.add_parser("evaluate", help="repeated-split MSE experiment")
    p.add_argument("--in", dest="in_")
    p.add_argument("--test-size", type=int, dest="test_size")
    p.add_argument("--repeats", type=int)
    p.add_argument("--fitter", choices=["mle", "mcmc"])
    p.add_argument("--periods", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--rate-bound", type=float, dest="rate_bound")
    p.add_argument("--sum-over-age", action="store_true", default=None,
                   dest="sum_over_age")
    p.add_argument("--out")
    p.add_argument("--occupancy")
    add_common(p)

    p = sub.add_parser("sbc", help="simulation-based calibration of the sampler")
    p.add_argument("--ships", type=int)
    p.add_argument("--ages", type=int)
    p.add_argument("--replications", type=int)
    p.add_argument("--draws-per-rank", type=int, dest="draws_per_rank")
    p.add_argument("--periods", type=int)
    p.add_argument("--rate-bound", type=float, dest="rate_bound")
    p.add_argument("--bins", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--draws", type=int)
    p.add_argument("--out")
    p.add_argument("--histogram")
    add_common(p)

    p = sub.add_parser("pipeline", help="classify -> fit -> predict -> evaluate")
    p.add_argument("--in", dest="in_")
    p.add_argument("--periods", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--draws", type=int)
    p.add_argument("--rate-bound", type=float, dest="rate_bound")
    p.add_argument("--test-size", type=int, dest="test_size")
    p.add_argument("--repeats", type=int)
    p.add_argument("--fitter", choices=["mle", "mcmc"])
    p.add_argument("--restarts", type=int)
    p.add_argument("--by-engine", action="store_true", default=None,
                   dest="by_engine")
    add_common(p)

    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge flag values over --config file values over built-in defaults."""
    defaults = dict(DEFAULTS[args.command])
    file_cfg = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliUsageError(f"config file not found: {path}")
        loaded = json.loads(path.read_text())
        if "config" in loaded and "subcommand" in loaded:
            # a run manifest; replay its resolved config
            if loaded["subcommand"] != args.command:
                raise CliUsageError(
                    f"manifest is for subcommand {loaded['subcommand']!r}, "
                    f"not {args.command!r}"
                )
            loaded = loaded["config"]
        file_cfg = loaded
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in file_cfg:
            resolved[key] = file_cfg[key]
        else:
            resolved[key] = default
    resolved["out_dir"] = getattr(args, "out_dir", None) or file_cfg.get("out_dir") or "."
    return resolved


def _require(cfg: dict, key: str, flag: str):
    if cfg.get(key) is None:
        raise CliUsageError(f"missing required option {flag}")
    return cfg[key]


def _parse_rates(text: str, periods: int) -> list[tuple[float, float, float]]:
    try:
        values = [float(v) for v in str(text).split(",")]
    except ValueError:
        raise CliUsageError(f"--lambda expects comma-separated numbers, got {text!r}")
    if len(values) != 3 * periods:
        raise CliUsageError(
            f"--lambda needs {3 * periods} values for {periods} period(s), "
            f"got {len(values)}"
        )
    return [tuple(values[3 * p: 3 * p + 3]) for p in range(periods)]


def _rate_params(cfg: dict, max_age: int) -> inference.RateParams:
    periods = cfg.get("periods", 1)
    rates = _parse_rates(_require(cfg, "lam", "--lambda"), periods)
    p21 = _require(cfg, "p21", "--p21")
    p31 = _require(cfg, "p31", "--p31")
    bound = cfg.get("rate_bound", 50.0)
    from .ctmc import RateParams

    return RateParams.equal_periods(rates, p21, p31, max_age, bound)


def _out_path(cfg: dict, name: str) -> Path:
    p = Path(cfg[name])
    if not p.is_absolute():
        p = Path(cfg["out_dir"]) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def write_manifest(cfg: dict, command: str) -> None:
    manifest = {
        "subcommand": command,
        "config": {k: v for k, v in cfg.items()},
        "seed": cfg.get("seed"),
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = Path(cfg["out_dir"]) / "run-manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2) + "\n")


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: dict) -> None:
    seed = _require(cfg, "seed", "--seed")
    params = _rate_params(cfg, cfg["ages"])
    panel = fleet.simulate_panel(
        params, (cfg["ships"], cfg["ages"], cfg["engine_types"]),
        missingness=cfg["missingness"], seed=seed,
    )
    out = _out_path(cfg, "out")
    fleet.write_state_panel(panel, out)
    print(f"wrote {panel.n_ships}x{panel.max_age} state panel to {out}")


def cmd_classify(cfg: dict) -> None:
    panel = fleet.load_panel(_require(cfg, "in_", "--in"))
    std, mean, sd = fleet.standardize(panel, by_engine=cfg["by_engine"])
    if cfg["by_engine"]:
        th = fleet.fit_thresholds(std)
    else:
        th = fleet.fit_thresholds(std, mean, sd)
    states = fleet.classify(std, th)
    out = _out_path(cfg, "out")
    fleet.write_state_panel(states, out)
    if cfg["thresholds_out"]:
        _out_path(cfg, "thresholds_out").write_text(th.to_json() + "\n")
    print(f"classified {panel.n_ships} ships -> {out} "
          f"(b1={th.b1:.4f}, b2={th.b2:.4f})")


def cmd_impute(cfg: dict) -> None:
    seed = _require(cfg, "seed", "--seed")
    panel = fleet.load_panel(_require(cfg, "in_", "--in"))
    draws = gp.fit_hyperparams(
        panel, method=cfg["method"], budget=cfg["draws"], seed=seed,
        chains=cfg["chains"],
    )
    flat = draws.flat()
    if flat.shape[0] > cfg["impute_draws"]:
        idx = (np.arange(cfg["impute_draws"]) * flat.shape[0]) // cfg["impute_draws"]
        thinned = inference.PosteriorDraws(
            draws.names, flat[idx][None, :, :],
            draws.rhat, draws.ess, draws.acceptance_rate, draws.warnings,
        )
    else:
        thinned = draws
    result = gp.impute(panel, thinned, mode=cfg["mode"], seed=seed)
    out = _out_path(cfg, "out")
    fleet.write_panel(result.filled, out)
    if cfg["sd_out"]:
        sd_panel = panel.with_counts(result.sd)
        fleet.write_panel(sd_panel, _out_path(cfg, "sd_out"))
    if cfg["hyper_out"]:
        _write_matrix_csv(_out_path(cfg, "hyper_out"), draws.names, flat)
    print(f"imputed {len(gp.missing_cells(panel))} missing cells -> {out}")


def cmd_fit(cfg: dict) -> None:
    seed = _require(cfg, "seed", "--seed")
    path = _require(cfg, "in_", "--in")
    panel = fleet.load_state_panel(path)
    post = inference.sample_posterior(
        panel, inference.PriorSpec(cfg["rate_bound"]), cfg["periods"],
        cfg["chains"], cfg["warmup"], cfg["draws"], seed=seed,
    )
    out = _out_path(cfg, "out")
    _write_posterior_csv(out, post)
    summary = inference.summarize(post)
    breaks = inference.default_breaks(cfg["periods"], panel.max_age)
    payload = {
        "params": summary,
        "acceptance_rate": [float(a) for a in post.acceptance_rate],
        "warnings": post.warnings,
        "periods": cfg["periods"],
        "breaks": list(breaks),
        "rate_bound": cfg["rate_bound"],
    }
    _out_path(cfg, "summary").write_text(json.dumps(payload, indent=2) + "\n")
    for w in post.warnings:
        print(f"warning: {w}", file=sys.stderr)
    means = ", ".join(f"{n}={summary[n]['mean']:.3f}" for n in post.names)
    print(f"posterior written to {out} ({means})")


def cmd_predict(cfg: dict) -> None:
    periods = cfg["periods"]
    max_age = cfg["ages"]
    if cfg["posterior"]:
        names, rows = _read_matrix_csv(cfg["posterior"], skip=("chain", "draw"))
        theta = rows.mean(axis=0)
        expected = inference.param_names(periods)
        if names != expected:
            raise CliUsageError(
                f"posterior columns {names} do not match {periods} period(s)"
            )
        breaks = inference.default_breaks(periods, max_age)
        params = inference.params_from_vector(theta, breaks, cfg["rate_bound"])
    else:
        params = _rate_params(cfg, max_age)
    traj = hmm.evolve(params, max_age)
    pred = hmm.predict_states(params, max_age, rule=cfg["rule"],
                              seed=cfg.get("seed"))
    out = _out_path(cfg, "out")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["age", "d1", "d2", "d3", "predicted_state"])
        for t in range(max_age):
            w.writerow([t + 1, repr(float(traj[t, 0])), repr(float(traj[t, 1])),
                        repr(float(traj[t, 2])), int(pred[t])])
    print(f"predicted states for ages 1..{max_age} -> {out}")


def cmd_evaluate(cfg: dict) -> None:
    seed = _require(cfg, "seed", "--seed")
    panel = fleet.load_state_panel(_require(cfg, "in_", "--in"))
    spec = evaluation.SplitSpec(cfg["test_size"], cfg["repeats"], seed)
    fit_cfg = evaluation.FitConfig(
        fitter=cfg["fitter"], periods=cfg["periods"], restarts=cfg["restarts"],
        rate_bound=cfg["rate_bound"],
    )
    report = evaluation.run_splits(panel, spec, fit_cfg)
    out = _out_path(cfg, "out")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["repeat", "train_mse", "test_mse"])
        ok = [r for r in range(spec.n_repeats) if r not in set(report.failed)]
        for r, tr, te in zip(ok, report.train_mse, report.test_mse):
            w.writerow([r, repr(float(tr)), repr(float(te))])
    if cfg["occupancy"]:
        freq = evaluation.state_occupancy(panel)
        with open(_out_path(cfg, "occupancy"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["age", "state", "fraction"])
            for t in range(panel.max_age):
                for s in range(3):
                    w.writerow([t + 1, s + 1, repr(float(freq[t, s]))])
    print(f"mean train MSE {report.mean_train:.4f}, "
          f"mean test MSE {report.mean_test:.4f} -> {out}")


def cmd_sbc(cfg: dict) -> None:
    seed = _require(cfg, "seed", "--seed")
    table = sbc_mod.run_sbc(
        inference.PriorSpec(cfg["rate_bound"]),
        (cfg["ships"], cfg["ages"]),
        periods=cfg["periods"],
        B=cfg["replications"],
        L=cfg["draws_per_rank"],
        seed=seed,
        config=sbc_mod.SBCConfig(
            n_ships=cfg["ships"], max_age=cfg["ages"], periods=cfg["periods"],
            chains=cfg["chains"], warmup=cfg["warmup"], draws=cfg["draws"],
        ),
    )
    out = _out_path(cfg, "out")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replication"] + table.names)
        ok = [b for b in range(table.B) if b not in set(table.failed)]
        for b, row in zip(ok, table.ranks):
            w.writerow([b] + [int(v) for v in row])
    hist = sbc_mod.rank_histogram(table, bins=cfg["bins"])
    pvals = sbc_mod.uniformity_pvalues(table, bins=cfg["bins"])
    payload = hist.to_jsonable()
    for j, name in enumerate(table.names):
        payload["params"][name]["chi2_pvalue"] = float(pvals[j])
    if cfg["histogram"]:
        _out_path(cfg, "histogram").write_text(json.dumps(payload, indent=2) + "\n")
    worst = min(pvals)
    print(f"SBC ranks for {len(table.ranks)} replications -> {out} "
          f"(min chi-square p = {worst:.3f})")


def cmd_pipeline(cfg: dict) -> None:
    seed = _require(cfg, "seed", "--seed")
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    classify_cfg = dict(cfg, out="states.csv",
                        thresholds_out="thresholds.json")
    cmd_classify(classify_cfg)

    fit_cfg = dict(cfg, in_=str(out_dir / "states.csv"), out="posterior.csv",
                   summary="summary.json")
    cmd_fit(fit_cfg)

    panel = fleet.load_state_panel(out_dir / "states.csv")
    predict_cfg = dict(cfg, posterior=str(out_dir / "posterior.csv"),
                       ages=panel.max_age, rule="argmax", out="predicted.csv")
    cmd_predict(predict_cfg)

    evaluate_cfg = dict(cfg, in_=str(out_dir / "states.csv"), out="mse.csv",
                        occupancy="occupancy.csv")
    cmd_evaluate(evaluate_cfg)


HANDLERS = {
    "simulate": cmd_simulate,
    "impute": cmd_impute,
    "classify": cmd_classify,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "sbc": cmd_sbc,
    "pipeline": cmd_pipeline,
}


def _write_posterior_csv(path, post) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["chain", "draw"] + post.names)
        for c in range(post.n_chains):
            for i in range(post.n_draws):
                w.writerow([c, i] + [repr(float(v)) for v in post.draws[c, i]])


def _write_matrix_csv(path, names, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def _read_matrix_csv(path, skip=()):
    path = Path(path)
    if not path.exists():
        raise PanelFormatError(f"input file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelFormatError(f"no records in {path}") from None
        keep = [i for i, h in enumerate(header) if h not in skip]
        names = [header[i] for i in keep]
        rows = [[float(r[i]) for i in keep] for r in reader if r]
    if not rows:
        raise PanelFormatError(f"no records in {path}")
    return names, np.array(rows)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command in ("simulate", "impute", "fit", "evaluate", "sbc",
                            "pipeline") and cfg.get("seed") is None:
            raise CliUsageError("missing required option --seed")
        if args.command == "predict" and cfg["rule"] == "sample" \
                and cfg.get("seed") is None:
            raise CliUsageError("--rule sample requires --seed")
        HANDLERS[args.command](cfg)
        write_manifest(cfg, args.command)
    except (CliUsageError, PanelFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ChainDiagnosticError, gp.KernelFactorizationError, RuntimeError,
            ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
