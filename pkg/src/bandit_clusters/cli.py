"""Command-line front end.

Exit codes: 0 success, 1 configuration or input error, 2 runtime error,
3 a verification check failed. Each ``run``/``sweep`` summary line reads::

    policy=<name> final_regret=<mean>±<halfwidth> recovery=<rate>
"""

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, apply_overrides, config_from_dict, paper_scale_preset
from .env import (
    EnvModel,
    FeatureFileError,
    SphereSampler,
    cluster_means,
    make_synthetic,
    random_partition,
    write_features,
)
from .harness import (
    RunError,
    aggregate,
    check_conservation,
    eigengrowth_rounds,
    run_grid,
    summary_line,
    verify_coverage,
    verify_eigengrowth,
    write_aggregate_json,
    write_trace_csv,
)
from .linalg import truncated_svd

log = logging.getLogger("bandit_clusters")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


@dataclass
class CliConfig:
    subcommand: str
    config: str = None
    out: str = None
    overrides: list = field(default_factory=list)
    verbosity: int = 0
    extra: dict = field(default_factory=dict)


class InputError(ValueError):
    pass


def _resolve(cli):
    """Raw YAML mapping plus --set / flag overrides, validated."""
    import yaml

    data = {}
    if cli.extra.get("paper_scale"):
        data = paper_scale_preset()
    if cli.config:
        p = Path(cli.config)
        if not p.is_file():
            raise ConfigError("", f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("", f"cannot parse {p}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("", f"{p} must contain a mapping at the top level")
        _deep_update(data, loaded)
    apply_overrides(data, cli.overrides)
    if cli.out:
        data["output_dir"] = cli.out
    return data, config_from_dict(data)


def _deep_update(dst, src):
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _deep_update(dst[k], v)
        else:
            dst[k] = v


def _emit(cfg, grid, out_dir, write_traces=True, stem=""):
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for kind, traces in grid.items():
        rep = aggregate(traces)
        reports.append(rep)
        if write_traces:
            for tr in traces:
                write_trace_csv(tr, out_dir / f"{stem}{kind}_seed{tr.seed}.csv")
    return reports


def cmd_run(cli):
    _, cfg = _resolve(cli)
    out_dir = Path(cfg.output_dir)
    grid = run_grid(cfg)
    reports = _emit(cfg, grid, out_dir)
    for rep in reports:
        write_aggregate_json(
            rep, out_dir / f"{rep.policy}.json", cfg.exploration_scale, cfg.to_dict(), grid[rep.policy]
        )
        print(summary_line(rep))
    return EXIT_OK


_SWEEP_KEYS = {"K": ("K", int), "u": ("selected_users", int), "sigma": ("sigma", float)}


def cmd_sweep(cli):
    data, cfg = _resolve(cli)
    axis = cli.extra.get("axis") or cfg.sweep.axis
    values = cli.extra.get("values") or cfg.sweep.values
    if axis not in _SWEEP_KEYS:
        raise ConfigError("sweep.axis", "must be one of K, u, sigma")
    if not values:
        raise ConfigError("sweep.values", "sweep axis has no values")
    key, cast = _SWEEP_KEYS[axis]
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in values:
        point = json.loads(json.dumps(data))
        point.setdefault("env", {})[key] = cast(v)
        point["output_dir"] = str(out_dir)
        pcfg = config_from_dict(point)
        grid = run_grid(pcfg)
        reports = [aggregate(grid[k]) for k in pcfg.policies]
        payload = {
            "axis": axis,
            "value": cast(v),
            "config": pcfg.to_dict(),
            "policies": [r.to_dict(pcfg.exploration_scale) for r in reports],
        }
        with open(out_dir / f"sweep_{axis}_{cast(v)}.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, indent=1)
            fh.write("\n")
        for r in reports:
            print(f"{axis}={cast(v)} {summary_line(r)}")
            rows.append((axis, cast(v), r.policy, r.final_mean, r.final_halfwidth, r.recovery_rate))
    with open(out_dir / f"sweep_{axis}_summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("axis", "value", "policy", "final_regret", "halfwidth", "recovery_rate"))
        w.writerows(rows)
    return EXIT_OK


def _verify_defaults(delta):
    """Small stochastic env for coverage and the structural fuzz run."""
    return {
        "T": 4000,
        "seeds": [0, 1, 2, 3, 4],
        "exploration_scale": 2.5e-5,
        "params": {"threshold_scale": 0.06, "delta": delta},
        "env": {"selected_users": 20, "m": 4, "d": 10, "K": 20},
    }


def cmd_verify(cli):
    delta = cli.extra.get("delta")
    results = []

    eig_delta = 0.1 if delta is None else delta
    d = 5
    sampler = SphereSampler(d)
    n = math.ceil(eigengrowth_rounds(sampler.L, sampler.lambda_x, 1, d, eig_delta))
    eig = verify_eigengrowth(d, sampler, trials=200, n_rounds=n, delta=eig_delta)
    results.append(("eigengrowth", eig.passed is True, f"violation_rate={eig.rate:.4f} n={n}"))

    cov_delta = 0.05 if delta is None else delta
    base = _verify_defaults(cov_delta)
    if cli.config or cli.overrides:
        _, cfg = _resolve(cli)
    else:
        cfg = config_from_dict(base)
    cov = verify_coverage(cfg, "UniCLUB", beta=cli.extra.get("beta_override"))
    results.append(
        ("coverage", cov.passed, f"violations={cov.violations}/{cov.checked} bound={cov.bound:.4f}")
    )

    fuzz = config_from_dict({**base, "T": 2000, "seeds": [0]})
    problems = []
    for kind in ("CLUB", "UniCLUB", "PhaseUniCLUB", "SCLUB", "UniSCLUB"):
        problems += [f"{kind}: {p}" for p in check_conservation(fuzz, kind, 0)]
    results.append(("conservation", not problems, f"violations={len(problems)}"))

    for name, ok, detail in results:
        print(f"{name}: {'PASS' if ok else 'FAIL'} {detail}")
    for p in problems[:10]:
        log.warning(p)
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_VERIFY


def cmd_gen_data(cli):
    x = cli.extra
    rng = np.random.default_rng(x["seed"])
    try:
        env, pool = make_synthetic(x["u"], x["d"], x["arms"], x["m"], x["selected"], rng)
    except ValueError as exc:
        raise ConfigError("gen-data", str(exc)) from None
    out = Path(cli.out or "features.envv1")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_features(out, env, pool)
    print(f"wrote {out} users={env.u} arms={len(pool)} d={env.d} m={env.m}")
    return EXIT_OK


def read_triplets(path, threshold=3.0, presence=False):
    """Parse ``user item value`` lines into a binary feedback matrix.

    Returns (matrix, user_ids, item_ids); ids keep first-appearance order.
    """
    users, items, entries = {}, {}, []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FeatureFileError(lineno, f"expected 'user item value', got {line!r}")
            try:
                value = float(parts[2])
            except ValueError:
                raise FeatureFileError(lineno, f"bad value {parts[2]!r}") from None
            if not math.isfinite(value):
                raise FeatureFileError(lineno, "non-finite value")
            i = users.setdefault(parts[0], len(users))
            j = items.setdefault(parts[1], len(items))
            entries.append((i, j, value))
    r = np.zeros((len(users), len(items)))
    for i, j, v in entries:
        if presence or v > threshold:
            r[i, j] = 1.0
    return r, list(users), list(items)


def cmd_svd_prep(cli):
    x = cli.extra
    try:
        r, _, _ = read_triplets(x["input"], x["threshold"], x["presence"])
    except FileNotFoundError:
        raise ConfigError("input", f"file not found: {x['input']}") from None
    if r.size == 0 or not r.any():
        raise InputError("matrix has rank 0")
    d = x["d"]
    if d > min(r.shape):
        raise InputError(f"d={d} exceeds min(users, items)={min(r.shape)}")
    left, sigma, right = truncated_svd(r, d, seed=x["seed"])
    m = x["m"]
    if not 1 <= m <= r.shape[0]:
        raise InputError(f"m={m} must lie in 1..{r.shape[0]}")
    rng = np.random.default_rng(x["seed"])
    assignment = random_partition(r.shape[0], m, rng)
    prefs = cluster_means(left, assignment, m)
    env = EnvModel(prefs, assignment, user_vectors=left)
    out = Path(cli.out or "features.envv1")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_features(out, env, right)
    print(f"wrote {out} users={r.shape[0]} arms={r.shape[1]} d={d} top_sigma={sigma[0]:.6g}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
    "gen-data": cmd_gen_data,
    "svd-prep": cmd_svd_prep,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="bandit-clusters", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="subcommand", required=True)

    def common(p, need_config):
        p.add_argument("--config", "-c", required=need_config, help="YAML config file")
        p.add_argument("--out", "-o", help="output directory (overrides output_dir)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--T", type=int)
        p.add_argument("--seeds", type=int, nargs="+")
        p.add_argument("--exploration-scale", type=float)
        p.add_argument("--policies", nargs="+")
        p.add_argument("--paper-scale", action="store_true", help="50 of 200 users, m=10, K=100, d=50")

    common(sub.add_parser("run", help="run a policy x seed grid"), True)
    sw = sub.add_parser("sweep", help="repeat the grid along K, u or sigma")
    common(sw, True)
    sw.add_argument("--axis", choices=sorted(_SWEEP_KEYS))
    sw.add_argument("--values", type=float, nargs="+")

    ve = sub.add_parser("verify", help="empirical guarantee and invariant checks")
    common(ve, False)
    ve.add_argument("--delta", type=float)
    ve.add_argument("--beta-override", type=float, help=argparse.SUPPRESS)

    gd = sub.add_parser("gen-data", help="write a synthetic ENVV1 feature file")
    gd.add_argument("--out", "-o")
    gd.add_argument("--u", type=int, default=200)
    gd.add_argument("--selected", type=int, default=50)
    gd.add_argument("--d", type=int, default=50)
    gd.add_argument("--arms", type=int, default=5000)
    gd.add_argument("--m", type=int, default=10)
    gd.add_argument("--seed", type=int, default=0)

    sv = sub.add_parser("svd-prep", help="feedback triplets -> ENVV1 via truncated SVD")
    sv.add_argument("input", help="file of 'user item value' lines")
    sv.add_argument("--out", "-o")
    sv.add_argument("--d", type=int, default=50)
    sv.add_argument("--m", type=int, default=10)
    sv.add_argument("--threshold", type=float, default=3.0, help="value > threshold counts as 1")
    sv.add_argument("--presence", action="store_true", help="any listed entry counts as 1")
    sv.add_argument("--seed", type=int, default=0)
    return ap


def parse_cli(argv):
    args = build_parser().parse_args(argv)
    ns = vars(args)
    overrides = list(ns.pop("overrides", []) or [])
    for flag, key in (("T", "T"), ("exploration_scale", "exploration_scale")):
        if ns.get(flag) is not None:
            overrides.append(f"{key}={ns.pop(flag)}")
    for flag in ("seeds", "policies"):
        if ns.get(flag):
            overrides.append(f"{flag}=[{', '.join(map(str, ns.pop(flag)))}]")
    cli = CliConfig(
        subcommand=ns.pop("subcommand"),
        config=ns.pop("config", None),
        out=ns.pop("out", None),
        overrides=overrides,
        verbosity=ns.pop("verbose"),
    )
    cli.extra = {k: v for k, v in ns.items() if v is not None or k in ("delta", "beta_override")}
    return cli


def main(argv=None):
    cli = parse_cli(sys.argv[1:] if argv is None else argv)
    level = logging.WARNING - 10 * min(cli.verbosity, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[cli.subcommand](cli)
    except (ConfigError, FeatureFileError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunError, RuntimeError, ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
