"""Command-line entry point: ``implicit-cp <subcommand> [options]``.

Configuration is resolved in layers: preset, then the optional YAML (or
JSON) file, then ``--set key=value`` overrides, then ``--seed``. The resolved
configuration is echoed into ``manifest.json`` in the output directory, and
feeding that file back through ``--config`` reproduces the run.

Exit codes: 0 success, 1 invalid configuration or input, 2 divergence.
"""
import argparse
import copy
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .cp_model import InitSpec, initialize, save_factorization
from .dynamics import (
    check_balancedness_conservation,
    check_norm_bounds,
    check_norm_ode,
    growth_windows,
    incremental_order_holds,
    with_unbalancedness,
)
from .losses import huber, squared
from .optimizer import AdamConfig, DivergenceError, TrainConfig, train, write_trajectory_csv
from .problems import (
    GroundTruthSpec,
    estimate_rip_delta,
    generate_ground_truth,
    sample_measurements,
    sample_observations,
)
from .rank_one import (
    RankOneExperimentConfig,
    alpha_sweep,
    corollary2_probe,
    leading_base_init,
    rank_one_instance,
    rho_upper_bound,
    run_alpha,
    sweep_properties,
    validate_assumptions,
    validate_rho,
)

logger = logging.getLogger("implicit_cp")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2
DEFAULT_MNIST_DIR = "data/mnist"


class ConfigError(ValueError):
    pass


_TRAIN = {
    "lr_scheme": "adaptive",
    "lr": 1e-2,
    "beta": 0.99,
    "eps": 1e-6,
    "stop_loss": 1e-8,
    "max_iters": 1_000_000,
    "record_every": 100,
}

_FIG3 = {
    "shape": [10, 10, 10, 10],
    "gt_rank": 5,
    "n_obs": 2000,
    "rank": 100,
    "init_std": [0.005],
    "loss": "squared",
    "loss_coeff": 1.0,
    "huber_delta": None,
    "top_k": 10,
    "train": dict(_TRAIN, max_iters=500_000, record_every=1000),
}


def _derive(base, **changes):
    out = copy.deepcopy(base)
    for key, value in changes.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key].update(value)
        else:
            out[key] = value
    return out


def _paper(base, rank=1000):
    return _derive(base, rank=rank, init_std=[0.05, 0.01, 0.005],
                   train={"max_iters": 1_000_000})


_FIG5 = _derive(_FIG3, loss="huber", huber_delta=5e-7, train={"stop_loss": 5e-11})
_FIG6 = _derive(_FIG3, shape=[10, 10, 10], gt_rank=3, n_obs=300, rank=100)
_FIG7 = _derive(_FIG3, n_meas=2000, rip_trials=1000)
del _FIG7["n_obs"]

PRESETS = {
    "fig3-desk": ("complete", _FIG3),
    "fig3-paper": ("complete", _paper(_FIG3)),
    "fig5-desk": ("complete", _FIG5),
    "fig5-paper": ("complete", _paper(_FIG5)),
    "fig6-desk": ("complete", _FIG6),
    "fig6-paper": ("complete", _paper(_FIG6, rank=100)),
    "fig7-desk": ("sense", _FIG7),
    "fig7-paper": ("sense", _paper(_FIG7)),
    "dynamics-desk": ("dynamics", {
        "shape": [8, 8, 8],
        "gt_rank": 2,
        "n_obs": 150,
        "rank": 10,
        "init_std": 0.01,
        "loss": "squared",
        "loss_coeff": 0.5,
        "conservation_lr": 1e-3,
        "conservation_steps": 10_000,
        "conservation_tol": 1e-3,
        "ode_lr": 1e-5,
        "ode_steps": 1000,
        "ode_tol": 1e-2,
        "norm_floor": 1e-6,
        "unbalanced_eps": 0.5,
        "bounds_slack": 1e-2,
    }),
    "rank1-desk": ("rank1", {
        "shape": [4, 4, 4],
        "delta_h": 0.05,
        "base_rank": 4,
        "rho": None,
        "alphas": [1e-1, 1e-2, 1e-3],
        "lr": 0.5,
        "horizon": 300.0,
        "distance_cap": 100.0,
        "max_steps": 2_000_000,
        "record_every": 10,
        "probe_trajectories": 5,
        "probe_horizon": 2e5,
        "probe_tol": 1e-2,
    }),
    "probe-desk": ("probe", {
        "mnist_dir": None,
        "variants": ["original", "rand_image", "rand_label"],
        "digits": list(range(10)),
        "ranks": [1],
        "n_train": 10000,
        "ridge": False,
        "adam": {"lr": 5e-4, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "batch_size": 5000,
                 "stop_loss": 1e-8, "max_iters": 3000},
    }),
    "probe-paper": ("probe", {
        "mnist_dir": None,
        "variants": ["original", "rand_image", "rand_label"],
        "digits": list(range(10)),
        "ranks": list(range(1, 16)),
        "n_train": None,
        "ridge": True,
        "adam": {"lr": 5e-4, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "batch_size": 5000,
                 "stop_loss": 1e-8, "max_iters": 10_000},
    }),
    "table1": ("probe", {
        "mnist_dir": None,
        "variants": ["original", "rand_image", "rand_label"],
        "digits": list(range(10)),
        "ranks": [],
        "n_train": None,
        "ridge": True,
        "adam": {},
    }),
}

SMOKE = {
    "complete": {"train": {"max_iters": 200, "record_every": 50}},
    "sense": {"train": {"max_iters": 200, "record_every": 50}, "rip_trials": 20},
    "dynamics": {"conservation_steps": 200, "ode_steps": 50},
    "rank1": {"alphas": [1e-1], "horizon": 20.0, "probe_trajectories": 1, "probe_horizon": 50.0},
    "probe": {"digits": [0], "ranks": [1], "n_train": 1000, "adam": {"max_iters": 20}},
}


def _parse_value(text):
    """YAML scalar or flow collection: ``3``, ``1e-3``, ``[1, 2]``, ``null``, ``fig``."""
    return yaml.safe_load(text)


def apply_override(config, assignment):
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = config
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(raw)


def _merge(base, update, path=""):
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, path + key + ".")
        else:
            base[key] = value


def resolve_config(command, preset=None, config_path=None, overrides=(), seed=None, smoke=False):
    """Layered configuration for `command` (see module docstring)."""
    if preset is None:
        preset = next(name for name, (cmd, _) in PRESETS.items() if cmd == command)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cmd, values = PRESETS[preset]
    if cmd != command:
        raise ConfigError(f"preset {preset!r} belongs to subcommand {cmd!r}")
    config = copy.deepcopy(values)
    config["seed"] = None
    file_seed = None
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if "config" in loaded and "subcommand" in loaded:
            # a manifest from an earlier run
            if loaded["subcommand"] != command:
                raise ConfigError(f"manifest is for {loaded['subcommand']!r}, not {command!r}")
            loaded = loaded["config"]
        loaded = dict(loaded)
        loaded.pop("preset", None)
        file_seed = loaded.pop("seed", None)
        _merge(config, loaded)
    if smoke:
        _merge(config, copy.deepcopy(SMOKE[command]))
    for assignment in overrides:
        apply_override(config, assignment)
    if seed is not None:
        config["seed"] = seed
    elif config["seed"] is None:
        config["seed"] = file_seed
    if config["seed"] is None:
        raise ConfigError("refusing to run without a seed: pass --seed or set seed in the config")
    config["seed"] = int(config["seed"])
    config["preset"] = preset
    return config


def _loss_from(config):
    if config["loss"] == "squared":
        return squared(float(config.get("loss_coeff", 0.5)))
    if config["loss"] == "huber":
        if config.get("huber_delta") is None:
            raise ConfigError("huber loss needs huber_delta")
        return huber(float(config["huber_delta"]))
    raise ConfigError(f"unknown loss {config['loss']!r}")


def _train_config(config):
    t = config["train"]
    return TrainConfig(lr_scheme=t["lr_scheme"], lr=float(t["lr"]), beta=float(t["beta"]),
                       eps=float(t["eps"]), stop_loss=float(t["stop_loss"]),
                       max_iters=int(t["max_iters"]), record_every=int(t["record_every"]),
                       seed=config["seed"])


def _std_tag(std):
    return f"{std:g}"


def _fmt(x):
    return "" if x is None else repr(float(x))


def _run_factorization(config, problem, W, out_dir):
    """Train one factorization per init std; write trajectories and a summary."""
    loss = _loss_from(config)
    tc = _train_config(config)
    shape = tuple(config["shape"])
    top_k = int(config["top_k"])
    stds = config["init_std"]
    stds = stds if isinstance(stds, list) else [stds]
    rows = []
    outputs = []
    for std in stds:
        f0 = initialize(InitSpec("gaussian", std=float(std), seed=config["seed"]), shape,
                        int(config["rank"]))
        f, records = train(f0, problem, loss, tc, ground_truth=W)
        name = f"trajectory_std{_std_tag(std)}.csv"
        write_trajectory_csv(records, out_dir / name, top_k=top_k)
        ck = f"final_std{_std_tag(std)}.json"
        save_factorization(f, out_dir / ck)
        outputs += [name, ck]
        last = records[-1]
        norms = np.sort(last.norms)[::-1]
        windows = growth_windows(records, int(config["gt_rank"]))
        rows.append([_std_tag(std), last.iter, _fmt(last.time), _fmt(last.loss),
                     _fmt(last.recon_error)] + [_fmt(v) for v in norms[:top_k]]
                    + [int(incremental_order_holds(windows))])
    header = (["init_std", "iters", "time", "loss", "recon_error"]
              + [f"norm_{j + 1}" for j in range(min(top_k, int(config["rank"])))]
              + ["incremental_order"])
    _write_csv(out_dir / "summary.csv", header, rows)
    return outputs + ["summary.csv"]


def _write_csv(path, header, rows):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_complete(config, out_dir, jobs=1):
    shape = tuple(int(d) for d in config["shape"])
    W = generate_ground_truth(GroundTruthSpec(shape, int(config["gt_rank"]), config["seed"]))
    obs = sample_observations(W, int(config["n_obs"]), config["seed"])
    return {"outputs": _run_factorization(config, obs, W, out_dir)}


def cmd_sense(config, out_dir, jobs=1):
    shape = tuple(int(d) for d in config["shape"])
    W = generate_ground_truth(GroundTruthSpec(shape, int(config["gt_rank"]), config["seed"]))
    meas = sample_measurements(shape, int(config["n_meas"]), config["seed"], W=W)
    rip = estimate_rip_delta(meas, trials=int(config["rip_trials"]), seed=config["seed"])
    outputs = _run_factorization(config, meas, W, out_dir)
    return {"outputs": outputs,
            "rip_estimate": dict(rip.__dict__, delta_rescaled=rip.delta_rescaled)}


def cmd_dynamics(config, out_dir, jobs=1):
    shape = tuple(int(d) for d in config["shape"])
    seed = config["seed"]
    W = generate_ground_truth(GroundTruthSpec(shape, int(config["gt_rank"]), seed))
    obs = sample_observations(W, int(config["n_obs"]), seed)
    loss = _loss_from(config)
    f0 = initialize(InitSpec("balanced_gaussian", std=float(config["init_std"]), seed=seed),
                    shape, int(config["rank"]))
    order = len(shape)

    def run(f, lr, steps, record_every, gammas):
        tc = TrainConfig("fixed", lr=lr, max_iters=steps, record_every=record_every,
                         stop_loss=0.0, record_gammas=gammas, record_mode_norms=True)
        return train(f, obs, loss, tc)[1]

    lr = float(config["conservation_lr"])
    steps = int(config["conservation_steps"])
    every = max(1, steps // 100)
    tol = float(config["conservation_tol"])
    cons = check_balancedness_conservation(run(f0, lr, steps, every, False), tol)
    half = check_balancedness_conservation(run(f0, lr / 2, steps, every, False), tol)
    ratio = cons.max_violation / half.max_violation if half.max_violation > 0 else float("inf")
    ode_records = run(f0, float(config["ode_lr"]), int(config["ode_steps"]), 1, True)
    ode = check_norm_ode(ode_records, order, float(config["ode_tol"]), float(config["norm_floor"]))
    eps = float(config["unbalanced_eps"])
    unb = run(with_unbalancedness(f0, eps), float(config["ode_lr"]), int(config["ode_steps"]), 1,
              True)
    bounds = check_norm_bounds(unb, order, eps, float(config["bounds_slack"]),
                               float(config["norm_floor"]))
    rows = [
        ["balancedness_conservation", _fmt(cons.max_violation), _fmt(tol), int(cons.passed)],
        ["conservation_halved_lr", _fmt(half.max_violation), _fmt(tol), int(half.passed)],
        ["conservation_halving_ratio", _fmt(ratio), _fmt(1.5), int(ratio >= 1.5)],
        ["norm_ode", _fmt(ode.max_violation), _fmt(ode.tolerance), int(ode.passed)],
        ["norm_bounds", _fmt(bounds.max_violation), _fmt(bounds.tolerance), int(bounds.passed)],
    ]
    _write_csv(out_dir / "dynamics_report.csv", ["check", "value", "tolerance", "passed"], rows)
    write_trajectory_csv(ode_records, out_dir / "ode_trajectory.csv")
    return {"outputs": ["dynamics_report.csv", "ode_trajectory.csv"],
            "checks": {r[0]: bool(r[3]) for r in rows},
            "details": {"norm_ode": ode.details, "norm_bounds": bounds.details}}


def _rank1_setup(config):
    shape = tuple(int(d) for d in config["shape"])
    seed = config["seed"]
    W = rank_one_instance(shape, seed)
    obs = sample_observations(W, W.size, seed)
    delta = float(config["delta_h"])
    base = leading_base_init(obs, delta, int(config["base_rank"]), seed)
    rho = config["rho"]
    rho = 0.5 * rho_upper_bound(obs, delta) if rho is None else float(rho)
    validate_rho(rho, obs, delta)
    rcfg = RankOneExperimentConfig(rho, [float(a) for a in config["alphas"]], base,
                                   float(config["horizon"]), float(config["distance_cap"]), delta,
                                   float(config["lr"]), int(config["max_steps"]))
    return W, obs, rcfg


def _rank1_arm(args):
    config, alpha = args
    _, obs, rcfg = _rank1_setup(config)
    return run_alpha(rcfg, obs, alpha, record_every=int(config["record_every"]))


def cmd_rank1(config, out_dir, jobs=1):
    W, obs, rcfg = _rank1_setup(config)
    report = validate_assumptions(rcfg.base_init, obs, rcfg.delta_h)
    if not report.passed:
        raise ConfigError("rank-one assumptions fail: " + "; ".join(report.failures))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            traces = list(ex.map(_rank1_arm, [(config, a) for a in rcfg.alphas]))
    else:
        traces = alpha_sweep(rcfg, obs, record_every=int(config["record_every"]))
    outputs = []
    rows = []
    for tr in traces:
        name = f"trace_alpha{tr.alpha:g}.csv"
        tr.write_csv(out_dir / name)
        outputs.append(name)
        s = tr.summary()
        rows.append([f"{tr.alpha:g}", s["t0_iter"], _fmt(s["t0_time"]), int(s["crossed"]),
                     s["leading"], _fmt(s["nonleading_norm_sum"]), _fmt(s["max_distance"]),
                     _fmt(s["final_distance"]), s["stop_reason"]])
    _write_csv(out_dir / "sweep.csv", ["alpha", "t0_iter", "t0_time", "crossed", "leading",
                                       "nonleading_norm_sum", "max_distance", "final_distance",
                                       "stop_reason"], rows)
    props = sweep_properties(traces)
    smallest = initialize(InitSpec("scaled", alpha=rcfg.alphas[-1], base=rcfg.base_init))
    probe = corollary2_probe(obs, rcfg.delta_h, W, rcfg.rho, full_init=smallest,
                             n_trajectories=int(config["probe_trajectories"]),
                             seed=config["seed"], lr=rcfg.lr,
                             horizon=float(config["probe_horizon"]),
                             tol=float(config["probe_tol"]))
    return {"outputs": outputs + ["sweep.csv"], "rho": rcfg.rho,
            "assumptions": report.to_dict(), "sweep": props, "corollary_probe": probe,
            "note": ("distances are measured to one specific balanced rank-one companion; a "
                     "large distance does not rule out another rank-one trajectory being close")}


def cmd_probe(config, out_dir, jobs=1):
    from .probe import (
        RESULT_COLUMNS,
        SUMMARY_COLUMNS,
        THRESHOLD,
        load_dataset,
        run_probe,
        summarize,
        write_rows,
    )

    mnist = config["mnist_dir"] or os.environ.get("MNIST_DIR") or DEFAULT_MNIST_DIR
    mnist = Path(mnist)
    for name in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                 "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"):
        if not (mnist / name).exists():
            raise ConfigError(f"IDX file not found: {mnist / name}")
    ds = load_dataset(mnist)
    adam = AdamConfig(**{**AdamConfig().to_dict(), **config["adam"], "seed": config["seed"]})
    rows, timings = run_probe(ds, config["variants"], config["digits"], config["ranks"],
                              config["seed"], adam, config["n_train"], jobs, config["ridge"])
    write_rows(rows, RESULT_COLUMNS, out_dir / "results.csv")
    write_rows(summarize(rows), SUMMARY_COLUMNS, out_dir / "summary.csv")
    return {"outputs": ["results.csv", "summary.csv"], "binarize_threshold": THRESHOLD,
            "task_wall_time_seconds": [
                {"variant": r["variant"], "digit": r["digit"], "k": r["k"], "seconds": t}
                for r, t in zip(rows, timings)]}


COMMANDS = {
    "complete": cmd_complete,
    "sense": cmd_sense,
    "dynamics": cmd_dynamics,
    "rank1": cmd_rank1,
    "probe": cmd_probe,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="implicit-cp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--preset", help="named preset (see `implicit-cp presets`)")
        p.add_argument("--config", help="YAML/JSON file or an earlier manifest.json")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key (dotted for sections)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers for independent arms")
        p.add_argument("--smoke", action="store_true", help="tiny budget for a quick check")
        p.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("presets", help="list presets")
    return parser


def _write_manifest(out_dir, command, config, result, wall):
    manifest = {
        "subcommand": command,
        "config": config,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "wall_time_seconds": wall,
    }
    manifest.update(result)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, default=_json_default)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        for name, (cmd, _) in PRESETS.items():
            print(f"{name:14s} {cmd}")
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        config = resolve_config(args.command, args.preset, args.config, args.overrides,
                                args.seed, args.smoke)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        result = COMMANDS[args.command](config, out_dir, args.jobs)
        _write_manifest(out_dir, args.command, config, result, time.perf_counter() - start)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ValueError, KeyError, TypeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
