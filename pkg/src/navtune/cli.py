"""Command-line entry point wiring every module together.

One JSON config document drives all subcommands; unknown keys are rejected
before any work starts. Exit codes: 0 success, 1 usage/config error,
2 runtime failure, 3 acceptance-check (gradcheck) failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import bench, data, train
from .grid import (GenConfig, GenerationError, OccupancyGrid, generate_barn_env,
                   inflate, plan_global)
from .planners import SCHEMAS, make_planner
from .policy import (DEFAULT_PRESETS, HeuristicPolicy, MLPPolicy, StaticPolicy,
                     VisionCritic, VisionPolicy, default_rule_table, load_policy,
                     save_policy)
from .reward import RewardConfig
from .sensors import Footprint, raycast_lidar
from .train import MLPCritic, TD3Config, bc_train, run_rlft
from .world import EpisodeConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_ACCEPTANCE = 3


class ConfigError(ValueError):
    pass


# Allowed config keys, per section. Dataclass-backed sections are validated by
# constructing the dataclass; the rest are checked against these sets.
_SECTION_KEYS = {
    "world": {"gen", "episode"},
    "planner": {"id"},
    "obs": set(),
    "policy": {"kind", "preset", "seed"},
    "data": {"envs_index", "store_dir", "dataset", "attempts_per_env",
             "experts", "thresholds", "retention"},
    "train": {"bc", "rlft"},
    "bench": {"method", "trials", "workers"},
    "seeds": {"base", "shuffle", "train"},
}
_TOP_KEYS = set(_SECTION_KEYS) | {"out_dir"}
_BC_KEYS = {"epochs", "batch", "lr", "eval_fraction"}
_RLFT_KEYS = {"episodes", "collectors", "gamma", "tau", "policy_noise",
              "noise_clip", "exploration_noise", "actor_delay", "batch",
              "buffer_capacity", "warmup", "sync_interval", "actor_lr",
              "critic_lr", "updates_per_episode"}


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    for k in d:
        if k not in allowed:
            raise ConfigError(f"unknown config key '{k}' in {where}")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


class RunConfig:
    """Validated view over the single JSON config document."""

    def __init__(self, doc: dict):
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        _reject_unknown(doc, _TOP_KEYS, "top level")
        for sec, allowed in _SECTION_KEYS.items():
            part = doc.get(sec, {})
            if not isinstance(part, dict):
                raise ConfigError(f"section '{sec}' must be an object")
            _reject_unknown(part, allowed, f"section '{sec}'")
        self.doc = doc
        self.hash = config_hash(doc)

        world = doc.get("world", {})
        try:
            self.gen = GenConfig(**world.get("gen", {}))
            self.episode = EpisodeConfig(**world.get("episode", {}))
        except TypeError as e:
            raise ConfigError(f"bad world config: {e}") from e

        self.planner_id = doc.get("planner", {}).get("id", "dwa")
        if self.planner_id not in SCHEMAS:
            raise ConfigError(f"unknown planner id '{self.planner_id}'")

        pol = doc.get("policy", {})
        self.policy_kind = pol.get("kind", "vision")
        self.policy_preset = pol.get("preset", "open")
        self.policy_seed = int(pol.get("seed", 0))

        dat = doc.get("data", {})
        self.envs_index = dat.get("envs_index")
        self.store_dir = dat.get("store_dir")
        self.dataset = dat.get("dataset")
        self.attempts_per_env = int(dat.get("attempts_per_env", 20))
        self.experts = list(dat.get("experts", ["heuristic"]))
        self.thresholds = tuple(dat.get("thresholds", data.DEFAULT_THRESHOLDS))
        self.retention = float(dat.get("retention", data.DEFAULT_RETENTION))

        tr = doc.get("train", {})
        bc = tr.get("bc", {})
        _reject_unknown(bc, _BC_KEYS, "train.bc")
        self.bc = bc
        rl = dict(tr.get("rlft", {}))
        _reject_unknown(rl, _RLFT_KEYS, "train.rlft")
        self.rlft_episodes = int(rl.pop("episodes", 200))
        self.rlft_collectors = int(rl.pop("collectors", 1))
        try:
            self.td3 = TD3Config(**rl)
        except TypeError as e:
            raise ConfigError(f"bad train.rlft config: {e}") from e

        bn = doc.get("bench", {})
        self.method = bn.get("method")
        self.trials = int(bn.get("trials", 3))
        self.workers = int(bn.get("workers", 1))

        seeds = doc.get("seeds", {})
        self.base_seed = int(seeds.get("base", 0))
        self.shuffle_seed = int(seeds.get("shuffle", 0))
        self.train_seed = int(seeds.get("train", 0))

        self.out_dir = Path(doc.get("out_dir", "runs"))


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig({})
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return RunConfig(doc)


def build_policy(spec: str, cfg: RunConfig):
    """Policy from a spec string: heuristic, static:<preset>, mlp, vision,
    or checkpoint:<path> (also accepted as a bare path to a .json/.bin pair)."""
    pid = cfg.planner_id
    if spec == "heuristic":
        return HeuristicPolicy(default_rule_table(pid))
    if spec.startswith("static"):
        name = spec.split(":", 1)[1] if ":" in spec else cfg.policy_preset
        presets = DEFAULT_PRESETS[pid]
        if name not in presets:
            raise ConfigError(f"unknown preset '{name}' for planner '{pid}'")
        return StaticPolicy(pid, np.asarray(presets[name]), name=name)
    if spec == "mlp":
        return MLPPolicy(pid, seed=cfg.policy_seed)
    if spec == "vision":
        return VisionPolicy(pid, seed=cfg.policy_seed)
    if spec.startswith("checkpoint:"):
        return load_policy(spec.split(":", 1)[1], expect_schema=pid)
    if Path(spec + ".json").exists():
        return load_policy(spec, expect_schema=pid)
    raise ConfigError(f"unknown policy spec '{spec}'")


# -- subcommands -----------------------------------------------------------


def cmd_gen_envs(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else cfg.out_dir / "envs"
    out.mkdir(parents=True, exist_ok=True)
    count = args.count if args.count is not None else 10
    entries, failures = [], []
    for i in range(count):
        seed = cfg.base_seed + i
        env_id = f"env_{i:03d}"
        try:
            grid = generate_barn_env(seed, cfg.gen)
        except GenerationError as e:
            failures.append({"env_id": env_id, "seed": seed, "error": str(e)})
            print(f"{env_id}: generation failed for seed {seed}: {e}", file=sys.stderr)
            continue
        fname = f"{env_id}.json"
        with open(out / fname, "w") as f:
            json.dump(grid.to_json_dict(), f, sort_keys=True)
        entries.append({"env_id": env_id, "file": fname, "seed": seed})
    index = {"environments": entries, "failures": failures,
             "config_hash": cfg.hash, "gen": asdict(cfg.gen)}
    with open(out / "index.json", "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
    print(f"generated {len(entries)}/{count} environments -> {out}")
    if not entries:
        print("all seeds failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _load_suite(cfg: RunConfig, override: str | None = None):
    index = override or cfg.envs_index or str(cfg.out_dir / "envs" / "index.json")
    if not Path(index).exists():
        raise ConfigError(f"environment index not found: {index} (run gen-envs first)")
    return bench.load_suite(index)


def cmd_collect(args) -> int:
    cfg = load_config(args.config)
    envs = _load_suite(cfg)
    store = Path(cfg.store_dir or cfg.out_dir / "store")
    experts = [build_policy(s, cfg) for s in cfg.experts]
    for e, spec in zip(experts, cfg.experts):
        e.name = spec
    summary = data.collect_demos(
        envs, cfg.planner_id, experts, store,
        attempts_per_env=cfg.attempts_per_env, cfg=cfg.episode,
        base_seed=cfg.base_seed)
    summary["config_hash"] = cfg.hash
    with open(store / "collection.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    print(f"stored {summary['n_stored']} trajectories under {store}")
    print("outcomes:", summary["outcomes"])
    if summary["failures"]:
        print(f"{len(summary['failures'])} episodes failed", file=sys.stderr)
    return EXIT_OK


def cmd_curate(args) -> int:
    cfg = load_config(args.config)
    store = Path(cfg.store_dir or cfg.out_dir / "store")
    out_path = Path(cfg.dataset or cfg.out_dir / "dataset.jsonl")
    manifest = data.curate(store, out_path, cfg.planner_id,
                           thresholds=cfg.thresholds, retention=cfg.retention,
                           seed=cfg.shuffle_seed)
    print(f"kept {manifest.sample_count} samples "
          f"(dropped {manifest.dropped_samples} with missing frames) -> {out_path}")
    print("envs per tier:", manifest.tier_stats["envs_per_tier"])
    return EXIT_OK


def cmd_train_bc(args) -> int:
    cfg = load_config(args.config)
    store = Path(cfg.store_dir or cfg.out_dir / "store")
    ds = Path(cfg.dataset or cfg.out_dir / "dataset.jsonl")
    if not ds.exists():
        raise ConfigError(f"dataset not found: {ds} (run curate first)")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    policy = load_policy(args.init, expect_schema=cfg.planner_id) if args.init \
        else build_policy(cfg.policy_kind, cfg)
    limit = args.dataset_limit
    if limit is not None:
        print(f"dataset limited to {limit} samples")
    curve = bc_train(ds, policy, store,
                     epochs=int(cfg.bc.get("epochs", 10)),
                     batch=int(cfg.bc.get("batch", 4)),
                     lr=float(cfg.bc.get("lr", 1e-4)),
                     eval_fraction=float(cfg.bc.get("eval_fraction", 0.1)),
                     seed=cfg.train_seed, limit=limit,
                     log_path=cfg.out_dir / "bc_log.jsonl",
                     checkpoint_dir=cfg.out_dir)
    save_policy(str(cfg.out_dir / "bc_policy"), policy,
                provenance={"config_hash": cfg.hash, "dataset": str(ds),
                            "dataset_limit": limit, "curve": curve})
    print(f"final train mse {curve[-1]['train_mse']:.4f}; "
          f"checkpoint -> {cfg.out_dir / 'bc_policy'}")
    return EXIT_OK


def cmd_train_rlft(args) -> int:
    cfg = load_config(args.config)
    if not args.init:
        raise ConfigError("train-rlft requires --init with a BC checkpoint")
    actor = load_policy(args.init, expect_schema=cfg.planner_id)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    if actor.kind == "vision":
        critics = [VisionCritic(cfg.planner_id, actor.cfg, seed=cfg.train_seed + i)
                   for i in (1, 2)]
    else:
        critics = [MLPCritic(cfg.planner_id, seed=cfg.train_seed + i) for i in (1, 2)]
    envs = _load_suite(cfg)

    def env_sampler(rng):
        return envs[int(rng.integers(len(envs)))]

    collectors = 1 if args.serial else cfg.rlft_collectors
    summary = run_rlft(env_sampler, cfg.planner_id, actor, critics[0], critics[1],
                       cfg.td3, episodes=cfg.rlft_episodes, collectors=collectors,
                       episode_cfg=cfg.episode, seed=cfg.train_seed,
                       log_path=cfg.out_dir / "rlft_log.jsonl",
                       snapshot_dir=cfg.out_dir, serial=args.serial or None)
    save_policy(str(cfg.out_dir / "rlft_policy"), actor,
                provenance={"config_hash": cfg.hash, "init": args.init,
                            "episodes": cfg.rlft_episodes})
    print(f"ran {summary['episodes']} episodes, {summary['updates']} updates; "
          f"checkpoint -> {cfg.out_dir / 'rlft_policy'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    envs = _load_suite(cfg, args.suite)
    policy = build_policy(args.policy, cfg)
    workers = 1 if args.serial else cfg.workers
    method = cfg.method or args.policy
    report = bench.eval_suite(policy, cfg.planner_id, envs, method,
                              trials=cfg.trials, base_seed=cfg.base_seed,
                              cfg=cfg.episode, workers=workers)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    bench.write_report_csv([report], cfg.out_dir / "report.csv")
    bench.write_report_json([report], cfg.out_dir / "report.json")
    print(f"{method} / {cfg.planner_id}: success {report.success_pct:.1f}% "
          f"avg time {report.avg_time:.2f}s avg score {report.avg_score:.3f} "
          f"collisions {report.collision_pct:.1f}% timeouts {report.timeout_pct:.1f}%")
    print(f"report -> {cfg.out_dir / 'report.csv'}")
    return EXIT_OK


def cmd_render(args) -> int:
    from PIL import Image
    from .obs import render_custom_image
    with open(args.env) as f:
        grid = OccupancyGrid.from_json_dict(json.load(f))
    if args.pose:
        try:
            x, y, theta = (float(v) for v in args.pose.split(","))
        except ValueError as e:
            raise ConfigError(f"--pose must be 'x,y,theta': {e}") from e
    else:
        if grid.start is None:
            raise ConfigError("environment has no start pose; pass --pose")
        x, y, theta = grid.start
    from .dynamics import RobotState
    pose = RobotState(x=x, y=y, theta=theta)
    scan = raycast_lidar(grid, pose)
    path = np.empty((0, 2))
    if grid.goal is not None:
        from .planners import DEFAULT_INFLATION
        path = plan_global(inflate(grid, DEFAULT_INFLATION), (x, y), grid.goal)
    img = render_custom_image(scan, path, pose, Footprint())
    out = args.out or "render.png"
    Image.fromarray(img.pixels).save(out)
    print(f"wrote {out}")
    return EXIT_OK


# One fixture per differentiable building block; (name, closure builder).
def _gradcheck_cases():
    rng = np.random.Generator(np.random.PCG64(7))

    def tparam(*shape):
        return ad.param(rng.normal(size=shape))

    w = tparam(5, 4)
    x = tparam(3, 5)
    # random projection keeps every functional non-degenerate (plain sums of
    # layernorm/softmax outputs have near-zero analytic gradients)
    mix = rng.normal(size=(3, 5))
    cases = [
        ("matmul", [w, x], lambda: (x @ w).sum()),
        ("gelu", [x], lambda: x.gelu().sum()),
        ("tanh-mul", [x], lambda: (x.tanh() * x).mean()),
        ("layernorm", [x], lambda: (ad.layernorm(x) * mix).sum()),
        ("softmax", [x], lambda: (ad.softmax(x, axis=-1) * mix).sum()),
    ]
    cw = tparam(2, 3, 3, 3)
    cb = tparam(2)
    ci = tparam(1, 3, 6, 6)
    cases.append(("conv2d", [cw, cb, ci],
                  lambda: ad.conv2d(ci, cw, cb, stride=1, padding=1).sum()))
    q, k, v = tparam(4, 8), tparam(4, 8), tparam(4, 8)
    cases.append(("attention", [q, k, v],
                  lambda: ad.attention(q, k, v, heads=2).sum()))
    return cases


def cmd_gradcheck(args) -> int:
    tol = 1e-4
    worst_overall = 0.0
    failed = []
    for name, params, f in _gradcheck_cases():
        err, _ = ad.grad_check(f, params, max_entries_per_param=20)
        status = "ok" if err < tol else "FAIL"
        print(f"{name:12s} max rel err {err:.3e}  {status}")
        worst_overall = max(worst_overall, err)
        if err >= tol:
            failed.append(name)
    if failed:
        print(f"gradcheck failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    print(f"all ops below {tol:g} (worst {worst_overall:.3e})")
    return EXIT_OK


# -- parser ----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="navtune",
                description="Learned online adaptation of navigation planner parameters")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, **extra_flags):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="path to the JSON run config")
        sp.add_argument("--serial", action="store_true",
                        help="force deterministic single-threaded execution")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-envs", cmd_gen_envs, "generate connected environments + index")
    sp.add_argument("--count", type=int, help="number of environments (default 10)")
    sp.add_argument("--out", help="output directory (default <out_dir>/envs)")

    add("collect", cmd_collect, "run expert episodes and store trajectories")
    add("curate", cmd_curate, "tier, filter, and export the training dataset")

    sp = add("train-bc", cmd_train_bc, "behavior cloning on the curated dataset")
    sp.add_argument("--init", help="checkpoint to initialize from")
    sp.add_argument("--dataset-limit", type=int, default=None,
                    help="train on only the first N shuffled samples")

    sp = add("train-rlft", cmd_train_rlft, "TD3 fine-tuning from a BC checkpoint")
    sp.add_argument("--init", help="BC checkpoint path (required)")

    sp = add("eval", cmd_eval, "evaluate a policy on an environment suite")
    sp.add_argument("--policy", required=True,
                    help="heuristic | static:<preset> | mlp | vision | checkpoint path")
    sp.add_argument("--suite", help="environment index file")

    sp = add("render", cmd_render, "render the observation image for an environment")
    sp.add_argument("--env", required=True, help="environment JSON file")
    sp.add_argument("--pose", help="robot pose as 'x,y,theta' (default: start)")
    sp.add_argument("--out", help="output PNG path")

    add("gradcheck", cmd_gradcheck, "finite-difference check every autodiff op")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, KeyError) as e:
        traceback.print_exc()
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
