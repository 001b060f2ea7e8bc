"""Demonstration collection and dataset curation.

Raw store: one directory per trajectory holding `log.json` plus PNG frames.
Curation streams trajectory logs (never more than one in memory), applies
difficulty-aware trajectory selection and motion-aware frame filtering, and
exports JSON Lines samples with a manifest and a stored shuffle order.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .bench import barn_score, optimal_time
from .grid import OccupancyGrid
from .obs import CustomImage
from .planners import SCHEMAS, clamp_params, make_planner
from .reward import RewardConfig
from .world import EpisodeConfig, EpisodeLog, run_episode

PROGRESS_EPS = 0.01  # m; stagnation below this is treated as no progress
DEFAULT_THRESHOLDS = (0.40, 0.30, 0.20, 0.10)
DEFAULT_RETENTION = 0.10


@dataclass
class Sample:
    env_id: str
    traj_id: str
    step: int
    image_ref: str                 # PNG path relative to the store root
    history_refs: list[str]        # K refs, oldest first
    v: float
    omega: float
    prev_phi: list[float]
    target_phi: list[float]
    vector: list[float]            # 721-dim flat observation
    dist_to_goal: float
    prev_dist_to_goal: float
    outcome: str
    traj_score: float

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, d: dict) -> "Sample":
        return cls(**d)


@dataclass
class DatasetManifest:
    schema_id: str
    planner_id: str
    sample_count: int
    tier_stats: dict
    expert_kinds: list[str]
    seeds: list[int]
    filter_config_hash: str
    image_mode: str = "path"
    dropped_samples: int = 0

    def to_json_dict(self) -> dict:
        return asdict(self)


# -- collection ------------------------------------------------------------


def trajectory_id(env_id: str, expert_name: str, attempt: int) -> str:
    return f"{env_id}-{expert_name}-a{attempt:03d}"


def _save_frame(img: CustomImage, path: Path) -> None:
    Image.fromarray(img.pixels).save(path, format="PNG")


def save_trajectory(store_dir: Path, traj_id: str, env_id: str, expert_name: str,
                    seed: int, log: EpisodeLog, score: float,
                    goal: tuple[float, float]) -> None:
    tdir = store_dir / traj_id
    frames_dir = tdir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    steps = []
    for i, s in enumerate(log.steps):
        frame_ref = None
        if s.obs is not None and s.obs.image is not None:
            frame_ref = f"{traj_id}/frames/{i:04d}.png"
            _save_frame(s.obs.image, store_dir / frame_ref)
        steps.append({
            "step": i, "t": s.t,
            "dist_to_goal": math.hypot(goal[0] - s.pose[0], goal[1] - s.pose[1]),
            "phi_norm": [float(v) for v in s.phi_norm],
            "phi_values": [float(v) for v in s.phi_values],
            "v": float(s.obs.v) if s.obs is not None else 0.0,
            "omega": float(s.obs.omega) if s.obs is not None else 0.0,
            "prev_phi": [float(v) for v in s.obs.prev_phi] if s.obs is not None else [],
            "vector": [float(v) for v in s.obs.vector] if s.obs is not None else [],
            "pose": [float(v) for v in s.pose],
            "reward": float(s.reward),
            "frame": frame_ref,
        })
    doc = {"traj_id": traj_id, "env_id": env_id, "expert": expert_name,
           "seed": seed, "outcome": log.outcome,
           "traversal_time": float(log.traversal_time), "score": float(score),
           "steps": steps}
    with open(tdir / "log.json", "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def collect_demos(envs: list[tuple[str, OccupancyGrid]], planner_id: str,
                  experts: list, store_dir, attempts_per_env: int = 20,
                  cfg: EpisodeConfig | None = None,
                  reward_cfg: RewardConfig | None = None,
                  base_seed: int = 0, progress=None) -> dict:
    """Run every (env, expert, attempt) episode and persist trajectories.

    Per-trajectory write failures are recorded and do not abort the sweep.
    Returns a summary dict with counts and failures.
    """
    store_dir = Path(store_dir)
    store_dir.mkdir(parents=True, exist_ok=True)
    cfg = cfg or EpisodeConfig()
    schema = SCHEMAS[planner_id]
    for e in experts:
        if e.schema_id != schema.planner_id:
            raise ValueError(f"expert schema '{e.schema_id}' != planner '{planner_id}'")
    n_stored = 0
    failures = []
    outcomes = {"success": 0, "collision": 0, "timeout": 0}
    for ei, (env_id, grid) in enumerate(envs):
        ot = optimal_time(grid)
        for xi, expert in enumerate(experts):
            name = getattr(expert, "name", type(expert).__name__)
            for attempt in range(attempts_per_env):
                seed = int(np.random.SeedSequence(
                    [base_seed, ei, xi, attempt]).generate_state(1)[0] % (2 ** 31))
                traj_id = trajectory_id(env_id, name, attempt)
                try:
                    planner = make_planner(planner_id)
                    log = run_episode(grid, planner, expert, cfg, seed=seed,
                                      reward_cfg=reward_cfg, record_obs=True,
                                      env_id=env_id)
                    score = barn_score(log.outcome, log.traversal_time, ot)
                    save_trajectory(store_dir, traj_id, env_id, name, seed, log,
                                    score, grid.goal)
                    outcomes[log.outcome] += 1
                    n_stored += 1
                except OSError as e:
                    failures.append({"traj_id": traj_id, "error": str(e)})
                if progress is not None:
                    progress(env_id, name, attempt)
    summary = {"n_stored": n_stored, "outcomes": outcomes, "failures": failures,
               "planner_id": planner_id,
               "experts": [getattr(e, "name", type(e).__name__) for e in experts]}
    with open(store_dir / "collection.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary


def iter_trajectories(store_dir):
    """Yield trajectory log dicts one at a time, sorted by trajectory id."""
    store_dir = Path(store_dir)
    for tdir in sorted(p for p in store_dir.iterdir() if p.is_dir()):
        log_path = tdir / "log.json"
        if log_path.exists():
            with open(log_path) as f:
                yield json.load(f)


# -- curation --------------------------------------------------------------


def tier_environments(env_scores: dict[str, float]) -> tuple[dict[str, int], list[float]]:
    """Quartile split by mean score, easiest (highest score) first.

    Ties are broken by env id. Returns (env -> tier in 0..3, per-tier minimum
    mean score), tier 0 being the easiest quartile.
    """
    if not env_scores:
        raise ValueError("no environment scores")
    order = sorted(env_scores, key=lambda e: (-env_scores[e], e))
    tiers: dict[str, int] = {}
    boundaries = []
    for tier, chunk in enumerate(np.array_split(np.array(order, dtype=object), 4)):
        for env in chunk:
            tiers[env] = tier
        boundaries.append(min((env_scores[e] for e in chunk), default=math.nan))
    return tiers, boundaries


def difficulty_sample(trajs, tiers: dict[str, int],
                      thresholds=DEFAULT_THRESHOLDS):
    """Keep a trajectory iff score >= threshold of its environment's tier.

    Thresholds run easiest-to-hardest and must be non-increasing; harder tiers
    get progressively relaxed score requirements. Yields lazily.
    """
    thresholds = tuple(float(t) for t in thresholds)
    if len(thresholds) != 4:
        raise ValueError("need exactly 4 tier thresholds")
    if any(a < b for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be non-increasing easiest to hardest")
    for traj in trajs:
        tier = tiers[traj["env_id"]]
        if traj["score"] >= thresholds[tier]:
            yield traj


def traj_frames(traj: dict, history_k: int = 4) -> list[Sample]:
    """Flatten one trajectory log into Sample records (history by reference)."""
    steps = traj["steps"]
    samples = []
    dists = [s.get("dist_to_goal") for s in steps]
    for i, s in enumerate(steps):
        if s.get("frame") is None:
            continue
        lo = max(0, i - history_k + 1)
        hist = [steps[j]["frame"] for j in range(lo, i + 1)]
        hist = [hist[0]] * (history_k - len(hist)) + hist
        d = dists[i]
        d_prev = dists[i - 1] if i > 0 else d
        samples.append(Sample(
            env_id=traj["env_id"], traj_id=traj["traj_id"], step=s["step"],
            image_ref=s["frame"], history_refs=hist,
            v=s["v"], omega=s["omega"], prev_phi=list(s["prev_phi"]),
            target_phi=list(s["phi_norm"]), vector=list(s.get("vector", [])),
            dist_to_goal=d,
            prev_dist_to_goal=d_prev, outcome=traj["outcome"],
            traj_score=traj["score"]))
    return samples


def motion_filter(frames, retention: float = DEFAULT_RETENTION,
                  rng: np.random.Generator | None = None):
    """Keep progress frames; keep stagnant frames with probability `retention`.

    A frame counts as progress when dist_to_goal < prev_dist_to_goal - eps.
    Yields lazily; rng draws happen only for stagnant frames, in input order.
    """
    rng = rng or np.random.default_rng(0)
    for f in frames:
        if f.dist_to_goal < f.prev_dist_to_goal - PROGRESS_EPS:
            yield f
        elif retention >= 1.0 or rng.random() < retention:
            yield f


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def export_dataset(samples, out_path, schema_id: str, planner_id: str,
                   tier_stats: dict, expert_kinds: list[str], seeds: list[int],
                   filter_config: dict, store_dir=None,
                   shuffle_seed: int = 0) -> DatasetManifest:
    """Write samples as JSON Lines plus a manifest and a seeded shuffle order.

    Samples with unresolvable history refs are dropped and counted; the
    shuffle order file lets training replay the same permutation.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    dropped = 0
    with open(out_path, "w") as f:
        for s in samples:
            if store_dir is not None:
                refs = [s.image_ref] + list(s.history_refs)
                if not all((Path(store_dir) / r).exists() for r in refs):
                    dropped += 1
                    continue
            f.write(json.dumps(s.to_json_dict(), sort_keys=True) + "\n")
            n += 1
    order = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([shuffle_seed]))).permutation(n)
    with open(out_path.with_suffix(".shuffle.json"), "w") as f:
        json.dump({"seed": shuffle_seed, "order": order.tolist()}, f)
    manifest = DatasetManifest(
        schema_id=schema_id, planner_id=planner_id, sample_count=n,
        tier_stats=tier_stats, expert_kinds=expert_kinds, seeds=seeds,
        filter_config_hash=_config_hash(filter_config), dropped_samples=dropped)
    with open(out_path.with_suffix(".manifest.json"), "w") as f:
        json.dump(manifest.to_json_dict(), f, indent=2, sort_keys=True)
    return manifest


def load_dataset(path) -> list[Sample]:
    with open(path) as f:
        return [Sample.from_json_dict(json.loads(line)) for line in f if line.strip()]


def load_shuffle_order(path) -> np.ndarray:
    with open(Path(path).with_suffix(".shuffle.json")) as f:
        return np.asarray(json.load(f)["order"], dtype=np.int64)


def curate(store_dir, out_path, planner_id: str,
           thresholds=DEFAULT_THRESHOLDS, retention: float = DEFAULT_RETENTION,
           seed: int = 0) -> DatasetManifest:
    """Streaming curation driver: tiering, trajectory selection, frame filter,
    export. Reads each trajectory log twice (score pass + sample pass) so only
    one log is ever in memory.
    """
    store_dir = Path(store_dir)
    env_scores: dict[str, list[float]] = {}
    experts: set[str] = set()
    seeds: list[int] = []
    for traj in iter_trajectories(store_dir):
        env_scores.setdefault(traj["env_id"], []).append(traj["score"])
        experts.add(traj["expert"])
        seeds.append(traj["seed"])
    if not env_scores:
        raise ValueError(f"no trajectories found under {store_dir}")
    means = {e: float(np.mean(v)) for e, v in env_scores.items()}
    tiers, boundaries = tier_environments(means)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xF17])))

    def frame_stream():
        kept_trajs = difficulty_sample(iter_trajectories(store_dir), tiers, thresholds)
        for traj in kept_trajs:
            yield from motion_filter(traj_frames(traj), retention, rng)

    tier_stats = {
        "boundaries": [float(b) for b in boundaries],
        "thresholds": [float(t) for t in thresholds],
        "envs_per_tier": [sum(1 for t in tiers.values() if t == k) for k in range(4)],
    }
    filter_config = {"thresholds": list(thresholds), "retention": retention,
                     "progress_eps": PROGRESS_EPS, "seed": seed}
    return export_dataset(frame_stream(), out_path, SCHEMAS[planner_id].planner_id,
                          planner_id, tier_stats, sorted(experts), sorted(seeds),
                          filter_config, store_dir=store_dir, shuffle_seed=seed)
