"""Behavior cloning and TD3 fine-tuning for parameter policies.

Observations are stored in the replay buffer as compact "packs" (uint8 images,
f64 scalars); collate functions rebuild the dense batches the networks eat.
The TD3 loop is generic over any actor exposing `forward_batch` and critics
exposing `q_batch`, which keeps the scripted-oracle and bandit tests small.
"""
from __future__ import annotations

import json
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import Sample, load_dataset, load_shuffle_order
from .obs import MetaObs
from .planners import SCHEMAS, clamp_params, make_planner
from .policy import (MLPPolicy, ParamPolicy, VisionCritic, VisionPolicy,
                     batch_features, obs_features, save_policy)
from .reward import RewardConfig, StepSummary, compute_reward  # re-exported
from .world import EpisodeConfig, run_episode

__all__ = [
    "RewardConfig", "StepSummary", "compute_reward", "Transition",
    "ReplayBuffer", "TD3Config", "bc_train", "td3_update", "run_rlft",
    "MLPCritic", "NoisyPolicy", "pack_obs", "make_collate", "TD3State",
]


# -- observation packing ---------------------------------------------------


def pack_obs(policy, obs: MetaObs) -> dict:
    """Compact, picklable snapshot of what `policy` needs from a MetaObs."""
    if getattr(policy, "kind", None) == "vision":
        f = obs_features(obs, policy.cfg)
        return {"image_u8": np.clip(np.rint(f["image"] * 255), 0, 255).astype(np.uint8),
                "hist_u8": np.clip(np.rint(f["hist"] * 255), 0, 255).astype(np.uint8),
                "v": float(f["v"]), "omega": float(f["omega"]),
                "prev_phi": np.asarray(f["prev_phi"], dtype=np.float64)}
    return {"vector": np.asarray(obs.vector, dtype=np.float64)}


def make_collate(policy):
    if getattr(policy, "kind", None) == "vision":
        def collate(packs):
            return {"image": np.stack([p["image_u8"] for p in packs]).astype(np.float64) / 255.0,
                    "hist": np.stack([p["hist_u8"] for p in packs]).astype(np.float64) / 255.0,
                    "v": np.array([p["v"] for p in packs]),
                    "omega": np.array([p["omega"] for p in packs]),
                    "prev_phi": np.stack([p["prev_phi"] for p in packs])}
        return collate
    return lambda packs: np.stack([p["vector"] for p in packs])


# -- replay ----------------------------------------------------------------


@dataclass
class Transition:
    obs: dict            # packed observation
    action: np.ndarray   # normalized phi in [-1, 1]^d
    reward: float
    next_obs: dict
    done: bool
    reason: str          # success | collision | timeout | running

    def __post_init__(self):
        if not math.isfinite(self.reward):
            raise ValueError("reward must be finite")
        terminal = self.reason in ("success", "collision", "timeout")
        if self.done != terminal:
            raise ValueError(f"done={self.done} inconsistent with reason '{self.reason}'")


class ReplayBuffer:
    """Fixed-capacity ring with uniform seeded sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0
        self.inserted = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._items)

    def add(self, t: Transition) -> None:
        with self._lock:
            if len(self._items) < self.capacity:
                self._items.append(t)
            else:
                self._items[self._next] = t
            self._next = (self._next + 1) % self.capacity
            self.inserted += 1

    def sample(self, batch: int, rng: np.random.Generator) -> list[Transition]:
        with self._lock:
            if len(self._items) < batch:
                raise ValueError(f"buffer has {len(self._items)} < batch {batch}")
            idx = rng.integers(0, len(self._items), size=batch)
            return [self._items[i] for i in idx]


@dataclass
class TD3Config:
    gamma: float = 0.99
    tau: float = 0.005
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    exploration_noise: float = 0.1
    actor_delay: int = 2
    batch: int = 42
    buffer_capacity: int = 100_000
    warmup: int = 1000
    sync_interval: int = 5       # episodes between collector snapshot refreshes
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    updates_per_episode: int = 16

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")
        if self.actor_delay < 1:
            raise ValueError("actor_delay must be >= 1")


# -- behavior cloning ------------------------------------------------------


def _sample_pack(policy, sample: Sample, store_dir: Path) -> dict:
    """Build a training pack for one dataset sample (images loaded lazily)."""
    if getattr(policy, "kind", None) != "vision":
        if not sample.vector:
            raise ValueError("dataset lacks vector observations for MLP training")
        return {"vector": np.asarray(sample.vector, dtype=np.float64)}
    cfg = policy.cfg
    from .obs import CustomImage, HistoryWindow
    img = CustomImage(np.asarray(Image.open(store_dir / sample.image_ref)))
    hist = HistoryWindow(capacity=cfg.history_frames)
    for i, ref in enumerate(sample.history_refs):
        hist.push(CustomImage(np.asarray(Image.open(store_dir / ref))), float(i))
    obs = MetaObs(image=img, history=hist, v=sample.v, omega=sample.omega,
                  prev_phi=np.asarray(sample.prev_phi),
                  vector=np.zeros(721))
    return obs_features(obs, cfg)


def bc_train(dataset_path, policy, store_dir, epochs: int = 10, batch: int = 4,
             lr: float = 1e-4, seed: int = 0, limit: int | None = None,
             log_path=None, eval_fraction: float = 0.1,
             checkpoint_dir=None, progress=None) -> list[dict]:
    """Minimize mean ||phi - phi*||^2 over the dataset; returns the loss curve.

    Epoch 0 uses the dataset's stored shuffle order; later epochs reshuffle
    with a seeded rng. A held-out tail fraction tracks generalization. With
    checkpoint_dir set, policy + optimizer state are saved after every epoch
    and a killed run resumes from the last completed epoch.
    """
    samples = load_dataset(dataset_path)
    order = load_shuffle_order(dataset_path)
    if limit is not None:
        order = order[:limit]
    samples = [samples[i] for i in order]
    if not samples:
        raise ValueError("empty dataset")
    store_dir = Path(store_dir)
    n_eval = int(len(samples) * eval_fraction)
    train_samples = samples[:len(samples) - n_eval]
    eval_samples = samples[len(samples) - n_eval:]
    if not train_samples:
        raise ValueError("no training samples after held-out split")

    opt = ad.Adam(policy.params(), lr=lr)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xBC])))
    curve = []
    start_epoch = 0
    ckpt_path = None
    if checkpoint_dir is not None:
        ckpt_dir = Path(checkpoint_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = str(ckpt_dir / "bc_latest")
        if Path(ckpt_path + ".json").exists():
            arrays, header = ad.load_checkpoint(ckpt_path)
            named = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
            policy.load_arrays(named)
            opt.step_count = int(header["opt_step"])
            opt.m = [arrays[f"opt.m.{i}"] for i in range(len(opt.m))]
            opt.v = [arrays[f"opt.v.{i}"] for i in range(len(opt.v))]
            curve = list(header["curve"])
            start_epoch = int(header["epoch"]) + 1
            # replay the shuffle draws of completed epochs so the stream of
            # permutations matches an uninterrupted run
            for e in range(1, start_epoch):
                rng.permutation(len(train_samples))

    def save_state(epoch):
        if ckpt_path is None:
            return
        tensors = dict(policy.named_params())
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            tensors[f"opt.m.{i}"] = m
            tensors[f"opt.v.{i}"] = v
        ad.save_checkpoint(ckpt_path, tensors,
                           {"epoch": epoch, "opt_step": opt.step_count,
                            "curve": curve, "seed": seed})

    vision = getattr(policy, "kind", None) == "vision"

    def batch_loss(chunk: list[Sample]) -> Tensor:
        packs = [_sample_pack(policy, s, store_dir) for s in chunk]
        feats = batch_features(packs) if vision \
            else np.stack([p["vector"] for p in packs])
        target = np.stack([np.asarray(s.target_phi) for s in chunk])
        pred = policy.forward_batch(feats)
        return ad.mse(pred, target)

    for epoch in range(start_epoch, epochs):
        idx = np.arange(len(train_samples)) if epoch == 0 \
            else rng.permutation(len(train_samples))
        losses = []
        for b0 in range(0, len(idx), batch):
            chunk = [train_samples[i] for i in idx[b0:b0 + batch]]
            opt.zero_grad()
            loss = batch_loss(chunk)
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
            if progress is not None:
                progress(epoch, b0, float(loss.data))
        entry = {"epoch": epoch, "train_mse": float(np.mean(losses))}
        if eval_samples:
            with_eval = []
            for b0 in range(0, len(eval_samples), max(batch, 8)):
                with_eval.append(float(batch_loss(eval_samples[b0:b0 + max(batch, 8)]).data))
            entry["eval_mse"] = float(np.mean(with_eval))
        curve.append(entry)
        save_state(epoch)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(entry) + "\n")
    return curve


# -- TD3 -------------------------------------------------------------------


class MLPCritic(nn.Module):
    """Q(vector, action) baseline critic matching the MLP actor's trunk."""

    def __init__(self, schema_id: str, seed: int = 0, obs_dim: int = 721):
        super().__init__()
        self.schema_id = schema_id
        d = SCHEMAS[schema_id].dim
        rng = np.random.Generator(np.random.PCG64(seed))
        self.net = self.add_child("net", nn.MLP(rng, [obs_dim + d, 256, 256, 1],
                                                activation="relu"))

    def q_batch(self, vec: np.ndarray, action: Tensor) -> Tensor:
        x = ad.concat([Tensor(vec), action], axis=1)
        return self.net(x).reshape(-1)


def polyak_update(target: nn.Module, online: nn.Module, tau: float) -> None:
    for t, o in zip(target.params(), online.params()):
        t.data *= 1.0 - tau
        t.data += tau * o.data


def clone_module(module):
    import copy
    twin = copy.deepcopy(module)
    return twin


@dataclass
class TD3State:
    actor: object
    critic1: object
    critic2: object
    target_actor: object
    target_critic1: object
    target_critic2: object
    opt_actor: ad.Adam
    opt_critic1: ad.Adam
    opt_critic2: ad.Adam
    collate: object
    updates: int = 0
    actor_updates: int = 0


def make_td3_state(actor, critic1, critic2, cfg: TD3Config,
                   collate=None) -> TD3State:
    collate = collate or make_collate(actor)
    return TD3State(
        actor=actor, critic1=critic1, critic2=critic2,
        target_actor=clone_module(actor), target_critic1=clone_module(critic1),
        target_critic2=clone_module(critic2),
        opt_actor=ad.Adam(actor.params(), lr=cfg.actor_lr),
        opt_critic1=ad.Adam(critic1.params(), lr=cfg.critic_lr),
        opt_critic2=ad.Adam(critic2.params(), lr=cfg.critic_lr),
        collate=collate)


def td3_update(buffer: ReplayBuffer, st: TD3State, cfg: TD3Config,
               rng: np.random.Generator) -> dict | None:
    """One TD3 step. Returns metrics, or None when the buffer is underfull."""
    if len(buffer) < max(cfg.batch, 1):
        return None
    batch = buffer.sample(cfg.batch, rng)
    obs = st.collate([t.obs for t in batch])
    next_obs = st.collate([t.next_obs for t in batch])
    actions = np.stack([t.action for t in batch])
    rewards = np.array([t.reward for t in batch])
    not_done = 1.0 - np.array([float(t.done) for t in batch])

    # clipped double-Q target with smoothed target action
    target_a = st.target_actor.forward_batch(next_obs).data
    noise = np.clip(rng.normal(0.0, cfg.policy_noise, size=target_a.shape),
                    -cfg.noise_clip, cfg.noise_clip)
    target_a = np.clip(target_a + noise, -1.0, 1.0)
    q1t = st.target_critic1.q_batch(next_obs, Tensor(target_a)).data
    q2t = st.target_critic2.q_batch(next_obs, Tensor(target_a)).data
    y = rewards + cfg.gamma * not_done * np.minimum(q1t, q2t)

    metrics = {"target_q_mean": float(y.mean())}
    for name, critic, opt in (("critic1", st.critic1, st.opt_critic1),
                              ("critic2", st.critic2, st.opt_critic2)):
        opt.zero_grad()
        q = critic.q_batch(obs, Tensor(actions))
        loss = ad.mse(q, y)
        loss.backward()
        opt.step()
        metrics[f"{name}_loss"] = float(loss.data)
        metrics[f"{name}_q_mean"] = float(q.data.mean())

    st.updates += 1
    if st.updates % cfg.actor_delay == 0:
        st.opt_actor.zero_grad()
        for p in st.critic1.params():
            p.grad = None
        a = st.actor.forward_batch(obs)
        actor_loss = -st.critic1.q_batch(obs, a).mean()
        actor_loss.backward()
        st.opt_actor.step()
        st.actor_updates += 1
        metrics["actor_loss"] = float(actor_loss.data)
        polyak_update(st.target_actor, st.actor, cfg.tau)
        polyak_update(st.target_critic1, st.critic1, cfg.tau)
        polyak_update(st.target_critic2, st.critic2, cfg.tau)
    return metrics


# -- collection ------------------------------------------------------------


class NoisyPolicy(ParamPolicy):
    """Exploration wrapper: actor output + Gaussian noise, clipped to [-1,1]."""

    def __init__(self, base, noise_std: float, rng: np.random.Generator):
        self.base = base
        self.schema_id = base.schema_id
        self.noise_std = noise_std
        self.rng = rng
        self.needs_image = getattr(base, "needs_image", False)

    def predict(self, obs: MetaObs, deterministic: bool = False) -> np.ndarray:
        phi = np.asarray(self.base.predict(obs), dtype=np.float64)
        if deterministic or self.noise_std == 0.0:
            return phi
        return np.clip(phi + self.rng.normal(0.0, self.noise_std, phi.shape),
                       -1.0, 1.0)


def episode_transitions(log, policy, grid) -> list[Transition]:
    """Convert a recorded EpisodeLog into packed transitions."""
    out = []
    steps = log.steps
    for i, s in enumerate(steps):
        if s.obs is None:
            raise ValueError("episode must be run with record_obs=True")
        last = i == len(steps) - 1
        next_obs = steps[i + 1].obs if not last else steps[i].obs
        reason = log.outcome if last else "running"
        out.append(Transition(
            obs=pack_obs(policy, s.obs), action=np.asarray(s.phi_norm),
            reward=float(s.reward), next_obs=pack_obs(policy, next_obs),
            done=last, reason=reason))
    return out


def _collector_loop(worker: int, env_sampler, planner_id, snapshot_box, cfg,
                    episode_cfg, reward_cfg, out_queue, stop, seed, drop_counter):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, worker])))
    episode = 0
    while not stop.is_set():
        actor, version = snapshot_box["get"]()
        noisy = NoisyPolicy(actor, cfg.exploration_noise, rng)
        env_id, grid = env_sampler(rng)
        ep_seed = int(rng.integers(0, 2 ** 31))
        try:
            planner = make_planner(planner_id)
            log = run_episode(grid, planner, noisy, episode_cfg, seed=ep_seed,
                              reward_cfg=reward_cfg, record_obs=True, env_id=env_id)
            transitions = episode_transitions(log, actor, grid)
            item = {"worker": worker, "episode": episode, "version": version,
                    "env_id": env_id, "outcome": log.outcome,
                    "return": log.total_reward, "transitions": transitions}
            try:
                out_queue.put_nowait(item)
            except queue.Full:
                try:
                    out_queue.get_nowait()
                    drop_counter["n"] += 1
                except queue.Empty:
                    pass
                out_queue.put_nowait(item)
        except Exception as e:  # crash containment: log and continue
            try:
                out_queue.put_nowait({"worker": worker, "episode": episode,
                                      "error": repr(e)})
            except queue.Full:
                pass
        episode += 1


def run_rlft(env_sampler, planner_id: str, actor, critic1, critic2,
             cfg: TD3Config, episodes: int, collectors: int = 1,
             episode_cfg: EpisodeConfig | None = None,
             reward_cfg: RewardConfig | None = None, seed: int = 0,
             log_path=None, snapshot_dir=None, serial: bool | None = None,
             progress=None) -> dict:
    """TD3 fine-tuning driver.

    env_sampler(rng) -> (env_id, grid). In serial mode (collectors == 1 or
    serial=True) collection and training interleave in one thread and the run
    is deterministic; otherwise `collectors` threads feed a bounded queue.
    Returns a summary with per-episode log entries.
    """
    episode_cfg = episode_cfg or EpisodeConfig()
    reward_cfg = reward_cfg or RewardConfig()
    serial = serial if serial is not None else collectors <= 1
    st = make_td3_state(actor, critic1, critic2, cfg)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    train_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x7D3])))
    log_entries = []
    version = 0

    def log_entry(e):
        log_entries.append(e)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(e) + "\n")

    def save_snapshot(v):
        if snapshot_dir is not None and isinstance(actor, nn.Module):
            Path(snapshot_dir).mkdir(parents=True, exist_ok=True)
            save_policy(str(Path(snapshot_dir) / f"actor_v{v:05d}"), actor,
                        provenance={"version": v, "phase": "rlft"})

    def train_from_item(item, episode_index):
        nonlocal version
        if "error" in item:
            log_entry({"episode": episode_index, "error": item["error"]})
            return
        for t in item["transitions"]:
            buffer.add(t)
        metrics = None
        if len(buffer) >= max(cfg.warmup, cfg.batch):
            for _ in range(cfg.updates_per_episode):
                metrics = td3_update(buffer, st, cfg, train_rng)
        if (episode_index + 1) % cfg.sync_interval == 0:
            version += 1
            save_snapshot(version)
        entry = {"episode": episode_index, "worker": item["worker"],
                 "env_id": item["env_id"], "outcome": item["outcome"],
                 "return": item["return"], "version": item["version"],
                 "buffer": len(buffer), "updates": st.updates}
        if metrics:
            entry.update({k: metrics[k] for k in ("critic1_loss", "target_q_mean")
                          if k in metrics})
        log_entry(entry)
        if progress is not None:
            progress(entry)

    if serial:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0])))
        for ep in range(episodes):
            noisy = NoisyPolicy(actor, cfg.exploration_noise, rng)
            env_id, grid = env_sampler(rng)
            ep_seed = int(rng.integers(0, 2 ** 31))
            try:
                planner = make_planner(planner_id)
                log = run_episode(grid, planner, noisy, episode_cfg, seed=ep_seed,
                                  reward_cfg=reward_cfg, record_obs=True,
                                  env_id=env_id)
                item = {"worker": 0, "episode": ep, "version": version,
                        "env_id": env_id, "outcome": log.outcome,
                        "return": log.total_reward,
                        "transitions": episode_transitions(log, actor, grid)}
            except Exception as e:
                item = {"worker": 0, "episode": ep, "error": repr(e)}
            train_from_item(item, ep)
    else:
        stop = threading.Event()
        out_queue: queue.Queue = queue.Queue(maxsize=4 * collectors)
        drop_counter = {"n": 0}
        lock = threading.Lock()
        snap = {"actor": clone_module(actor) if isinstance(actor, nn.Module) else actor,
                "version": 0}

        def get_snapshot():
            with lock:
                if snap["version"] != version and isinstance(actor, nn.Module):
                    snap["actor"] = clone_module(actor)
                    snap["version"] = version
                return snap["actor"], snap["version"]

        box = {"get": get_snapshot}
        threads = [threading.Thread(
            target=_collector_loop,
            args=(w, env_sampler, planner_id, box, cfg, episode_cfg, reward_cfg,
                  out_queue, stop, seed, drop_counter), daemon=True)
            for w in range(collectors)]
        for t in threads:
            t.start()
        try:
            for ep in range(episodes):
                item = out_queue.get()
                train_from_item(item, ep)
        finally:
            stop.set()
            for t in threads:
                t.join(timeout=episode_cfg.timeout + 10)
        log_entry({"dropped_items": drop_counter["n"]})

    save_snapshot(version + 1)
    return {"episodes": episodes, "updates": st.updates,
            "actor_updates": st.actor_updates, "buffer_inserted": buffer.inserted,
            "log": log_entries}
