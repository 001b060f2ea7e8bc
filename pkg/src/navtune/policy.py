"""Parameter policies: heuristic rule table, flat-observation MLP, and the
vision policy with multi-layer taps, history encoder, and dense fusion head.

All policies map a MetaObs to a normalized parameter vector in [-1, 1]^d;
clamp_params converts that to physical planner parameters.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .obs import MetaObs, center_crop, downsample
from .planners import SCHEMAS, ParamSchema, SchemaError

DENSITY_RANGE = 1.5       # m; scan returns closer than this count as "dense"
CORRIDOR_PROBE_AHEAD = 2.0
CORRIDOR_PROBE_STEP = 0.25
CORRIDOR_BAND = 0.3       # m; half-width of the longitudinal bin per probe
CORRIDOR_MAX = 4.0


class PolicyError(ValueError):
    pass


class ParamPolicy:
    """Interface: predict(MetaObs, deterministic) -> d reals in [-1, 1]."""

    schema_id: str
    needs_image = False

    @property
    def schema(self) -> ParamSchema:
        return SCHEMAS[self.schema_id]

    @property
    def dim(self) -> int:
        return self.schema.dim

    def predict(self, obs: MetaObs, deterministic: bool = True) -> np.ndarray:
        raise NotImplementedError


# -- heuristic expert ------------------------------------------------------


def scan_density(obs: MetaObs) -> float:
    """Fraction of rays shorter than DENSITY_RANGE."""
    ranges = obs.vector[:720] * 10.0  # vector obs is normalized by max_range
    return float(np.mean(ranges < DENSITY_RANGE))


def corridor_width(obs: MetaObs) -> float:
    """Minimum left+right lateral clearance over the next ~2 m ahead.

    The local path direction is approximated by the robot heading: scan
    returns are binned by forward offset and the nearest return on each side
    bounds the corridor at that offset.
    """
    ranges = obs.vector[:720] * 10.0
    angles = -math.radians(270) / 2 + np.arange(720) * (math.radians(270) / 720)
    hit = ranges < 10.0 - 1e-9
    px = ranges[hit] * np.cos(angles[hit])
    py = ranges[hit] * np.sin(angles[hit])
    width = CORRIDOR_MAX
    s = 0.0
    while s <= CORRIDOR_PROBE_AHEAD:
        band = np.abs(px - s) <= CORRIDOR_BAND
        left = py[band & (py > 0)]
        right = py[band & (py < 0)]
        l = float(left.min()) if left.size else CORRIDOR_MAX / 2
        r = float(-right.max()) if right.size else CORRIDOR_MAX / 2
        width = min(width, l + r)
        s += CORRIDOR_PROBE_STEP
    return width


@dataclass
class HeuristicRule:
    density_threshold: float
    width_threshold: float
    preset: str


@dataclass
class HeuristicRuleTable:
    """Ordered rules; a rule fires when density >= its threshold OR corridor
    width <= its threshold. First match wins; otherwise the default preset."""
    schema_id: str
    rules: list[HeuristicRule]
    presets: dict[str, list[float]]
    default_preset: str

    def __post_init__(self):
        d = SCHEMAS[self.schema_id].dim
        for name, vals in self.presets.items():
            arr = np.asarray(vals, dtype=np.float64)
            if arr.shape != (d,):
                raise PolicyError(f"preset '{name}' has dim {arr.shape}, schema needs {d}")
            if np.any(np.abs(arr) > 1.0):
                raise PolicyError(f"preset '{name}' outside [-1, 1]")
        for rule in self.rules:
            if rule.preset not in self.presets:
                raise PolicyError(f"rule preset '{rule.preset}' undefined")
        if self.default_preset not in self.presets:
            raise PolicyError(f"default preset '{self.default_preset}' undefined")

    def select(self, density: float, width: float) -> str:
        for rule in self.rules:
            if density >= rule.density_threshold or width <= rule.width_threshold:
                return rule.preset
        return self.default_preset

    def to_json_dict(self) -> dict:
        return {"schema_id": self.schema_id,
                "rules": [asdict(r) for r in self.rules],
                "presets": self.presets,
                "default_preset": self.default_preset}

    @classmethod
    def from_json_dict(cls, d: dict) -> "HeuristicRuleTable":
        return cls(d["schema_id"], [HeuristicRule(**r) for r in d["rules"]],
                   d["presets"], d["default_preset"])


# Presets tuned once on training environments, then frozen. Ordering follows
# the canonical schema entries.
DEFAULT_PRESETS = {
    "dwa": {
        "open":      [1.0, 1.0, -0.5, -0.5, 0.0, 0.5, -0.5, -0.2],
        "balanced":  [0.3, 0.5, -0.2, -0.2, 0.2, 0.3, -0.2, -0.4],
        "moderate":  [0.0, 0.3, 0.0, 0.0, 0.2, 0.2, 0.0, -0.5],
        "cautious":  [-0.4, 0.4, 0.3, 0.4, 0.3, 0.0, 0.3, -0.65],
        "tight":     [-0.7, 0.5, 0.5, 0.8, 0.4, -0.2, 0.6, -0.75],
    },
    "mppi": {
        "open":      [-0.5, 0.0, -0.5, 0.0, -0.3, -0.8, 1.0],
        "balanced":  [-0.2, 0.0, -0.5, 0.0, -0.1, -0.5, 0.4],
        "moderate":  [0.0, 0.0, -0.5, 0.0, 0.0, -0.3, 0.0],
        "cautious":  [0.3, -0.3, -0.7, -0.2, 0.2, 0.0, -0.3],
        "tight":     [0.5, -0.5, -0.8, -0.4, 0.3, 0.3, -0.6],
    },
}

DEFAULT_RULES = [
    HeuristicRule(density_threshold=0.45, width_threshold=0.75, preset="tight"),
    HeuristicRule(density_threshold=0.20, width_threshold=1.40, preset="moderate"),
]


def default_rule_table(schema_id: str) -> HeuristicRuleTable:
    return HeuristicRuleTable(schema_id, list(DEFAULT_RULES),
                              {k: list(v) for k, v in DEFAULT_PRESETS[schema_id].items()},
                              "open")


class HeuristicPolicy(ParamPolicy):
    def __init__(self, table: HeuristicRuleTable):
        self.table = table
        self.schema_id = table.schema_id

    def predict(self, obs: MetaObs, deterministic: bool = True) -> np.ndarray:
        name = self.table.select(scan_density(obs), corridor_width(obs))
        return np.asarray(self.table.presets[name], dtype=np.float64)


class StaticPolicy(ParamPolicy):
    """Fixed normalized parameter vector (a static preset baseline)."""

    def __init__(self, schema_id: str, phi_normalized: np.ndarray, name: str = "static"):
        self.schema_id = schema_id
        self.phi = np.asarray(phi_normalized, dtype=np.float64)
        self.name = name
        if self.phi.shape != (self.dim,):
            raise PolicyError(f"static phi has shape {self.phi.shape}, need ({self.dim},)")

    def predict(self, obs: MetaObs, deterministic: bool = True) -> np.ndarray:
        return self.phi.copy()


# -- learned policies ------------------------------------------------------


class MLPPolicy(ParamPolicy, nn.Module):
    """Flat-observation baseline: 721 -> 256 -> 256 -> d with tanh output."""

    kind = "mlp"

    def __init__(self, schema_id: str, seed: int = 0):
        nn.Module.__init__(self)
        self.schema_id = schema_id
        self.seed = seed
        rng = np.random.Generator(np.random.PCG64(seed))
        self.net = self.add_child("net", nn.MLP(rng, [721, 256, 256, self.dim],
                                                activation="relu"))

    def forward_batch(self, vec: np.ndarray) -> Tensor:
        """vec: (B, 721) -> (B, d) in (-1, 1)."""
        return self.net(Tensor(vec)).tanh()

    def predict(self, obs: MetaObs, deterministic: bool = True) -> np.ndarray:
        return self.forward_batch(obs.vector[None, :]).data[0]

    def config_dict(self) -> dict:
        return {"schema_id": self.schema_id, "seed": self.seed}


@dataclass
class VisionPolicyConfig:
    image_size: tuple[int, int] = (96, 64)   # (w, h) policy-facing pixels
    patch_size: int = 8
    embed_dim: int = 256
    depth: int = 6
    heads: int = 4
    tap_count: int = 4
    history_frames: int = 4
    history_size: tuple[int, int] = (48, 32)  # (w, h) grayscale frames
    conv_channels: tuple[int, ...] = (8, 16, 32)
    temporal_depth: int = 2
    regressor_hidden: tuple[int, ...] = (256,)

    def __post_init__(self):
        if self.tap_count > self.depth:
            raise PolicyError("tap_count must be <= depth")
        w, h = self.image_size
        if w % self.patch_size or h % self.patch_size:
            raise PolicyError("patch size must divide the image size")
        if self.embed_dim % self.heads:
            raise PolicyError("heads must divide embed_dim")

    @property
    def grid_shape(self) -> tuple[int, int]:  # (rows, cols)
        return self.image_size[1] // self.patch_size, self.image_size[0] // self.patch_size

    @property
    def n_image_tokens(self) -> int:
        r, c = self.grid_shape
        return r * c

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("image_size", "history_size", "conv_channels", "regressor_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VisionPolicyConfig":
        d = dict(d)
        for k in ("image_size", "history_size", "conv_channels", "regressor_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def obs_features(obs: MetaObs, cfg: VisionPolicyConfig) -> dict[str, np.ndarray]:
    """Convert a MetaObs into the dense arrays the vision networks consume."""
    if obs.image is None or obs.history is None:
        raise PolicyError("vision policy needs rendered images in the MetaObs")
    img = downsample(center_crop(obs.image), cfg.image_size)  # (h, w, 3)
    frames = obs.history.read()[-cfg.history_frames:]
    hw, hh = cfg.history_size
    hist = np.stack([downsample(center_crop(f), (hw, hh)).mean(axis=-1) for f in frames])
    return {"image": img, "hist": hist, "v": np.float64(obs.v),
            "omega": np.float64(obs.omega), "prev_phi": obs.prev_phi}


def batch_features(feats: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    return {k: np.stack([f[k] for f in feats]) for k in feats[0]}


class HistoryEncoder(nn.Module):
    """Per-frame conv net + temporal transformer; mean over time.

    Residual output projections in the temporal blocks start at zero so the
    encoder is exactly the per-frame feature at initialization.
    """

    def __init__(self, rng, cfg: VisionPolicyConfig):
        super().__init__()
        self.cfg = cfg
        chans = (1,) + tuple(cfg.conv_channels)
        self.convs = [self.add_child(f"conv{i}", nn.Conv2d(rng, a, b, 3, stride=2, padding=1))
                      for i, (a, b) in enumerate(zip(chans[:-1], chans[1:]))]
        w, h = cfg.history_size
        for _ in cfg.conv_channels:
            w = (w + 1) // 2
            h = (h + 1) // 2
        self.flat_dim = w * h * chans[-1]
        self.fc = self.add_child("fc", nn.Linear(rng, self.flat_dim, cfg.embed_dim))
        self.pos = self.add_param("pos", np.zeros((cfg.history_frames, cfg.embed_dim)))
        self.blocks = [self.add_child(f"block{i}", nn.TransformerBlock(rng, cfg.embed_dim, cfg.heads))
                       for i in range(cfg.temporal_depth)]
        for b in self.blocks:
            b.proj.w.data[:] = 0.0
            b.mlp.layers[-1].w.data[:] = 0.0

    def __call__(self, hist: Tensor) -> Tensor:
        """hist: (B, K, h, w) grayscale -> (B, D)."""
        B, K, h, w = hist.shape
        x = hist.reshape(B * K, 1, h, w)
        for conv in self.convs:
            x = conv(x).relu()
        x = self.fc(x.reshape(B * K, self.flat_dim))
        x = x.reshape(B, K, self.cfg.embed_dim) + self.pos
        for block in self.blocks:
            x = block(x)
        return x.mean(axis=1)


class VisionTrunk(nn.Module):
    """Patch transformer with multi-layer taps, history fusion, and pooling.

    forward() returns the pooled feature z; set `action_tokens=d` to inject an
    action vector as extra embedded tokens (critic use).
    """

    def __init__(self, rng, cfg: VisionPolicyConfig, phi_dim: int, action_tokens: bool = False):
        super().__init__()
        self.cfg = cfg
        self.phi_dim = phi_dim
        self.action_tokens = action_tokens
        D = cfg.embed_dim
        patch_dim = cfg.patch_size * cfg.patch_size * 3
        self.patch_embed = self.add_child("patch_embed", nn.Linear(rng, patch_dim, D))
        self.pos = self.add_param("pos", np.zeros((cfg.n_image_tokens, D)))
        # State/parameter scalars enter as learned per-slot affine tokens.
        n_scalar = 2 + phi_dim + (phi_dim if action_tokens else 0)
        self.scalar_w = self.add_param("scalar_w", ad.truncated_normal(rng, (n_scalar, D), nn.INIT_STD))
        self.scalar_b = self.add_param("scalar_b", np.zeros((n_scalar, D)))
        self.blocks = [self.add_child(f"block{i}", nn.TransformerBlock(rng, D, cfg.heads))
                       for i in range(cfg.depth)]
        self.history = self.add_child("history", HistoryEncoder(rng, cfg))
        # Fusion head: per-tap projection, then residual conv refinement from
        # the deepest tap to the shallowest, history concatenated at the start.
        self.tap_proj = [self.add_child(f"tap_proj{i}", nn.Linear(rng, D, D))
                         for i in range(cfg.tap_count)]
        self.hist_fuse = self.add_child("hist_fuse", nn.Conv2d(rng, 2 * D, D, 1))
        self.fuse_blocks = [self.add_child(f"fuse{i}", nn.ResidualConvBlock(rng, D))
                            for i in range(cfg.tap_count)]
        self.pool_query = self.add_param("pool_query", ad.truncated_normal(rng, (D,), nn.INIT_STD))

    def n_tokens(self) -> int:
        return self.cfg.n_image_tokens + 2 + self.phi_dim + \
            (self.phi_dim if self.action_tokens else 0)

    def _patchify(self, image: Tensor) -> Tensor:
        """(B, h, w, 3) -> (B, N0, p*p*3), row-major over the patch grid."""
        B = image.shape[0]
        p = self.cfg.patch_size
        rows, cols = self.cfg.grid_shape
        x = image.reshape(B, rows, p, cols, p, 3)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(B, rows * cols, p * p * 3)

    def forward(self, feats: dict[str, np.ndarray], action: Tensor | None = None
                ) -> tuple[Tensor, list[Tensor]]:
        """Returns (z (B, D), taps) where taps are the last tap_count hidden states."""
        cfg = self.cfg
        B = feats["image"].shape[0]
        D = cfg.embed_dim
        img_tokens = self.patch_embed(self._patchify(Tensor(feats["image"]))) + self.pos

        scalars = [Tensor(np.asarray(feats["v"]).reshape(B, 1)),
                   Tensor(np.asarray(feats["omega"]).reshape(B, 1)),
                   Tensor(feats["prev_phi"].reshape(B, self.phi_dim))]
        if self.action_tokens:
            if action is None:
                raise PolicyError("trunk built with action tokens needs an action")
            scalars.append(action.reshape(B, self.phi_dim))
        scalar_vals = ad.concat(scalars, axis=1)  # (B, n_scalar)
        n_scalar = self.scalar_w.shape[0]
        scalar_tokens = scalar_vals.reshape(B, n_scalar, 1) * self.scalar_w + self.scalar_b

        x = ad.concat([img_tokens, scalar_tokens], axis=1)  # (B, N, D)
        taps = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i >= cfg.depth - cfg.tap_count:
                taps.append(x)

        hist_vec = self.history(Tensor(feats["hist"]))  # (B, D)

        rows, cols = cfg.grid_shape
        n_img = cfg.n_image_tokens

        def to_grid(tokens: Tensor) -> Tensor:  # (B, N0, D) -> (B, D, rows, cols)
            return tokens.reshape(B, rows, cols, D).transpose(0, 3, 1, 2)

        grids = [to_grid(self.tap_proj[i](t[:, :n_img, :])) for i, t in enumerate(taps)]
        hist_grid = hist_vec.reshape(B, D, 1, 1) * Tensor(np.ones((1, 1, rows, cols)))
        x = self.hist_fuse(ad.concat([grids[-1], hist_grid], axis=1))  # deepest first
        x = self.fuse_blocks[0](x)
        for i, g in enumerate(reversed(grids[:-1]), start=1):
            x = self.fuse_blocks[i](x + g)

        fused_tokens = x.transpose(0, 2, 3, 1).reshape(B, n_img, D)
        # State tokens bypass fusion and rejoin at pooling (final layer values).
        state_tokens = taps[-1][:, n_img:, :]
        pool_in = ad.concat([fused_tokens, state_tokens], axis=1)
        z = ad.attention_pool(pool_in, self.pool_query)
        return z, taps


class VisionPolicy(ParamPolicy, nn.Module):
    """Parameter policy regressing normalized parameters from rendered images."""

    kind = "vision"
    needs_image = True

    def __init__(self, schema_id: str, cfg: VisionPolicyConfig | None = None, seed: int = 0):
        nn.Module.__init__(self)
        self.schema_id = schema_id
        self.cfg = cfg or VisionPolicyConfig()
        self.seed = seed
        rng = np.random.Generator(np.random.PCG64(seed))
        self.trunk = self.add_child("trunk", VisionTrunk(rng, self.cfg, self.dim))
        dims = [self.cfg.embed_dim, *self.cfg.regressor_hidden, self.dim]
        self.regressor = self.add_child("regressor", nn.MLP(rng, dims))

    def forward_features(self, feats: dict[str, np.ndarray]) -> tuple[Tensor, Tensor, list[Tensor]]:
        """Returns (phi (B, d), z (B, D), taps)."""
        z, taps = self.trunk.forward(feats)
        phi = self.regressor(z).tanh()
        return phi, z, taps

    def forward_batch(self, feats: dict[str, np.ndarray]) -> Tensor:
        return self.forward_features(feats)[0]

    def predict(self, obs: MetaObs, deterministic: bool = True) -> np.ndarray:
        feats = batch_features([obs_features(obs, self.cfg)])
        return self.forward_batch(feats).data[0]

    def config_dict(self) -> dict:
        return {"schema_id": self.schema_id, "seed": self.seed, "cfg": self.cfg.to_dict()}


class VisionCritic(nn.Module):
    """Q network sharing the actor trunk architecture; scalar head, action tokens."""

    def __init__(self, schema_id: str, cfg: VisionPolicyConfig | None = None, seed: int = 0):
        super().__init__()
        self.schema_id = schema_id
        self.cfg = cfg or VisionPolicyConfig()
        self.seed = seed
        self.phi_dim = SCHEMAS[schema_id].dim
        rng = np.random.Generator(np.random.PCG64(seed))
        self.trunk = self.add_child("trunk", VisionTrunk(rng, self.cfg, self.phi_dim,
                                                         action_tokens=True))
        dims = [self.cfg.embed_dim, *self.cfg.regressor_hidden, 1]
        self.head = self.add_child("head", nn.MLP(rng, dims))

    def q_batch(self, feats: dict[str, np.ndarray], action: Tensor) -> Tensor:
        """(B features, (B, d) action Tensor) -> (B,) Q values."""
        z, _ = self.trunk.forward(feats, action=action)
        return self.head(z).reshape(-1)


# -- checkpoint round trip -------------------------------------------------


def save_policy(path: str, policy, provenance: dict | None = None) -> None:
    if not isinstance(policy, nn.Module):
        raise PolicyError(f"only learned policies are checkpointable, got {type(policy).__name__}")
    header = {"policy_kind": policy.kind, "config": policy.config_dict(),
              "schema_id": policy.schema_id, "provenance": provenance or {}}
    ad.save_checkpoint(path, policy.named_params(), header)


def load_policy(path: str, expect_schema: str | None = None):
    arrays, header = ad.load_checkpoint(path)
    schema_id = header["schema_id"]
    if expect_schema is not None and schema_id != expect_schema:
        raise SchemaError(f"checkpoint is for schema '{schema_id}', expected '{expect_schema}'")
    kind = header["policy_kind"]
    cfgd = header["config"]
    if kind == "mlp":
        policy = MLPPolicy(schema_id, seed=cfgd.get("seed", 0))
    elif kind == "vision":
        policy = VisionPolicy(schema_id, VisionPolicyConfig.from_dict(cfgd["cfg"]),
                              seed=cfgd.get("seed", 0))
    else:
        raise PolicyError(f"unknown policy kind '{kind}'")
    policy.load_arrays(arrays)
    return policy
