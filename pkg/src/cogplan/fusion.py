"""Stage-2 planner and the three ways of wiring the frozen cognition
feature V_t into it.

baseline  F = CrossAttn(Q_ego, V^s, V^s)
f1        gate B_t with V_t, pool to sparse tokens S_t, F = proj([CrossAttn(Q, V^s), CrossAttn(Q, S_t)])
f2        Q' = CrossAttn(Q_ego, V_t, V_t), F = CrossAttn(Q', V^s, V^s)
f3        F as baseline, then F'' = TransformerDecoder(F, V_t, q_pos, k_pos)

All variants decode with the same command-conditioned plan head.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import MLP, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, Tensor
from .autodiff import tensor as T
from .exceptions import ConfigError, InputError, TrainingDivergedError
from .metrics import l2_metric
from .signal_prep import split
from .synth import COMMANDS, HISTORY_LEN, HORIZON, Scene

log = logging.getLogger(__name__)

FRAMEWORKS = ("baseline", "f1", "f2", "f3")
FRAMEWORK_DEFAULTS = {
    "baseline": {"layers": 0, "heads": 4, "dropout": 0.0},
    "f1": {"layers": 1, "heads": 4, "dropout": 0.1},
    "f2": {"layers": 1, "heads": 4, "dropout": 0.1},
    "f3": {"layers": 4, "heads": 4, "dropout": 0.1},
}
HISTORY_SCALE = 0.1  # metres -> roughly unit-range inputs


# -- scene batches ----------------------------------------------------------

@dataclass
class SceneBatch:
    raster: np.ndarray  # b x H x W x 2 (occupancy, history)
    history: np.ndarray  # b x K*3
    command: np.ndarray  # b, ints
    expert: np.ndarray  # b x T x 2
    grid: np.ndarray  # b x H x W occupancy
    camera: np.ndarray  # b x F x h x w x C
    origin: tuple[float, float]
    resolution: float
    cognition: np.ndarray | None = None  # b x d, precomputed V_t

    def __len__(self) -> int:
        return len(self.command)

    def take(self, idx) -> "SceneBatch":
        return SceneBatch(self.raster[idx], self.history[idx], self.command[idx], self.expert[idx],
                          self.grid[idx], self.camera[idx], self.origin, self.resolution,
                          None if self.cognition is None else self.cognition[idx])


def command_index(c) -> int:
    if isinstance(c, str):
        if c not in COMMANDS:
            raise InputError(f"unknown command {c!r}; expected one of {COMMANDS}")
        return COMMANDS.index(c)
    c = int(c)
    if not 0 <= c < len(COMMANDS):
        raise InputError(f"command index {c} out of range")
    return c


def rasterize_history(scene: Scene) -> np.ndarray:
    """Mark the cells under past and current poses with their recency in (0, 1]."""
    raster = np.zeros(scene.grid.shape)
    poses = np.vstack([scene.ego_history[:, :2], [[0.0, 0.0]]])
    for k, xy in enumerate(poses):
        ix, iy = np.floor((xy - np.asarray(scene.origin)) / scene.resolution).astype(int)
        if 0 <= ix < raster.shape[0] and 0 <= iy < raster.shape[1]:
            raster[ix, iy] = (k + 1) / len(poses)
    return raster


def batch_scenes(scenes: list[Scene]) -> SceneBatch:
    if not scenes:
        raise InputError("no scenes given")
    origin, res, shape = scenes[0].origin, scenes[0].resolution, scenes[0].grid.shape
    for s in scenes:
        if s.origin != origin or s.resolution != res or s.grid.shape != shape:
            raise InputError(f"scene {s.scene_id!r} uses a different grid layout")
        if s.ego_history.shape != (HISTORY_LEN, 3) or s.expert_traj.shape != (HORIZON, 2):
            raise InputError(f"scene {s.scene_id!r} has unexpected history/trajectory shape")
    grid = np.stack([s.grid for s in scenes]).astype(np.float64)
    raster = np.stack([grid, np.stack([rasterize_history(s) for s in scenes])], axis=-1)
    history = np.stack([s.ego_history.ravel() for s in scenes]) * HISTORY_SCALE
    return SceneBatch(
        raster=raster, history=history,
        command=np.array([command_index(s.command) for s in scenes]),
        expert=np.stack([s.expert_traj for s in scenes]),
        grid=grid, camera=np.stack([s.camera_view.frames for s in scenes]),
        origin=origin, resolution=res,
    )


# -- differentiable occupancy -------------------------------------------------

def bilinear_occupancy(points: Tensor, grid: np.ndarray, origin, resolution: float) -> Tensor:
    """Bilinearly interpolated occupancy at ``points`` (b x T x 2) over cell
    centres of ``grid`` (b x H x W); outside the grid reads as free."""
    b, n, _ = points.shape
    H, W = grid.shape[1:]
    u = (points.data - np.asarray(origin)) / resolution - 0.5
    i0 = np.floor(u).astype(int)
    f = u - i0
    bi = np.arange(b)[:, None]

    def cell(di, dj):
        ii, jj = i0[..., 0] + di, i0[..., 1] + dj
        ok = (ii >= 0) & (ii < H) & (jj >= 0) & (jj < W)
        vals = np.zeros((b, n))
        vals[ok] = grid[np.broadcast_to(bi, (b, n))[ok], ii[ok], jj[ok]]
        return vals

    g00, g10, g01, g11 = cell(0, 0), cell(1, 0), cell(0, 1), cell(1, 1)
    fx, fy = f[..., 0], f[..., 1]
    out = (g00 * (1 - fx) * (1 - fy) + g10 * fx * (1 - fy) + g01 * (1 - fx) * fy + g11 * fx * fy)

    def backward(g):
        dx = ((g10 - g00) * (1 - fy) + (g11 - g01) * fy) / resolution
        dy = ((g01 - g00) * (1 - fx) + (g11 - g10) * fx) / resolution
        return (np.stack([g * dx, g * dy], axis=-1),)

    return Tensor.from_op(out, (points,), backward, "bilinear_occupancy")


# -- modules ------------------------------------------------------------------

class BevEncoder(Module):
    """Patch encoder over the occupancy + history raster, giving B_t (b x hw x c)
    and the pooled baseline visual tokens V^s (b x n_v x c)."""

    def __init__(self, rng, grid_cells: int = 64, hw: int = 16, channels: int = 32, n_v: int = 16):
        if grid_cells % hw:
            raise ConfigError(f"grid of {grid_cells} cells not divisible into {hw} x {hw} patches")
        side = int(round(math.sqrt(n_v)))
        if side * side != n_v or hw % side:
            raise ConfigError(f"n_v={n_v} must be a square whose side divides {hw}")
        self.hw, self.patch, self.n_v_side = hw, grid_cells // hw, side
        self.embed = MLP([self.patch * self.patch * 2, channels, channels], rng)
        self.pos = Parameter(rng.normal(scale=0.1, size=(hw * hw, channels)))

    def forward(self, raster: np.ndarray) -> tuple[Tensor, Tensor]:
        b, H, W, ch = raster.shape
        p, h = self.patch, self.hw
        patches = raster.reshape(b, h, p, h, p, ch).transpose(0, 1, 3, 2, 4, 5).reshape(b, h * h, p * p * ch)
        bev = self.embed(Tensor(patches)) + self.pos
        c = bev.shape[-1]
        s = self.n_v_side
        blocks = bev.reshape(b, s, h // s, s, h // s, c).mean(axis=(2, 4))
        return bev, blocks.reshape(b, s * s, c)


class AttnGate(Module):
    """Per-cell sigmoid gate from the channel-max of B_t and the broadcast V_t."""

    def __init__(self, rng, channels: int, cognition_dim: int):
        self.mlp = MLP([1 + cognition_dim, channels, 1], rng)
        self.logit_override: float | None = None  # test hook: +/-inf opens/closes the gate

    def forward(self, bev: Tensor, cognition: Tensor) -> tuple[Tensor, Tensor]:
        b, n, _ = bev.shape
        pooled = bev.max(axis=-1, keepdims=True)
        v = T.broadcast_to(cognition.reshape(b, 1, cognition.shape[-1]), (b, n, cognition.shape[-1]))
        logits = self.mlp(T.concat([pooled, v], axis=-1))
        if self.logit_override is not None:
            logits = Tensor(np.full(logits.shape, float(self.logit_override)))
        gate = T.sigmoid(logits)
        return bev * gate, gate


class SparseTokens(Module):
    """Learned spatial softmax pooling to n_s tokens, then one residual self-attention."""

    def __init__(self, rng, channels: int, n_s: int, heads: int, dropout: float = 0.0, dropout_rng=None):
        if n_s < 1:
            raise ConfigError(f"n_s must be >= 1, got {n_s}")
        self.logits = Linear(channels, n_s, rng)
        self.self_attn = MultiHeadAttention(channels, heads, rng, dropout=dropout, dropout_rng=dropout_rng)

    def weights(self, bev: Tensor) -> Tensor:
        return T.softmax(self.logits(bev).swapaxes(-1, -2), axis=-1)  # b x n_s x hw

    def pool(self, bev: Tensor) -> Tensor:
        return self.weights(bev) @ bev

    def forward(self, bev: Tensor) -> Tensor:
        tokens = self.pool(bev)
        return tokens + self.self_attn(tokens, tokens, tokens)


class EgoQuery(Module):
    def __init__(self, rng, channels: int, n_q: int = 1, hidden: int = 64):
        self.mlp = MLP([HISTORY_LEN * 3, hidden, n_q * channels], rng)
        self.n_q, self.channels = n_q, channels

    def forward(self, history: np.ndarray) -> Tensor:
        return self.mlp(Tensor(history)).reshape(len(history), self.n_q, self.channels)


class DecoderLayer(Module):
    """Pre-norm: self-attention, cross-attention, feed-forward, each residual."""

    def __init__(self, rng, channels: int, kv_dim: int, heads: int, dropout: float, dropout_rng):
        self.norm1 = LayerNorm(channels)
        self.self_attn = MultiHeadAttention(channels, heads, rng, dropout=dropout, dropout_rng=dropout_rng)
        self.norm2 = LayerNorm(channels)
        self.cross_attn = MultiHeadAttention(channels, heads, rng, kdim=kv_dim, vdim=kv_dim,
                                             dropout=dropout, dropout_rng=dropout_rng)
        self.norm3 = LayerNorm(channels)
        self.ffn = MLP([channels, 2 * channels, channels], rng, dropout=dropout, dropout_rng=dropout_rng)

    def forward(self, x: Tensor, memory: Tensor, q_pos: Tensor, k_pos: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h, h, q_pos=q_pos, k_pos=q_pos)
        h = self.norm2(x)
        x = x + self.cross_attn(h, memory, memory, q_pos=q_pos, k_pos=k_pos)
        return x + self.ffn(self.norm3(x))


class PlanHead(Module):
    """Mean-pooled planning feature + command embedding -> per-step offsets -> cumulative waypoints."""

    def __init__(self, rng, channels: int, horizon: int = HORIZON, cmd_dim: int = 16, hidden: int = 64):
        self.command_embed = Parameter(rng.normal(scale=0.1, size=(len(COMMANDS), cmd_dim)))
        self.mlp = MLP([channels + cmd_dim, hidden, hidden, horizon * 2], rng, zero_last=True)
        self.horizon = horizon

    def forward(self, feature: Tensor, command) -> Tensor:
        command = np.array([command_index(c) for c in np.atleast_1d(command)])
        pooled = feature.mean(axis=1) if feature.ndim == 3 else feature
        x = T.concat([pooled, self.command_embed[command]], axis=-1)
        offsets = self.mlp(x).reshape(len(command), self.horizon, 2)
        return T.cumsum(offsets, axis=1)


@dataclass
class PlanOutput:
    trajectory: Tensor  # b x T x 2
    plan_feature: Tensor  # the feature handed to the plan head
    features: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)  # resolved architecture echo


@dataclass
class PlannerConfig:
    framework: str = "f3"
    layers: int | None = None
    heads: int | None = None
    dropout: float | None = None
    n_s: int = 8
    grid_cells: int = 64
    bev_hw: int = 16
    channels: int = 32
    n_v: int = 16
    n_q: int = 1
    cognition_dim: int = 200
    cognition_tokens: int = 4
    hidden: int = 64
    cmd_dim: int = 16

    def resolved(self) -> "PlannerConfig":
        if self.framework not in FRAMEWORKS:
            raise ConfigError(f"unknown framework {self.framework!r}; expected one of {FRAMEWORKS}")
        d = FRAMEWORK_DEFAULTS[self.framework]
        out = copy.copy(self)
        out.layers = d["layers"] if self.layers is None else int(self.layers)
        out.heads = d["heads"] if self.heads is None else int(self.heads)
        out.dropout = d["dropout"] if self.dropout is None else float(self.dropout)
        if out.layers < 0:
            raise ConfigError("layers must be non-negative")
        if self.cognition_dim % self.cognition_tokens:
            raise ConfigError(
                f"cognition dim {self.cognition_dim} not divisible into {self.cognition_tokens} tokens")
        return out


class Planner(Module):
    """Shared baseline components are built first and in a fixed order, so
    f3 with zero decoder layers initialises exactly like the baseline."""

    def __init__(self, cfg: PlannerConfig, seed: int = 0):
        cfg = cfg.resolved()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0xF05])
        self._dropout_rng = np.random.default_rng([seed, 0xD2])
        c, heads = cfg.channels, cfg.heads
        kv = cfg.cognition_dim // cfg.cognition_tokens
        self.bev = BevEncoder(rng, cfg.grid_cells, cfg.bev_hw, c, cfg.n_v)
        self.ego = EgoQuery(rng, c, cfg.n_q, cfg.hidden)
        self.visual_attn = MultiHeadAttention(c, heads, rng)
        self.plan_head = PlanHead(rng, c, HORIZON, cfg.cmd_dim, cfg.hidden)
        drop, drng = cfg.dropout, self._dropout_rng
        if cfg.framework == "f1":
            self.gate = AttnGate(rng, c, cfg.cognition_dim)
            self.sparse = SparseTokens(rng, c, cfg.n_s, heads, drop, drng)
            self.sparse_attn = MultiHeadAttention(c, heads, rng)
            self.merge = Linear(2 * c, c, rng)
        elif cfg.framework == "f2":
            self.ego_attn = [MultiHeadAttention(c, heads, rng, kdim=kv, vdim=kv, dropout=drop, dropout_rng=drng)
                             for _ in range(max(cfg.layers, 1))]
        elif cfg.framework == "f3" and cfg.layers > 0:
            self.decoder = [DecoderLayer(rng, c, kv, heads, drop, drng) for _ in range(cfg.layers)]
            self.q_pos = Parameter(rng.normal(scale=0.1, size=(cfg.n_q, c)))
            self.k_pos = Parameter(rng.normal(scale=0.1, size=(cfg.cognition_tokens, kv)))

    @property
    def uses_cognition(self) -> bool:
        return self.cfg.framework != "baseline"

    def cognition_tokens(self, cognition: Tensor) -> Tensor:
        b, d = cognition.shape
        n = self.cfg.cognition_tokens
        return cognition.reshape(b, n, d // n)

    def forward(self, batch: SceneBatch, cognition: Tensor | None = None) -> PlanOutput:
        cfg = self.cfg
        bev, visual = self.bev(batch.raster)
        q = self.ego(batch.history)
        feats = {"B_t": bev, "V_s": visual, "Q_ego": q}
        if self.uses_cognition and cognition is None:
            raise ConfigError(f"framework {cfg.framework} needs the cognition feature V_t")
        if cfg.framework == "f1":
            brain, gate = self.gate(bev, cognition)
            sparse = self.sparse(brain)
            f_s = self.visual_attn(q, visual, visual)
            f_b = self.sparse_attn(q, sparse, sparse)
            plan = self.merge(T.concat([f_s, f_b], axis=-1))
            feats.update(B_brain=brain, gate=gate, S_t=sparse, F_plan_s=f_s, F_plan_b=f_b)
        elif cfg.framework == "f2":
            tokens = self.cognition_tokens(cognition)
            q2 = q
            for layer in self.ego_attn:
                q2 = layer(q2, tokens, tokens)
            plan = self.visual_attn(q2, visual, visual)
            feats["Q_ego_prime"] = q2
        else:
            plan = self.visual_attn(q, visual, visual)
            if cfg.framework == "f3" and cfg.layers > 0:
                feats["F_plan"] = plan
                tokens = self.cognition_tokens(cognition)
                for layer in self.decoder:
                    plan = layer(plan, tokens, self.q_pos, self.k_pos)
        feats["plan"] = plan
        return PlanOutput(self.plan_head(plan, batch.command), plan, feats, dataclasses.asdict(cfg))


def planning_loss(traj: Tensor, batch: SceneBatch, l2_weight: float = 1.0,
                  collision_weight: float = 0.5) -> Tensor:
    """Mean squared waypoint distance plus summed occupancy under the waypoints."""
    diff = traj - Tensor(batch.expert)
    mse = (diff * diff).sum(axis=-1).mean()
    loss = l2_weight * mse
    if collision_weight:
        occ = bilinear_occupancy(traj, batch.grid, batch.origin, batch.resolution)
        loss = loss + collision_weight * occ.sum(axis=-1).mean()
    return loss


# -- estimator ----------------------------------------------------------------

@dataclass
class Stage2EpochLog:
    epoch: int
    train_loss: float
    val_l2: float
    val_l2_uniad: float


def mean_l2(pred: np.ndarray, gt: np.ndarray, convention: str = "stp3") -> float:
    return float(np.mean([l2_metric(p, g, convention)["avg"] for p, g in zip(pred, gt)]))


class TrajectoryPlanner(BaseEstimator):
    """Stage-2 estimator. ``fit(scenes, cognition=aligner)`` trains the planner
    with the aligner's video encoder frozen (unless ``freeze_cognition`` is
    False); ``predict(scenes)`` returns ``n x 6 x 2`` waypoints."""

    def __init__(self, framework="f3", layers=None, heads=None, dropout=None, n_s=8, bev_hw=16,
                 channels=32, n_v=16, n_q=1, cognition_tokens=4, hidden=64, cmd_dim=16, epochs=50,
                 batch_size=16, lr=1e-3, weight_decay=0.0, l2_weight=1.0, collision_weight=0.5,
                 freeze_cognition=True, ratios=(0.8, 0.1, 0.1), seed=0):
        self.framework = framework
        self.layers = layers
        self.heads = heads
        self.dropout = dropout
        self.n_s = n_s
        self.bev_hw = bev_hw
        self.channels = channels
        self.n_v = n_v
        self.n_q = n_q
        self.cognition_tokens = cognition_tokens
        self.hidden = hidden
        self.cmd_dim = cmd_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.l2_weight = l2_weight
        self.collision_weight = collision_weight
        self.freeze_cognition = freeze_cognition
        self.ratios = ratios
        self.seed = seed

    def config(self, cognition_dim: int = 200, grid_cells: int = 64) -> PlannerConfig:
        return PlannerConfig(self.framework, self.layers, self.heads, self.dropout, self.n_s,
                             grid_cells, self.bev_hw, self.channels, self.n_v, self.n_q,
                             cognition_dim, self.cognition_tokens, self.hidden, self.cmd_dim)

    def _attach(self, cognition, grid_cells: int) -> None:
        if self.framework not in FRAMEWORKS:
            raise ConfigError(f"unknown framework {self.framework!r}")
        if cognition is None and self.framework != "baseline":
            raise ConfigError(f"framework {self.framework} needs a stage-1 checkpoint")
        encoder = getattr(cognition, "video_encoder_", cognition)
        self.cognition_ = None if encoder is None else copy.deepcopy(encoder)
        dim = self.cognition_.embed_dim if self.cognition_ is not None else 200
        self.model_ = Planner(self.config(dim, grid_cells), self.seed)
        if self.cognition_ is not None:
            self.cognition_.freeze(self.freeze_cognition)
            self.cognition_.train(not self.freeze_cognition)

    def cognition_feature(self, batch: SceneBatch) -> Tensor | None:
        """V_t for the batch; gradients flow into the encoder only when it is unfrozen."""
        if self.cognition_ is None or not self.model_.uses_cognition:
            return None
        if batch.cognition is not None:
            return Tensor(batch.cognition)
        mask = np.ones(batch.camera.shape[:2])
        if all(p.frozen for p in self.cognition_.parameters()):
            with ad.no_grad():
                return Tensor(self.cognition_(batch.camera, mask).data)
        return self.cognition_(batch.camera, mask)

    def _precompute(self, batch: SceneBatch) -> SceneBatch:
        if self.cognition_ is not None and self.freeze_cognition and self.model_.uses_cognition:
            was = self.cognition_.training
            self.cognition_.eval()
            with ad.no_grad():
                batch.cognition = self.cognition_(batch.camera, np.ones(batch.camera.shape[:2])).data
            self.cognition_.train(was)
        return batch

    def trainable_parameters(self) -> list[Parameter]:
        params = self.model_.parameters()
        if self.cognition_ is not None and not self.freeze_cognition and self.model_.uses_cognition:
            params += self.cognition_.parameters()
        return params

    def fit(self, X: list[Scene], y=None, cognition=None, manifest=None):
        scenes = _check_scenes(X)
        self._attach(cognition, scenes[0].grid.shape[0])
        ids = [s.scene_id or str(i) for i, s in enumerate(scenes)]
        manifest = manifest or split(ids, self.ratios, self.seed)
        pos = {sid: i for i, sid in enumerate(ids)}
        train_idx = np.array([pos[i] for i in manifest.train if i in pos])
        val_idx = np.array([pos[i] for i in manifest.val if i in pos])
        if len(train_idx) < 1 or len(val_idx) < 1:
            raise InputError("split leaves no training or validation scenes")
        self.manifest_ = manifest
        data = self._precompute(batch_scenes(scenes))
        train, val = data.take(train_idx), data.take(val_idx)

        opt = ad.Adam(self.trainable_parameters(), lr=self.lr, weight_decay=self.weight_decay)
        order_rng = np.random.default_rng([self.seed, 0x0D])
        self.initial_val_l2_ = self._val_l2(val)
        self.history_: list[Stage2EpochLog] = []
        for epoch in range(1, self.epochs + 1):
            self.model_.train()
            order = order_rng.permutation(len(train))
            losses = []
            for start in range(0, len(order), self.batch_size):
                batch = train.take(order[start:start + self.batch_size])
                out = self.model_(batch, self.cognition_feature(batch))
                loss = planning_loss(out.trajectory, batch, self.l2_weight, self.collision_weight)
                if not math.isfinite(loss.item()):
                    raise TrainingDivergedError(
                        f"stage-2 loss became {loss.item()} at epoch {epoch} ({self.framework})")
                loss.backward()
                opt.step()
                losses.append(loss.item())
            l2s = self._val_l2(val, both=True)
            row = Stage2EpochLog(epoch, float(np.mean(losses)), *l2s)
            self.history_.append(row)
            log.info("stage2 %s epoch %d loss=%.4f val_l2=%.4f", self.framework, epoch,
                     row.train_loss, row.val_l2)
        self.model_.eval()
        return self

    def _val_l2(self, val: SceneBatch, both: bool = False):
        pred = self._predict_batch(val)
        stp3 = mean_l2(pred, val.expert, "stp3")
        return (stp3, mean_l2(pred, val.expert, "uniad")) if both else stp3

    def _predict_batch(self, batch: SceneBatch) -> np.ndarray:
        was = self.model_.training
        self.model_.eval()
        cog_was = None if self.cognition_ is None else self.cognition_.training
        if self.cognition_ is not None:
            self.cognition_.eval()
        out = []
        with ad.no_grad():
            for start in range(0, len(batch), 64):
                sub = batch.take(slice(start, start + 64))
                out.append(self.model_(sub, self.cognition_feature(sub)).trajectory.data)
        self.model_.train(was)
        if self.cognition_ is not None:
            self.cognition_.train(cog_was)
        return np.concatenate(out)

    def plan(self, X: list[Scene]) -> PlanOutput:
        """Full forward (with intermediate features) in evaluation mode."""
        check_is_fitted(self, "model_")
        batch = self._precompute(batch_scenes(_check_scenes(X)))
        self.model_.eval()
        with ad.no_grad():
            return self.model_(batch, self.cognition_feature(batch))

    def predict(self, X: list[Scene]) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self._predict_batch(self._precompute(batch_scenes(_check_scenes(X))))

    def score(self, X: list[Scene], y=None) -> float:
        """Negative mean ST-P3 average L2, so larger is better."""
        scenes = _check_scenes(X)
        return -mean_l2(self.predict(scenes), np.stack([s.expert_traj for s in scenes]))

    # -- persistence -------------------------------------------------------
    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        tensors, frozen = {}, {}
        for name, p in self.model_.named_parameters("planner."):
            tensors[name], frozen[name] = p.data, False
        if self.cognition_ is not None:
            for name, p in self.cognition_.named_parameters("cognition."):
                tensors[name], frozen[name] = p.data, p.frozen
        params = {k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()}
        meta = {"kind": "stage2", "params": params, "grid_cells": self.model_.cfg.grid_cells,
                "cognition": None if self.cognition_ is None else {
                    "embed_dim": self.cognition_.embed_dim, "patch": self.cognition_.patch,
                    "channels": self.cognition_.patch_embed.in_dim // self.cognition_.patch ** 2,
                    "token_dim": self.cognition_.patch_embed.out_dim,
                    "feature_dim": self.cognition_.head.layers[0].in_dim,
                    "head_hidden": self.cognition_.head.layers[0].out_dim,
                    "frame_size": self.cognition_.frame_size}}
        ad.save_archive(path, tensors, frozen, seed=self.seed, metadata=meta)

    @classmethod
    def load(cls, path) -> "TrajectoryPlanner":
        from .alignment import VideoEncoder

        tensors, manifest = ad.load_archive(path)
        meta = manifest["metadata"]
        if meta.get("kind") != "stage2":
            raise ConfigError(f"{path} is not a stage-2 checkpoint")
        params = dict(meta["params"])
        params["ratios"] = tuple(params["ratios"])
        self = cls(**params)
        cog = None
        if meta["cognition"] is not None:
            m = meta["cognition"]
            cog = VideoEncoder(np.random.default_rng(0), m["embed_dim"], m["feature_dim"], m["token_dim"],
                               m["head_hidden"], m["patch"], m["channels"], 0.0, None, m["frame_size"])
            cog.load_state_dict({k[len("cognition."):]: v for k, v in tensors.items()
                                 if k.startswith("cognition.")})
        self._attach(cog, meta["grid_cells"])
        self.model_.load_state_dict({k[len("planner."):]: v for k, v in tensors.items()
                                     if k.startswith("planner.")})
        self.model_.eval()
        return self


def _check_scenes(X) -> list[Scene]:
    X = list(X)
    if not X:
        raise InputError("no scenes given")
    for s in X:
        if not isinstance(s, Scene):
            raise InputError(f"expected Scene, got {type(s).__name__}")
    return X
