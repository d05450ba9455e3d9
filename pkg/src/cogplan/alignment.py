"""Contrastive alignment of a trainable video encoder to a frozen EEG encoder."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import MLP, Linear, Module, Parameter, Tensor
from .autodiff import tensor as T
from .exceptions import ConfigError, InputError, TrainingDivergedError
from .signal_prep import EegClip, SplitManifest, split
from .synth import PairedSample, VideoClip

log = logging.getLogger(__name__)

CLIP_BETA_INIT = math.log(1 / 0.07)
PROCESSED_RATE_HZ = 200.0


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(b, F, H, W, C) -> (b, F, n_patches, patch*patch*C)."""
    b, f, h, w, c = frames.shape
    if h % patch or w % patch:
        raise InputError(f"frame size {h}x{w} not divisible by patch {patch}")
    x = frames.reshape(b, f, h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(b, f, (h // patch) * (w // patch), patch * patch * c)


def stack_videos(clips: list[VideoClip], n_frames: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad clips to a common frame count; returns ``(frames, mask)``."""
    if not clips:
        raise InputError("no video clips given")
    for clip in clips:
        if clip.n_frames < 1:
            raise InputError("video clip has no frames")
    n = max(n_frames or 0, max(c.n_frames for c in clips))
    shape = clips[0].frames.shape[1:]
    frames = np.zeros((len(clips), n) + shape)
    mask = np.zeros((len(clips), n))
    for i, clip in enumerate(clips):
        if clip.frames.shape[1:] != shape:
            raise InputError(f"frame shape {clip.frames.shape[1:]} differs from {shape}")
        frames[i, :clip.n_frames] = clip.frames
        mask[i, :clip.n_frames] = 1.0
    return frames, mask


class VideoEncoder(Module):
    """Per-frame patch embedding, per-frame MLP over the flattened patch
    tokens and masked temporal mean (the backbone), followed by a two-layer
    projection head."""

    def __init__(self, rng: np.random.Generator, embed_dim: int = 200, feature_dim: int = 64,
                 token_dim: int = 16, head_hidden: int = 128, patch: int = 4, channels: int = 3,
                 dropout: float = 0.01, dropout_rng: np.random.Generator | None = None,
                 frame_size: int = 16):
        self.patch = patch
        n_patches = (frame_size // patch) ** 2
        self.patch_embed = Linear(patch * patch * channels, token_dim, rng)
        self.frame_mlp = MLP([n_patches * token_dim, feature_dim, feature_dim], rng)
        self.head = MLP([feature_dim, head_hidden, embed_dim], rng, dropout=dropout,
                        dropout_rng=dropout_rng)
        self.embed_dim = embed_dim
        self.frame_size = frame_size

    def backbone(self, frames: np.ndarray, mask: np.ndarray) -> Tensor:
        tokens = Tensor(patchify(frames, self.patch))
        per_patch = self.patch_embed(tokens).gelu()
        b, f, n, d = per_patch.shape
        per_frame = self.frame_mlp(per_patch.reshape(b, f, n * d))  # b x F x d'
        m = mask[..., None]
        return (per_frame * m).sum(axis=1) / m.sum(axis=1)

    def forward(self, frames: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        """Unit-norm embeddings, ``b x embed_dim``."""
        if mask is None:
            mask = np.ones(frames.shape[:2])
        return T.l2_normalize(self.head(self.backbone(frames, mask)), axis=-1)


class EegEncoderStub(Module):
    """Fixed seeded linear map plus tanh from flattened processed EEG."""

    def __init__(self, in_dim: int, embed_dim: int = 200, seed: int = 1234):
        rng = np.random.default_rng([seed, 0xEE6])
        self.weight = Parameter(rng.normal(size=(in_dim, embed_dim)) * (6.0 / math.sqrt(in_dim)),
                                frozen=True)
        self.bias = Parameter(rng.normal(scale=0.1, size=embed_dim), frozen=True)
        self.in_dim = in_dim

    def forward(self, x: np.ndarray) -> Tensor:
        return (Tensor(x) @ self.weight + self.bias).tanh()


def preprocess_pairs(pairs: list[PairedSample], prep=None) -> list[PairedSample]:
    """Run the EEG chain on every pair. A clip longer than one window yields one
    pair per window, each holding the matching slice of video frames."""
    from .signal_prep import EegPreprocessor

    prep = prep or EegPreprocessor()
    out = []
    for pair in pairs:
        windows = prep.process_clip(pair.eeg)
        if len(windows) == 1:
            out.append(PairedSample(pair.video, dataclasses.replace(windows[0], clip_id=pair.pair_id),
                                    pair.pair_id))
            continue
        per = max(1, int(round(prep.window_s * pair.video.fps)))
        for k, w in enumerate(windows):
            frames = pair.video.frames[k * per:(k + 1) * per]
            if len(frames) == 0:
                break
            out.append(PairedSample(VideoClip(frames, pair.video.fps, pair.video.latent_state),
                                    w, w.clip_id))
    return out


def eeg_matrix(clips: list[EegClip], n_samples: int) -> np.ndarray:
    """Flatten processed clips to ``(n, channels * n_samples)``, zero-padding short ones."""
    rows = []
    for clip in clips:
        if not clip.processed or abs(clip.sample_rate_hz - PROCESSED_RATE_HZ) > 1e-9:
            raise InputError(
                f"clip {clip.clip_id!r} is not processed at {PROCESSED_RATE_HZ:g} Hz; run prep first")
        if clip.n_samples > n_samples:
            raise InputError(f"clip {clip.clip_id!r} has {clip.n_samples} samples, max {n_samples}")
        padded = np.zeros((clip.channels, n_samples))
        padded[:, :clip.n_samples] = clip.samples
        rows.append(padded.ravel())
    return np.stack(rows)


def embed_video(enc: VideoEncoder, v: VideoClip) -> np.ndarray:
    with ad.no_grad():
        was = enc.training
        enc.eval()
        frames, mask = stack_videos([v])
        out = enc(frames, mask).data[0]
        enc.train(was)
    return out


def embed_eeg(enc: EegEncoderStub, e: EegClip, n_samples: int = 400) -> np.ndarray:
    with ad.no_grad():
        return T.l2_normalize(enc(eeg_matrix([e], n_samples)), axis=-1).data[0]


def similarity_matrix(zv, ze, beta) -> Tensor:
    """``S[i, j] = exp(beta) * <zv_i, ze_j>``."""
    zv, ze, beta = T.as_tensor(zv), T.as_tensor(ze), T.as_tensor(beta)
    if zv.ndim != 2 or ze.ndim != 2 or zv.shape != ze.shape:
        raise InputError(f"embedding batches must both be N x d, got {zv.shape} and {ze.shape}")
    return T.exp(beta) * (zv @ ze.T)


def infonce_loss(S) -> Tensor:
    """Symmetric InfoNCE: mean of row-wise and column-wise cross-entropy on the diagonal."""
    S = T.as_tensor(S)
    n = S.shape[0]
    if S.ndim != 2 or S.shape[1] != n or n < 1:
        raise InputError(f"similarity matrix must be square and non-empty, got {S.shape}")
    diag = (np.arange(n), np.arange(n))
    loss_v = -T.log_softmax(S, axis=1)[diag].mean()
    loss_e = -T.log_softmax(S, axis=0)[diag].mean()
    return 0.5 * (loss_v + loss_e)


def top1_retrieval(S: np.ndarray) -> float:
    """Fraction of rows whose argmax is the diagonal (video -> EEG)."""
    S = np.asarray(S)
    return float(np.mean(S.argmax(axis=1) == np.arange(S.shape[0])))


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_top1: float
    beta: float


class DrivingThinkingAligner(TransformerMixin, BaseEstimator):
    """Stage-1 estimator: ``fit(pairs)`` trains the video branch and the
    log-temperature against the frozen EEG stub; ``transform(videos)``
    returns unit-norm video embeddings."""

    def __init__(self, embed_dim=200, feature_dim=64, token_dim=16, head_hidden=128, patch=4,
                 batch_size=16, epochs=120, lr=2e-5, weight_decay=1e-5, dropout=0.01,
                 beta_init=CLIP_BETA_INIT, eeg_samples=400, eeg_stub_seed=1234,
                 ratios=(0.8, 0.1, 0.1), subject_filter=None, seed=0):
        self.embed_dim = embed_dim
        self.feature_dim = feature_dim
        self.token_dim = token_dim
        self.head_hidden = head_hidden
        self.patch = patch
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.beta_init = beta_init
        self.eeg_samples = eeg_samples
        self.eeg_stub_seed = eeg_stub_seed
        self.ratios = ratios
        self.subject_filter = subject_filter
        self.seed = seed

    # -- construction ------------------------------------------------------
    def _build(self, channels: int, eeg_channels: int, frame_size: int = 16) -> None:
        rng = np.random.default_rng([self.seed, 0x51])
        self.frame_size_ = frame_size
        self._dropout_rng = np.random.default_rng([self.seed, 0xD0])
        self.video_encoder_ = VideoEncoder(
            rng, self.embed_dim, self.feature_dim, self.token_dim, self.head_hidden, self.patch,
            channels, self.dropout, self._dropout_rng, frame_size)
        self.eeg_encoder_ = EegEncoderStub(eeg_channels * self.eeg_samples, self.embed_dim,
                                           self.eeg_stub_seed)
        self.beta_ = Parameter(np.array(float(self.beta_init)), name="beta")

    def trainable_parameters(self) -> list[Parameter]:
        return self.video_encoder_.parameters() + [self.beta_]

    def _select(self, pairs: list[PairedSample]) -> list[PairedSample]:
        if self.subject_filter is None or self.subject_filter == "both":
            return pairs
        if self.subject_filter not in ("expert", "novice"):
            raise ConfigError(f"unknown subject filter {self.subject_filter!r}")
        return [p for p in pairs if p.eeg.subject_class == self.subject_filter]

    # -- sklearn API -------------------------------------------------------
    def fit(self, X: list[PairedSample], y=None, manifest: SplitManifest | None = None):
        pairs = self._select(_check_pairs(X))
        if len(pairs) < 2 * self.batch_size:
            raise InputError(f"need at least {2 * self.batch_size} pairs, got {len(pairs)}")
        by_id = {p.pair_id: p for p in pairs}
        if manifest is None:
            manifest = split(list(by_id), self.ratios, self.seed)
        train_ids = [i for i in manifest.train if i in by_id]
        val_ids = [i for i in manifest.val if i in by_id]
        if len(train_ids) < 2 or not val_ids:
            raise InputError("split leaves too few training or validation pairs")
        self.manifest_ = manifest

        frames, mask = stack_videos([p.video for p in pairs])
        self._build(frames.shape[-1], pairs[0].eeg.channels, frames.shape[2])
        with ad.no_grad():
            ze_all = T.l2_normalize(
                self.eeg_encoder_(eeg_matrix([p.eeg for p in pairs], self.eeg_samples)), axis=-1).data
        index = {pid: k for k, pid in enumerate(by_id)}
        train_idx = np.array([index[i] for i in train_ids])
        val_idx = np.array([index[i] for i in val_ids])

        opt = ad.Adam(self.trainable_parameters(), lr=self.lr, weight_decay=self.weight_decay)
        shuffle_rng = np.random.default_rng([self.seed, 0x5B])
        self.history_: list[EpochLog] = []
        best_key, best_state = None, None
        for epoch in range(1, self.epochs + 1):
            self.video_encoder_.train()
            order = train_idx[shuffle_rng.permutation(len(train_idx))]
            losses = []
            for start in range(0, len(order), self.batch_size):
                batch = order[start:start + self.batch_size]
                if len(batch) < 2:
                    continue
                zv = self.video_encoder_(frames[batch], mask[batch])
                loss = infonce_loss(similarity_matrix(zv, Tensor(ze_all[batch]), self.beta_))
                if not math.isfinite(loss.item()):
                    raise TrainingDivergedError(
                        f"stage-1 loss became {loss.item()} at epoch {epoch}, beta={self.beta_.item():.4g}")
                loss.backward()
                opt.step()
                losses.append(loss.item())
            val_loss, val_top1 = self._evaluate(frames[val_idx], mask[val_idx], ze_all[val_idx])
            row = EpochLog(epoch, float(np.mean(losses)), val_loss, val_top1, self.beta_.item())
            self.history_.append(row)
            log.info("stage1 epoch %d train=%.4f val=%.4f top1=%.3f beta=%.4f", epoch,
                     row.train_loss, row.val_loss, row.val_top1, row.beta)
            key = (val_top1, -val_loss)
            if best_key is None or key > best_key:
                best_key, best_state, self.best_epoch_ = key, self._state(), epoch
        self._restore(best_state)
        self.video_encoder_.eval()
        return self

    def _state(self) -> dict[str, np.ndarray]:
        state = self.video_encoder_.state_dict()
        state["beta"] = self.beta_.data.copy()
        return state

    def _restore(self, state: dict[str, np.ndarray]) -> None:
        state = dict(state)
        self.beta_.data[...] = state.pop("beta")
        self.video_encoder_.load_state_dict(state)

    def _evaluate(self, frames, mask, ze) -> tuple[float, float]:
        self.video_encoder_.eval()
        losses, hits, count = [], 0.0, 0
        with ad.no_grad():
            for start in range(0, len(frames), self.batch_size):
                sl = slice(start, start + self.batch_size)
                zv = self.video_encoder_(frames[sl], mask[sl])
                S = similarity_matrix(zv, Tensor(ze[sl]), self.beta_)
                n = S.shape[0]
                losses.append(infonce_loss(S).item() * n)
                hits += top1_retrieval(S.data) * n
                count += n
        self.video_encoder_.train()
        return float(np.sum(losses) / count), float(hits / count)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "video_encoder_")
        clips = [x.video if isinstance(x, PairedSample) else x for x in X]
        frames, mask = stack_videos(clips)
        self.video_encoder_.eval()
        with ad.no_grad():
            return self.video_encoder_(frames, mask).data

    def embed_eeg(self, clips: list[EegClip]) -> np.ndarray:
        check_is_fitted(self, "eeg_encoder_")
        with ad.no_grad():
            return T.l2_normalize(self.eeg_encoder_(eeg_matrix(clips, self.eeg_samples)), axis=-1).data

    def score(self, X, y=None) -> float:
        """Mean top-1 video->EEG retrieval over consecutive batches of ``batch_size``."""
        pairs = _check_pairs(X)
        frames, mask = stack_videos([p.video for p in pairs])
        ze = self.embed_eeg([p.eeg for p in pairs])
        return self._evaluate(frames, mask, ze)[1]

    # -- persistence -------------------------------------------------------
    def save(self, path) -> None:
        check_is_fitted(self, "video_encoder_")
        tensors, frozen = {}, {}
        for name, p in self.video_encoder_.named_parameters("video_encoder."):
            tensors[name], frozen[name] = p.data, False
        tensors["beta"], frozen["beta"] = self.beta_.data, False
        for name, p in self.eeg_encoder_.named_parameters("eeg_encoder."):
            tensors[name], frozen[name] = p.data, True
        meta = {"kind": "stage1", "params": _jsonable(self.get_params()),
                "best_epoch": self.best_epoch_, "eeg_in_dim": self.eeg_encoder_.in_dim,
                "video_channels": self.video_encoder_.patch_embed.in_dim // (self.patch ** 2),
                "frame_size": self.frame_size_}
        ad.save_archive(path, tensors, frozen, seed=self.seed, metadata=meta)

    @classmethod
    def load(cls, path) -> "DrivingThinkingAligner":
        tensors, manifest = ad.load_archive(path)
        meta = manifest["metadata"]
        if meta.get("kind") != "stage1":
            raise ConfigError(f"{path} is not a stage-1 checkpoint")
        params = meta["params"]
        params["ratios"] = tuple(params["ratios"])
        self = cls(**params)
        self._build(meta["video_channels"], meta["eeg_in_dim"] // self.eeg_samples, meta["frame_size"])
        self.best_epoch_ = meta.get("best_epoch")
        self.video_encoder_.load_state_dict(
            {k[len("video_encoder."):]: v for k, v in tensors.items() if k.startswith("video_encoder.")})
        self.eeg_encoder_.load_state_dict(
            {k[len("eeg_encoder."):]: v for k, v in tensors.items() if k.startswith("eeg_encoder.")})
        self.beta_.data[...] = tensors["beta"]
        self.video_encoder_.eval()
        return self

    def history_rows(self) -> list[dict]:
        return [vars(r).copy() for r in getattr(self, "history_", [])]


def _jsonable(params: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}


def _check_pairs(X) -> list[PairedSample]:
    X = list(X)
    for p in X:
        if not isinstance(p, PairedSample):
            raise InputError(f"expected PairedSample, got {type(p).__name__}")
    return X
