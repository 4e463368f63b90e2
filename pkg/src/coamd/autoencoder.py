"""Multi-stream motion autoencoder.

Three per-stream 1-D conv projections are summed (early fusion) and fed to
a shared strided residual encoder that downsamples time by 4.  The decoder
mirrors it with nearest-neighbour upsampling and returns absolute joints.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import configio
from . import diffcore as dc
from .diffcore import Rng, Tensor, checkpoint
from .diffcore.nn import Conv1d, Module
from .batching import length_batches, stack_streams
from .motion import HUMANOID9, MultiModalMotion, NormalizationStats, SkeletonTopology, derive_streams

log = logging.getLogger(__name__)

DOWNSAMPLE = 4
STREAMS = ("joints", "bones", "motion")


@dataclass
class AEConfig:
    latent_dim: int = 512
    width: int = 256
    num_joints: int = 9
    downsample: int = DOWNSAMPLE
    batch_size: int = 32
    lr: float = 2e-4
    weight_decay: float = 0.0

    def validate(self):
        if self.latent_dim < 8:
            raise ValueError(f"AEConfig: latent_dim must be >= 8, got {self.latent_dim}")
        if self.downsample != DOWNSAMPLE:
            raise ValueError("AEConfig: temporal downsample factor is fixed at 4")


class ResBlock(Module):
    def __init__(self, width: int, rng: Rng):
        self.c1 = Conv1d(width, width, 3, rng, padding=1)
        self.c2 = Conv1d(width, width, 3, rng, padding=1)

    def forward(self, x):
        return x + self.c2(dc.gelu(self.c1(dc.gelu(x))))


def latent_length(L: int) -> int:
    return -(-L // DOWNSAMPLE)


def pad_streams(mm: MultiModalMotion, L_to: int) -> MultiModalMotion:
    """Pad (B, L, J, 3) streams to ``L_to`` frames as if the last joint frame
    were repeated: joints/bones repeat, motion pads with zero displacement."""
    L = mm.joints.shape[-3]
    if L_to == L:
        return mm
    extra = L_to - L

    def rep(x):
        last = x[..., -1:, :, :]
        if isinstance(x, Tensor):
            return dc.concat([x] + [last] * extra, axis=-3)
        return np.concatenate([x, np.repeat(last, extra, axis=-3)], axis=-3)

    m = mm.motion
    zeros = np.zeros(m.shape[:-3] + (extra,) + m.shape[-2:], m.dtype)
    motion = dc.concat([m, Tensor(zeros)], axis=-3) if isinstance(m, Tensor) else np.concatenate([m, zeros], -3)
    return MultiModalMotion(rep(mm.joints), rep(mm.bones), motion)


class MotionAutoencoder(Module):
    def __init__(self, cfg: AEConfig, stats: NormalizationStats, rng: Rng,
                 topology: SkeletonTopology = HUMANOID9):
        cfg.validate()
        self._cfg = cfg
        self._stats = stats
        self._topo = topology
        C, W, D = 3 * cfg.num_joints, cfg.width, cfg.latent_dim
        self.proj = [Conv1d(C, W, 3, rng, padding=1) for _ in STREAMS]
        self.enc = [ResBlock(W, rng), Conv1d(W, W, 4, rng, stride=2, padding=1),
                    ResBlock(W, rng), Conv1d(W, W, 4, rng, stride=2, padding=1),
                    ResBlock(W, rng), ResBlock(W, rng)]
        self.enc_out = Conv1d(W, D, 3, rng, padding=1)
        self.dec_in = Conv1d(D, W, 1, rng)
        self.dec = [ResBlock(W, rng), ResBlock(W, rng)]
        self.dec_out = Conv1d(W, C, 3, rng, padding=1)

    @property
    def config(self) -> AEConfig:
        return self._cfg

    @property
    def stats(self) -> NormalizationStats:
        return self._stats

    @property
    def topology(self) -> SkeletonTopology:
        return self._topo

    def encode(self, mm: MultiModalMotion) -> Tensor:
        """Streams (B, L, J, 3) in meters -> latent tokens (B, ceil(L/4), D)."""
        shapes = {tuple(s.shape) for s in mm.as_tuple()}
        if len(shapes) != 1:
            raise dc.ShapeError(f"encode: stream shapes differ {sorted(shapes)}")
        B, L, J, _ = mm.joints.shape
        if J != self._cfg.num_joints:
            raise dc.ShapeError(f"encode: expected {self._cfg.num_joints} joints, got {J}")
        mm = pad_streams(mm, latent_length(L) * DOWNSAMPLE)
        Lp = latent_length(L) * DOWNSAMPLE
        h = None
        for name, proj in zip(STREAMS, self.proj):
            x = dc.as_tensor(getattr(mm, name))
            x = self._stats.normalize(x, name).reshape(B, Lp, 3 * J)
            p = proj(x)
            h = p if h is None else h + p
        for layer in self.enc:
            h = layer(h)
        return self.enc_out(dc.gelu(h))

    def decode(self, z, length: int | None = None) -> Tensor:
        """Latent tokens (B, L', D) -> absolute joints (B, 4L' or length, J, 3)."""
        z = dc.as_tensor(z)
        if z.ndim != 3 or z.shape[-1] != self._cfg.latent_dim:
            raise dc.ShapeError(f"decode: expected (B, L', {self._cfg.latent_dim}) tokens, got {z.shape}")
        B, Lq, _ = z.shape
        h = self.dec_in(z)
        h = dc.repeat(h, 2, axis=1)
        h = self.dec[0](h)
        h = dc.repeat(h, 2, axis=1)
        h = self.dec[1](h)
        out = self.dec_out(dc.gelu(h))
        J = self._cfg.num_joints
        out = out.reshape(B, Lq * DOWNSAMPLE, J, 3)
        if length is not None:
            if length > Lq * DOWNSAMPLE:
                raise dc.ShapeError(f"decode: requested {length} frames from {Lq} tokens")
            out = out[:, :length]
        return self._stats.denormalize(out, "joints")

    def forward(self, mm):
        return self.decode(self.encode(mm), mm.joints.shape[-3])

    # -- persistence ---------------------------------------------------
    def save(self, path, extra_meta: dict | None = None):
        tensors = {f"param.{k}": v for k, v in self.state_dict().items()}
        tensors.update(self._stats.to_dict())
        meta = {"module": "ae", **configio.to_meta(self._cfg), **(extra_meta or {})}
        checkpoint.save(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "MotionAutoencoder":
        tensors, meta = checkpoint.load(path, expect_module="ae")
        cfg = configio.from_meta(AEConfig, meta)
        stats = NormalizationStats.from_dict(tensors)
        model = cls(cfg, stats, Rng(0))
        model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("param.")})
        return model


def ae_loss(x: MultiModalMotion, xhat_j, topology: SkeletonTopology,
            stats: NormalizationStats | None = None):
    """Sum over joint/bone/motion streams of the mean absolute error.

    Bone and motion streams of the reconstruction are re-derived from
    ``xhat_j``.  With ``stats`` each stream is compared in its normalized
    units.
    """
    xhat_j = dc.as_tensor(xhat_j)
    if tuple(xhat_j.shape) != tuple(x.joints.shape):
        raise dc.ShapeError(f"ae_loss: reconstruction {xhat_j.shape} vs target {x.joints.shape}")
    rec = derive_streams(xhat_j, topology)
    total = None
    for name in STREAMS:
        a, b = getattr(rec, name), getattr(x, name)
        b = b.data if isinstance(b, Tensor) else np.asarray(b, a.dtype)
        if stats is not None:
            a, b = stats.normalize(a, name), stats.normalize(b, name)
        term = dc.l1_loss(a, b)
        total = term if total is None else total + term
    return total


def _quantize_stats(stats: NormalizationStats) -> NormalizationStats:
    """Round stats to float32 so a reloaded checkpoint reproduces them exactly."""
    f = lambda d: {k: v.astype(np.float32).astype(np.float64) for k, v in d.items()}
    return NormalizationStats(f(stats.mean), f(stats.std))


@dataclass
class TrainLog:
    epoch_loss: list = field(default_factory=list)
    steps: int = 0


def train_ae(dataset, cfg: AEConfig, epochs: int, seed: int,
             topology: SkeletonTopology | None = None, on_epoch=None) -> tuple:
    """Returns (model, TrainLog).  Inputs are normalized; the loss is in meters."""
    samples = dataset.samples if hasattr(dataset, "samples") else list(dataset)
    if not samples:
        raise ValueError("train_ae: empty dataset")
    topology = topology or getattr(dataset, "topology", HUMANOID9)
    rng = Rng(seed)
    motions = [s.motion for s in samples]
    stats = _quantize_stats(NormalizationStats.fit(motions, topology))
    model = MotionAutoencoder(cfg, stats, rng.spawn(1), topology)
    opt = dc.AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, clip=1.0)
    lengths = [len(m) for m in motions]
    log_ = TrainLog()
    for epoch in range(epochs):
        total, count = 0.0, 0
        for batch in length_batches(lengths, cfg.batch_size, rng.spawn(1000 + epoch)):
            mm = stack_streams([motions[i] for i in batch], topology)
            opt.zero_grad()
            loss = ae_loss(mm, model(mm), topology)
            try:
                loss.backward()
                opt.step()
            except dc.NumericError as e:
                raise dc.NumericError(f"train_ae: numeric failure at step {log_.steps}: {e}") from e
            log_.steps += 1
            total += loss.item() * len(batch)
            count += len(batch)
        log_.epoch_loss.append(total / count)
        log.info("ae epoch %d loss %.5f", epoch, log_.epoch_loss[-1])
        if on_epoch:
            on_epoch(epoch, log_.epoch_loss[-1])
    return model, log_


def reconstruction_l1(model: MotionAutoencoder, samples, batch_size: int = 64) -> float:
    """Mean absolute joint error in meters over ``samples``."""
    motions = [s.motion for s in samples]
    lengths = [len(m) for m in motions]
    err, n = 0.0, 0
    with dc.no_grad():
        for batch in length_batches(lengths, batch_size, None):
            mm = stack_streams([motions[i] for i in batch], model.topology)
            rec = model(mm).data
            err += float(np.abs(rec - mm.joints).sum())
            n += rec.size
    return err / n
