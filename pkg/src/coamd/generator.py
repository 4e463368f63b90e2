"""Masked autoregressive transformer with a flow-matching MLP head.

The transformer reads the visible latent tokens (masked ones replaced by a
learned token) plus a prepended text token and returns a context vector per
position.  The head predicts the velocity eps - z0 of the linear path
z_t = (1 - t) z0 + t eps for each masked token; sampling integrates it from
t = 1 to 0 with Euler steps.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import configio
from . import diffcore as dc
from .batching import length_batches, stack_streams
from .diffcore import Rng, Tensor, checkpoint
from .diffcore.nn import Embedding, LayerNorm, Linear, Module, TransformerBlock

log = logging.getLogger(__name__)

EDIT_MODES = ("inpaint", "outpaint", "prefix", "suffix")
TIME_FREQS = 8


@dataclass
class GenConfig:
    latent_dim: int = 512
    cond_dim: int = 512
    layers: int = 6
    width: int = 1024
    heads: int = 8
    head_width: int = 1024
    head_blocks: int = 3
    max_tokens: int = 64
    ode_steps: int = 25
    ar_steps: int = 8
    classifier_free: bool = False
    diffusion_mult: int = 4
    batch_size: int = 32
    lr: float = 2e-4
    weight_decay: float = 0.0

    def validate(self):
        if self.ode_steps < 1 or self.ar_steps < 1:
            raise ValueError(f"GenConfig: ode_steps and ar_steps must be >= 1, got {self.ode_steps}, {self.ar_steps}")
        if self.classifier_free:
            raise ValueError("GenConfig: classifier-free guidance is not supported")
        if self.diffusion_mult < 1:
            raise ValueError("GenConfig: diffusion_mult must be >= 1")


# -- masks -------------------------------------------------------------
def mask_ratio(u: float) -> float:
    """cos(pi u / 2) for u ~ U[0, 1), truncated below at 0.5."""
    return max(0.5, math.cos(math.pi * u / 2))


def sample_training_mask(L: int, rng: Rng) -> np.ndarray:
    """Boolean (L,) mask, True = masked; >= 1 masked and, for L >= 2, >= 1 visible."""
    if L < 1:
        raise ValueError(f"sample_training_mask: L' must be >= 1, got {L}")
    if L == 1:
        return np.ones(1, bool)
    n = int(round(mask_ratio(float(rng.uniform(0.0, 1.0))) * L))
    n = min(max(n, 1), L - 1)
    mask = np.zeros(L, bool)
    mask[rng.permutation(L)[:n]] = True
    return mask


def edit_fixed_mask(L: int, mode: str) -> np.ndarray:
    """Boolean (L,) of context tokens kept fixed for an editing mode."""
    if mode not in EDIT_MODES:
        raise ValueError(f"edit: unknown mode {mode!r}; expected one of {EDIT_MODES}")
    fixed = np.zeros(L, bool)
    half = int(round(L / 2))
    start = (L - half) // 2
    quarter = max(1, int(round(L / 4)))
    if mode == "inpaint":
        fixed[:] = True
        fixed[start:start + half] = False
    elif mode == "outpaint":
        fixed[start:start + half] = True
    elif mode == "prefix":
        fixed[:quarter] = True
    else:
        fixed[L - quarter:] = True
    return fixed


def unmask_schedule(n_gen: int, steps: int) -> list:
    """Number of tokens still masked after each AR step (cosine schedule)."""
    left, out = n_gen, []
    for k in range(steps):
        nxt = 0 if k == steps - 1 else int(math.floor(n_gen * math.cos(math.pi / 2 * (k + 1) / steps)))
        left = min(nxt, max(left - 1, 0))
        out.append(left)
    return out


# -- flow matching -----------------------------------------------------
def diffusion_forward(z0, t, eps):
    """(1 - t) z0 + t eps; ``t`` broadcasts over trailing dims."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("diffusion_forward: t must lie in [0, 1]")
    z0, eps = np.asarray(z0), np.asarray(eps)
    if z0.shape != eps.shape:
        raise dc.ShapeError(f"diffusion_forward: z0 {z0.shape} vs eps {eps.shape}")
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (z0.ndim - t.ndim))
    return ((1 - t) * z0 + t * eps).astype(z0.dtype)


def diffusion_loss(v_pred, eps, z0, mask=None):
    """Mean squared error of v_pred against eps - z0 (masked rows only when ``mask`` given)."""
    v_pred = dc.as_tensor(v_pred)
    eps, z0 = np.asarray(eps), np.asarray(z0)
    if eps.shape != z0.shape:
        raise dc.ShapeError(f"diffusion_loss: eps {eps.shape} vs z0 {z0.shape}")
    target = (eps - z0).astype(v_pred.dtype)
    if mask is not None:
        mask = np.asarray(mask, bool)
        v_pred, target = dc.masked_select(v_pred, mask), target[mask]
    if tuple(v_pred.shape) != target.shape:
        raise dc.ShapeError(f"diffusion_loss: prediction {v_pred.shape} vs target {target.shape}")
    return dc.mse_loss(v_pred, target)


def time_features(t) -> np.ndarray:
    t = np.asarray(t, np.float64).reshape(-1, 1)
    f = 2.0 ** np.arange(TIME_FREQS) * math.pi
    return np.concatenate([np.sin(t * f), np.cos(t * f)], axis=1)


class HeadBlock(Module):
    def __init__(self, width: int, rng: Rng):
        self.ln = LayerNorm(width)
        self.cond = Linear(width, width, rng)
        self.fc1 = Linear(width, width, rng)
        self.fc2 = Linear(width, width, rng)

    def forward(self, x, cond):
        y = self.ln(x) + self.cond(cond)
        return x + self.fc2(dc.gelu(self.fc1(dc.gelu(y))))


class DiffusionHead(Module):
    """MLP velocity field v(z_t, h, t)."""

    def __init__(self, latent_dim: int, ctx_dim: int, width: int, blocks: int, rng: Rng):
        self.z_in = Linear(latent_dim, width, rng)
        self.h_in = Linear(ctx_dim, width, rng)
        self.t_in = Linear(2 * TIME_FREQS, width, rng)
        self.blocks = [HeadBlock(width, rng) for _ in range(blocks)]
        self.ln = LayerNorm(width)
        self.out = Linear(width, latent_dim, rng)

    def forward(self, z_t, h, t):
        z_t = dc.as_tensor(z_t)
        tf = time_features(t).astype(z_t.dtype)
        cond = dc.gelu(self.h_in(h) + self.t_in(Tensor(tf)))
        x = self.z_in(z_t) + cond
        for b in self.blocks:
            x = b(x, cond)
        return self.out(self.ln(x))


class MaskedGenerator(Module):
    def __init__(self, cfg: GenConfig, rng: Rng):
        cfg.validate()
        self._cfg = cfg
        W = cfg.width
        self.z_in = Linear(cfg.latent_dim, W, rng)
        self.mask_token = Tensor(rng.normal((W,)) * 0.02, requires_grad=True)
        self.c_in = Linear(cfg.cond_dim, W, rng)
        self.pos = Embedding(cfg.max_tokens + 1, W, rng)
        self.blocks = [TransformerBlock(W, cfg.heads, 2 * W, rng) for _ in range(cfg.layers)]
        self.ln = LayerNorm(W)
        self.head = DiffusionHead(cfg.latent_dim, W, cfg.head_width, cfg.head_blocks, rng)
        self._latent_scale = 1.0

    config = property(lambda self: self._cfg)

    @property
    def latent_scale(self) -> float:
        return self._latent_scale

    def context(self, z, mask, c) -> Tensor:
        """h (B, L', W) from latents (B, L', D), mask (B, L') and text (B, cond_dim)."""
        z = dc.as_tensor(z)
        mask = np.asarray(mask, bool)
        B, L, D = z.shape
        if D != self._cfg.latent_dim or mask.shape != (B, L):
            raise dc.ShapeError(f"context: latents {z.shape}, mask {mask.shape}")
        if L > self._cfg.max_tokens:
            raise dc.ShapeError(f"context: {L} tokens exceeds max_tokens={self._cfg.max_tokens}")
        c = dc.as_tensor(c)
        if tuple(c.shape) != (B, self._cfg.cond_dim):
            raise dc.ShapeError(f"context: text embedding {c.shape}, expected ({B}, {self._cfg.cond_dim})")
        x = dc.where(mask[..., None], self.mask_token, self.z_in(z))
        x = dc.concat([self.c_in(c).reshape(B, 1, -1), x], axis=1) + self.pos.weight[: L + 1]
        for b in self.blocks:
            x = b(x)
        return self.ln(x)[:, 1:]

    def velocity(self, z_t, h, t):
        return self.head(z_t, h, t)

    # -- persistence ---------------------------------------------------
    def save(self, path, extra_meta: dict | None = None):
        tensors = {f"param.{k}": v for k, v in self.state_dict().items()}
        meta = {"module": "gen", **configio.to_meta(self._cfg),
                "latent_scale": repr(float(self._latent_scale)), **(extra_meta or {})}
        checkpoint.save(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "MaskedGenerator":
        tensors, meta = checkpoint.load(path, expect_module="gen")
        model = cls(configio.from_meta(GenConfig, meta), Rng(0))
        model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("param.")})
        model._latent_scale = float(meta["latent_scale"])
        return model


# -- sampling ----------------------------------------------------------
def euler_sample(velocity, z1, N: int) -> np.ndarray:
    """Integrate dz/dt = v from t = 1 to 0 with N Euler steps, t_i = 1 - i/N."""
    if N < 1:
        raise ValueError(f"ode_sample: N must be >= 1, got {N}")
    z = np.array(z1)
    for i in range(N):
        t = 1.0 - i / N
        z = z - (1.0 / N) * np.asarray(velocity(z, t))
        if not np.isfinite(z).all():
            raise dc.NumericError(f"ode_sample: non-finite state at step {i}")
    return z


def ode_sample(head, h, N: int, rng: Rng, hook=None) -> np.ndarray:
    """Sample z0 for each row of context ``h`` (n, W); ``hook(z, t, v)`` may alter v."""
    h = np.asarray(h)
    z1 = rng.normal((h.shape[0], head.out.weight.shape[1]), dtype=h.dtype)
    ht = Tensor(h)

    def velocity(z, t):
        with dc.no_grad():
            v = head(Tensor(z), ht, np.full(len(z), t)).data
        return v if hook is None else hook(z, t, v)

    return euler_sample(velocity, z1, N)


def generate(model: MaskedGenerator, c, L: int, rng: Rng, guide=None, ar_steps: int | None = None,
             ode_steps: int | None = None, z_ctx=None, fixed=None, trace: list | None = None) -> np.ndarray:
    """Latents (B, L', D) in autoencoder units for text embeddings ``c`` (B, cond_dim).

    ``fixed`` (L',) or (B, L') marks context tokens taken from ``z_ctx`` that
    are never masked or updated.  ``guide`` supplies semantic guidance.
    ``trace`` collects (frozen mask, latents) after every AR step.
    """
    cfg = model.config
    K = ar_steps or cfg.ar_steps
    N = ode_steps or cfg.ode_steps
    c = np.atleast_2d(np.asarray(c, np.float32))
    B = c.shape[0]
    scale = model.latent_scale
    z = np.zeros((B, L, cfg.latent_dim), np.float32)
    frozen = np.zeros((B, L), bool)
    if fixed is not None:
        frozen = np.broadcast_to(np.asarray(fixed, bool), (B, L)).copy()
        z_ctx = np.asarray(z_ctx, np.float32).reshape(B, L, cfg.latent_dim) / scale
        z[frozen] = z_ctx[frozen]
    if frozen.all():
        raise ValueError("generate: every token is fixed; nothing to generate")
    schedules = [unmask_schedule(int((~f).sum()), K) for f in frozen]
    for k in range(K):
        cur = ~frozen
        if not cur.any():
            break
        step_rng = rng.spawn(k)
        with dc.no_grad():
            h = model.context(z, cur, c).data
        hook = guide.velocity_hook(z, cur) if guide is not None and guide.per_ode_step else None
        zp = z.copy()
        zp[cur] = ode_sample(model.head, h[cur], N, step_rng.spawn(0), hook)
        if guide is not None and not guide.per_ode_step:
            zp = guide.step(zp, cur)
        sel_rng = step_rng.spawn(1)
        for b in range(B):
            pos = np.flatnonzero(cur[b])
            n_freeze = len(pos) - schedules[b][k]
            chosen = pos[sel_rng.permutation(len(pos))[:n_freeze]]
            frozen[b, chosen] = True
        z = np.where(frozen[..., None], np.where(cur[..., None], zp, z), zp).astype(np.float32)
        if trace is not None:
            trace.append((frozen.copy(), z.copy()))
    return z * np.float32(scale)


def edit(model: MaskedGenerator, z_ctx, c, mode: str, rng: Rng, guide=None, fixed=None, **kw) -> np.ndarray:
    """Regenerate the non-fixed tokens of ``z_ctx`` (B, L', D); fixed ones are copied bit-exactly."""
    z_ctx = np.asarray(z_ctx, np.float32)
    L = z_ctx.shape[1]
    fixed = edit_fixed_mask(L, mode) if fixed is None else np.asarray(fixed, bool)
    if fixed.all():
        raise ValueError("edit: all tokens fixed; nothing to generate")
    out = generate(model, c, L, rng, guide, z_ctx=z_ctx, fixed=fixed, **kw)
    fx = np.broadcast_to(fixed, z_ctx.shape[:2])
    out[fx] = z_ctx[fx]
    return out


# -- training ----------------------------------------------------------
@dataclass
class TrainLog:
    epoch_loss: list = field(default_factory=list)
    steps: int = 0
    t_min: float = 1.0
    t_max: float = 0.0


def encode_corpus(ae, samples, batch_size: int = 64) -> list:
    """AE latents (L', D) per sample, in input order."""
    out = [None] * len(samples)
    motions = [s.motion for s in samples]
    with dc.no_grad():
        for batch in length_batches([len(m) for m in motions], batch_size, None):
            z = ae.encode(stack_streams([motions[i] for i in batch], ae.topology)).data
            for j, i in enumerate(batch):
                out[i] = z[j]
    return out


def train_generator(dataset, ae, cfg: GenConfig, epochs: int, seed: int, text_embeddings=None,
                    on_epoch=None) -> tuple:
    """Train transformer + head on frozen AE latents.

    ``text_embeddings`` (N, cond_dim) holds the frozen recognizer's caption
    embedding per sample.
    """
    if ae is None:
        raise ValueError("train_generator: missing autoencoder")
    samples = dataset.samples if hasattr(dataset, "samples") else list(dataset)
    if not samples:
        raise ValueError("train_generator: empty dataset")
    if text_embeddings is None or len(text_embeddings) != len(samples):
        raise ValueError("train_generator: need one text embedding per sample")
    cfg = GenConfig(**{**cfg.__dict__, "latent_dim": ae.config.latent_dim,
                       "cond_dim": int(np.shape(text_embeddings)[1])})
    rng = Rng(seed)
    model = MaskedGenerator(cfg, rng.spawn(1))
    latents = encode_corpus(ae, samples)
    scale = float(np.float32(np.concatenate([z.ravel() for z in latents]).std()))
    model._latent_scale = scale
    latents = [(z / scale).astype(np.float32) for z in latents]
    text = np.asarray(text_embeddings, np.float32)
    opt = dc.AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, clip=1.0)
    tlog = TrainLog()
    M = cfg.diffusion_mult
    for epoch in range(epochs):
        total, count = 0.0, 0
        erng = rng.spawn(1000 + epoch)
        for bi, batch in enumerate(length_batches([len(z) for z in latents], cfg.batch_size, erng.spawn(0))):
            brng = erng.spawn(1 + bi)
            z0 = np.stack([latents[i] for i in batch])
            B, L, D = z0.shape
            mask = np.stack([sample_training_mask(L, brng.spawn(j)) for j in range(B)])
            zm = np.repeat(z0[mask], M, axis=0)
            n = len(zm)
            # float32 rounding could otherwise produce t == 1
            t = np.minimum(brng.uniform(0.0, 1.0, (n,)), 1 - 2.0 ** -24).astype(np.float32)
            eps = brng.normal((n, D), dtype=np.float32)
            z_t = diffusion_forward(zm, t, eps)
            opt.zero_grad()
            h = dc.masked_select(model.context(z0, mask, text[batch]), mask)
            v = model.velocity(z_t, dc.repeat(h, M, axis=0), t)
            loss = diffusion_loss(v, eps, zm)
            try:
                loss.backward()
                opt.step()
            except dc.NumericError as e:
                raise dc.NumericError(f"train_generator: numeric failure at step {tlog.steps}: {e}") from e
            tlog.steps += 1
            tlog.t_min, tlog.t_max = min(tlog.t_min, float(t.min())), max(tlog.t_max, float(t.max()))
            total += loss.item() * B
            count += B
        tlog.epoch_loss.append(total / count)
        log.info("gen epoch %d loss %.5f", epoch, tlog.epoch_loss[-1])
        if on_epoch:
            on_epoch(epoch, tlog.epoch_loss[-1])
    return model, tlog
