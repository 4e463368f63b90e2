"""Recognizer-driven semantic guidance for latent sampling.

The alignment score is a weighted sum of cosines between the recognizer's
fused / per-stream motion embeddings of the decoded motion and the text
embedding.  Its latent gradient steers generation, either once per
autoregressive step on the completed latents or inside every ODE step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .motion import SkeletonTopology, derive_streams

PLACEMENTS = ("per-ar-step", "per-ode-step")
KEYS = ("f", "j", "b", "m")


@dataclass
class GuidanceConfig:
    gamma: float = 1.0
    weights: tuple = (0.25, 0.25, 0.25, 0.25)
    eps: float = 1e-8
    placement: str = "per-ar-step"

    def validate(self):
        if self.gamma < 0:
            raise ValueError(f"GuidanceConfig: gamma must be >= 0, got {self.gamma}")
        if self.eps <= 0:
            raise ValueError(f"GuidanceConfig: eps must be > 0, got {self.eps}")
        if len(self.weights) != 4 or min(self.weights) < 0:
            raise ValueError(f"GuidanceConfig: need four non-negative weights, got {self.weights}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"GuidanceConfig: placement must be one of {PLACEMENTS}")


@dataclass
class AlignmentScore:
    """Per-sample total (B,) and cosine terms keyed f/j/b/m."""

    total: Tensor
    terms: dict


def weighted_score(cosines: dict, weights) -> Tensor:
    """S = sum_k w_k cos_k over the keys present in ``cosines``."""
    total = None
    for key, w in zip(KEYS, weights):
        if key not in cosines:
            continue
        term = dc.as_tensor(cosines[key]) * float(w)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("weighted_score: no cosine terms")
    return total


def alignment_score(xhat, c, topology: SkeletonTopology, recognizer, cfg: GuidanceConfig) -> AlignmentScore:
    """Score of absolute joints ``xhat`` (B, L, J, 3) against unit text embeddings ``c`` (B, dim)."""
    xhat = dc.as_tensor(xhat)
    if xhat.ndim != 4 or xhat.shape[-2] != topology.num_joints:
        raise dc.ShapeError(f"alignment_score: motion {xhat.shape} vs {topology.num_joints}-joint skeleton")
    c = np.atleast_2d(c.data if isinstance(c, Tensor) else np.asarray(c)).astype(xhat.dtype)
    if c.shape[0] != xhat.shape[0]:
        raise dc.ShapeError(f"alignment_score: {xhat.shape[0]} motions vs {c.shape[0]} texts")
    bundle = recognizer.embed_motion(derive_streams(xhat, topology))
    terms = {}
    for key, e in zip(KEYS, (bundle.e_f, bundle.e_j, bundle.e_b, bundle.e_m)):
        if e is not None:
            terms[key] = dc.sum_(e * c, axis=-1)
    return AlignmentScore(weighted_score(terms, cfg.weights), terms)


def normalize_gradient(g: np.ndarray, eps: float) -> np.ndarray:
    """g / (||g||_2 + eps) with the norm taken over each sample's whole latent grid."""
    norms = np.sqrt((g.astype(np.float64) ** 2).reshape(len(g), -1).sum(1))
    return (g / (norms + eps).reshape((-1,) + (1,) * (g.ndim - 1))).astype(g.dtype)


def guidance_gradient(z, c, decode, recognizer, topology: SkeletonTopology, cfg: GuidanceConfig) -> tuple:
    """Return (g_hat, g, S) for latents ``z`` (B, L', D).

    ``decode`` maps a latent Tensor to absolute joints.  One reverse pass
    through decoder and recognizer; samples are independent, so the summed
    score yields per-sample gradients.
    """
    zt = Tensor(np.array(z), requires_grad=True)
    score = alignment_score(decode(zt), c, topology, recognizer, cfg)
    try:
        (g,) = dc.grad(dc.sum_(score.total), [zt])
    except dc.NumericError as e:
        raise dc.NumericError(f"guidance_gradient: non-finite gradient ({e})") from e
    if not np.isfinite(g).all():
        raise dc.NumericError("guidance_gradient: non-finite gradient")
    return normalize_gradient(g, cfg.eps), g, score.total.data


def apply_guidance(z, g_hat, gamma: float, mask) -> np.ndarray:
    """z + gamma * g_hat on masked tokens; other entries are returned untouched."""
    z = np.asarray(z)
    g_hat = np.asarray(g_hat)
    mask = np.asarray(mask, bool)
    if z.shape != g_hat.shape or mask.shape != z.shape[:mask.ndim]:
        raise dc.ShapeError(f"apply_guidance: z {z.shape}, g {g_hat.shape}, mask {mask.shape}")
    m = mask.reshape(mask.shape + (1,) * (z.ndim - mask.ndim))
    return np.where(m, z + gamma * g_hat, z).astype(z.dtype)


def guided_velocity(v, g_raw, gamma: float) -> np.ndarray:
    v, g_raw = np.asarray(v), np.asarray(g_raw)
    if v.shape != g_raw.shape:
        raise dc.ShapeError(f"guided_velocity: v {v.shape} vs g {g_raw.shape}")
    return (v + gamma * g_raw).astype(v.dtype)


class Guide:
    """Binds decoder, recognizer and prompts so the sampler can request updates.

    ``decode`` maps generator-space latents (Tensor) to absolute joints.
    """

    def __init__(self, decode, recognizer, topology: SkeletonTopology, c, cfg: GuidanceConfig):
        cfg.validate()
        self.decode, self.recognizer, self.topology = decode, recognizer, topology
        self.c = np.atleast_2d(np.asarray(c))
        self.cfg = cfg
        self.calls = 0

    @property
    def per_ode_step(self) -> bool:
        return self.cfg.placement == "per-ode-step"

    def score(self, z) -> np.ndarray:
        with dc.no_grad():
            s = alignment_score(self.decode(Tensor(np.asarray(z))), self.c, self.topology, self.recognizer, self.cfg)
        return s.total.data

    def step(self, z, mask) -> np.ndarray:
        """Post-hoc latent update on the completed sequence."""
        if self.cfg.gamma == 0:
            return np.asarray(z)
        g_hat, _, _ = guidance_gradient(z, self.c, self.decode, self.recognizer, self.topology, self.cfg)
        self.calls += 1
        return apply_guidance(z, g_hat, self.cfg.gamma, mask)

    def velocity_hook(self, z_seq, mask):
        """Hook for the ODE sampler: guided field at the masked tokens.

        The clean estimate z0 = z_t - t v is placed into ``z_seq``; the
        printed field v + gamma * grad S would descend S under the t: 1 -> 0
        Euler update, so the gradient enters with the sign that ascends.
        """
        mask = np.asarray(mask, bool)

        def hook(zm, t, v):
            full = np.array(z_seq)
            full[mask] = zm - t * v
            _, g, _ = guidance_gradient(full, self.c, self.decode, self.recognizer, self.topology, self.cfg)
            self.calls += 1
            return guided_velocity(v, -g[mask], self.cfg.gamma)

        return hook
