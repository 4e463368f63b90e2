"""Skeleton topology, absolute-coordinate motions and their joint/bone/motion streams."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass(frozen=True)
class SkeletonTopology:
    parents: tuple
    names: tuple = ()

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    def children(self, j: int) -> list:
        return [i for i, p in enumerate(self.parents) if p == j and i != j]


HUMANOID9 = SkeletonTopology(
    parents=(0, 0, 1, 1, 3, 1, 5, 0, 0),
    names=("pelvis", "spine", "head", "l_shoulder", "l_hand", "r_shoulder", "r_hand", "l_foot", "r_foot"),
)


@dataclass
class TopologyReport:
    ok: bool
    problems: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


def validate_topology(topo: SkeletonTopology) -> TopologyReport:
    """Check for a single self-parented root and an acyclic parent tree.

    Never raises; problems are returned as ``(joint, message)`` pairs.
    """
    problems = []
    J = len(topo.parents)
    if J == 0:
        return TopologyReport(False, [(None, "empty skeleton")])
    for j, p in enumerate(topo.parents):
        if not (isinstance(p, (int, np.integer)) and 0 <= p < J):
            problems.append((j, f"joint {j}: parent index {p} out of range"))
    if problems:
        return TopologyReport(False, problems)
    roots = [j for j, p in enumerate(topo.parents) if p == j]
    if not roots:
        problems.append((None, "no root (no self-parented joint)"))
    elif len(roots) > 1:
        problems.append((roots[1], f"multiple roots: joints {roots}"))
    for j in range(J):
        seen = {j}
        cur = j
        while topo.parents[cur] != cur:
            cur = topo.parents[cur]
            if cur in seen:
                problems.append((j, f"joint {j}: cycle through parent chain"))
                break
            seen.add(cur)
    return TopologyReport(not problems, problems)


@dataclass
class MultiModalMotion:
    joints: object
    bones: object
    motion: object

    def as_tuple(self):
        return self.joints, self.bones, self.motion


def _concat(parts, axis, like):
    if isinstance(like, Tensor):
        return dc.concat(parts, axis=axis)
    return np.concatenate(parts, axis=axis)


def derive_streams(x, topo: SkeletonTopology) -> MultiModalMotion:
    """Split absolute joints (..., L, J, 3) into joint, bone and motion streams.

    Works on NumPy arrays and on differentiable Tensors.  The root bone and
    the first-frame displacement are zero.
    """
    if x.shape[-2] != topo.num_joints or x.shape[-1] != 3:
        raise ValueError(f"derive_streams: motion has shape {x.shape}, skeleton has {topo.num_joints} joints")
    parents = np.asarray(topo.parents)
    bones = x - x[..., parents, :]
    first = x[..., :1, :, :]
    motion = _concat([first - first, x[..., 1:, :, :] - x[..., :-1, :, :]], -3, x)
    return MultiModalMotion(x, bones, motion)


@dataclass
class NormalizationStats:
    """Per-channel (3J) mean/std for each stream."""

    mean: dict
    std: dict

    STREAMS = ("joints", "bones", "motion")

    @classmethod
    def fit(cls, motions: list, topo: SkeletonTopology, floor: float = 1e-6) -> "NormalizationStats":
        mean, std = {}, {}
        mms = [derive_streams(np.asarray(m, np.float64), topo) for m in motions]
        for s in cls.STREAMS:
            flat = np.concatenate([getattr(mm, s).reshape(-1, 3 * topo.num_joints) for mm in mms])
            mean[s] = flat.mean(0)
            std[s] = np.maximum(flat.std(0), floor)
        return cls(mean, std)

    @classmethod
    def identity(cls, num_joints: int) -> "NormalizationStats":
        z, o = np.zeros(3 * num_joints), np.ones(3 * num_joints)
        return cls({s: z for s in cls.STREAMS}, {s: o for s in cls.STREAMS})

    def _params(self, stream, x):
        m, s = self.mean[stream], self.std[stream]
        C = x.shape[-2] * x.shape[-1]
        if m.shape != (C,):
            raise ValueError(f"normalization stats have {m.shape[0]} channels, motion has {C}")
        dtype = x.dtype
        shape = m.shape[0] // 3, 3
        return m.reshape(shape).astype(dtype), s.reshape(shape).astype(dtype)

    def normalize(self, x, stream: str = "joints"):
        m, s = self._params(stream, x)
        return (x - m) * (1.0 / s) if isinstance(x, Tensor) else (x - m) / s

    def denormalize(self, x, stream: str = "joints"):
        m, s = self._params(stream, x)
        return x * s + m

    def to_dict(self) -> dict:
        out = {}
        for s in self.STREAMS:
            out[f"stats.{s}.mean"] = self.mean[s]
            out[f"stats.{s}.std"] = self.std[s]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls({s: np.asarray(d[f"stats.{s}.mean"], np.float64) for s in cls.STREAMS},
                   {s: np.asarray(d[f"stats.{s}.std"], np.float64) for s in cls.STREAMS})


def normalize(x, stats: NormalizationStats, stream: str = "joints"):
    return stats.normalize(x, stream)


def denormalize(x, stats: NormalizationStats, stream: str = "joints"):
    return stats.denormalize(x, stream)


# -- COAMD-MOTION text files ------------------------------------------
def format_motion(x: np.ndarray) -> str:
    x = np.asarray(x, np.float64)
    L, J, _ = x.shape
    lines = [f"COAMD-MOTION v1 J={J} L={L}"]
    for frame in x.reshape(L, 3 * J):
        lines.append(" ".join(repr(float(v)) for v in frame))
    return "\n".join(lines) + "\n"


def parse_motion(text: str) -> np.ndarray:
    lines = text.splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 4 or head[:2] != ["COAMD-MOTION", "v1"]:
        raise ValueError("not a COAMD-MOTION v1 file")
    J = int(head[2].removeprefix("J="))
    L = int(head[3].removeprefix("L="))
    rows = [list(map(float, ln.split())) for ln in lines[1:1 + L]]
    if len(rows) != L or any(len(r) != 3 * J for r in rows):
        raise ValueError(f"motion body does not match header J={J} L={L}")
    return np.asarray(rows, np.float64).reshape(L, J, 3)


def write_motion(path, x):
    Path(path).write_text(format_motion(x), encoding="utf-8", newline="\n")


def read_motion(path) -> np.ndarray:
    return parse_motion(Path(path).read_text(encoding="utf-8"))
