"""Procedural motion-caption corpus on the 9-joint humanoid.

Each sample concatenates 1-3 primitive segments.  Limb actions start and
end at the rest pose and the root state (position, heading) carries over
between segments, so concatenations are continuous.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..diffcore import Rng
from ..motion import HUMANOID9, SkeletonTopology, read_motion, write_motion
from .annotate import ClassTable, build_class_table

VOCABULARY = (
    "walk forward", "raise left hand", "jump", "walk backward", "wave",
    "squat", "turn", "raise right hand", "sidestep", "walk in circle",
)

SURFACE_FORMS = {
    "walk forward": ("walks forward", "walks ahead", "is walking forward"),
    "walk backward": ("walks backward", "walks backwards", "is walking backwards"),
    "walk in circle": ("walks in a circle", "walks around in a circle"),
    "turn": ("turns around", "turns"),
    "raise left hand": ("raises the left hand", "raises his left arm", "lifts the left hand"),
    "raise right hand": ("raises the right hand", "raises her right arm", "lifts the right hand"),
    "wave": ("waves", "waves the right hand", "waves hello"),
    "jump": ("jumps", "jumps up", "jumps in place"),
    "squat": ("squats down", "squats"),
    "sidestep": ("sidesteps to the right", "sidesteps"),
}
SUBJECTS = ("a person", "someone", "the man", "a woman", "the person")
CONNECTORS = (" then ", ", then ", " and then ", ", after that ")
# stylistic words that are not labels; they do change the realized speed
ADVERBS = {"quickly": 1.5, "slowly": 0.6}

# rest pose in (forward, up, right) body coordinates
REST = np.array([
    [0.0, 0.90, 0.0], [0.0, 1.20, 0.0], [0.0, 1.60, 0.0],
    [0.0, 1.40, -0.20], [0.0, 0.90, -0.25],
    [0.0, 1.40, 0.20], [0.0, 0.90, 0.25],
    [0.0, 0.05, -0.10], [0.0, 0.05, 0.10],
])
PELVIS, SPINE, HEAD, LSH, LHAND, RSH, RHAND, LFOOT, RFOOT = range(9)
UPPER = [PELVIS, SPINE, HEAD, LSH, LHAND, RSH, RHAND]


@dataclass
class GeneratorConfig:
    topology: SkeletonTopology = HUMANOID9
    fps: int = 20
    length_range: tuple = (48, 64)
    length_step: int = 8
    vocabulary: tuple = VOCABULARY
    depth_range: tuple = (1, 3)
    depth_weights: tuple = (0.4, 0.3, 0.3)
    zipf_exponent: float = 1.1
    adverb_prob: float = 0.4
    noise_std: float = 0.003
    num_classes: int = 32

    def validate(self):
        if not self.vocabulary:
            raise ValueError("GeneratorConfig: vocabulary must be non-empty")
        unknown = [v for v in self.vocabulary if v not in SURFACE_FORMS]
        if unknown:
            raise ValueError(f"GeneratorConfig: no kinematic realization for {unknown}")
        if self.zipf_exponent <= 0:
            raise ValueError("GeneratorConfig: zipf_exponent must be > 0")
        lo, hi = self.depth_range
        if not 1 <= lo <= hi:
            raise ValueError(f"GeneratorConfig: bad depth_range {self.depth_range}")
        if len(self.depth_weights) < hi - lo + 1:
            raise ValueError("GeneratorConfig: depth_weights shorter than depth range")
        if self.length_range[0] < 4 * hi or self.length_range[0] > self.length_range[1]:
            raise ValueError(f"GeneratorConfig: bad length_range {self.length_range}")
        if self.topology.num_joints != 9:
            raise ValueError("GeneratorConfig: the procedural kinematics need the 9-joint humanoid")

    def class_probs(self) -> np.ndarray:
        w = 1.0 / np.arange(1, len(self.vocabulary) + 1) ** self.zipf_exponent
        return w / w.sum()


@dataclass
class MotionSample:
    id: str
    motion: np.ndarray
    caption: str
    label_ids: list = field(default_factory=list)
    segments: list = field(default_factory=list)


@dataclass
class Dataset:
    samples: list
    class_table: ClassTable
    bands: object = None
    topology: SkeletonTopology = HUMANOID9

    def __len__(self):
        return len(self.samples)

    def split(self, holdout: float = 0.2):
        """Deterministic train / held-out split: every k-th sample is held out."""
        stride = max(2, int(round(1 / holdout)))
        test = [s for i, s in enumerate(self.samples) if i % stride == stride - 1]
        train = [s for i, s in enumerate(self.samples) if i % stride != stride - 1]
        return (Dataset(train, self.class_table, self.bands, self.topology),
                Dataset(test, self.class_table, self.bands, self.topology))


# -- kinematics --------------------------------------------------------
def _to_world(local: np.ndarray, root: np.ndarray, heading: float) -> np.ndarray:
    f = np.array([math.cos(heading), 0.0, math.sin(heading)])
    r = np.array([-math.sin(heading), 0.0, math.cos(heading)])
    u = np.array([0.0, 1.0, 0.0])
    return root + local[:, :1] * f + local[:, 1:2] * u + local[:, 2:3] * r


def _gait(pose, u, steps, amp):
    s = math.sin(2 * math.pi * steps * u)
    pose[LFOOT, 0] += 0.15 * amp * s
    pose[RFOOT, 0] -= 0.15 * amp * s
    pose[LFOOT, 1] += 0.08 * amp * max(0.0, s)
    pose[RFOOT, 1] += 0.08 * amp * max(0.0, -s)
    pose[LHAND, 0] -= 0.12 * amp * s
    pose[RHAND, 0] += 0.12 * amp * s
    pose[UPPER, 1] += 0.02 * amp * abs(s)


def _segment(kind, n, speed, state, rng: Rng, scale, fps=20):
    """Realize one segment of ``n`` frames; mutates ``state`` (root, heading)."""
    frames = np.empty((n, 9, 3))
    dt = 1.0 / fps
    steps = max(1, round(n * dt * 2 * speed))
    turn_sign = 1.0 if rng.uniform() < 0.5 else -1.0
    for i in range(n):
        u = i / n
        env = math.sin(math.pi * u) ** 2
        pose = REST * scale
        fwd = 0.0
        side = 0.0
        if kind in ("walk forward", "walk backward", "walk in circle"):
            _gait(pose, u, steps, 1.0)
            fwd = (1.0 if kind != "walk backward" else -0.7) * speed * (0.9 + 0.2 * env) * dt
            if kind == "walk in circle":
                state["heading"] += 2 * math.pi / n
        elif kind == "turn":
            _gait(pose, u, 1, 0.4)
            state["heading"] += turn_sign * (math.pi / 2) * (math.sin(math.pi * u) ** 2) * (2 / n)
        elif kind == "sidestep":
            s = math.sin(2 * math.pi * steps * u)
            pose[LFOOT, 2] -= 0.08 * abs(s)
            pose[RFOOT, 2] += 0.08 * abs(s)
            side = 0.6 * speed * (0.9 + 0.2 * env) * dt
        elif kind in ("raise left hand", "raise right hand"):
            hand, sh = (LHAND, LSH) if kind == "raise left hand" else (RHAND, RSH)
            top = pose[sh] + np.array([0.05, 0.5, 0.0]) * scale
            pose[hand] = (1 - env) * pose[hand] + env * top
        elif kind == "wave":
            top = pose[RSH] + np.array([0.1, 0.35, 0.1]) * scale
            pose[RHAND] = (1 - env) * pose[RHAND] + env * top
            pose[RHAND, 2] += 0.15 * env * math.sin(2 * math.pi * 3 * speed * u)
        elif kind == "jump":
            h = 0.35 * 4 * u * (1 - u) * min(1.0, speed)
            crouch = 0.1 * env
            pose[:, 1] += h
            pose[UPPER, 1] -= crouch
            pose[[LHAND, RHAND], 1] += 2 * h
        elif kind == "squat":
            pose[UPPER, 1] -= 0.4 * env * scale
            pose[[LHAND, RHAND], 0] += 0.3 * env * scale
            pose[[LHAND, RHAND], 1] += 0.3 * env * scale
        else:
            raise ValueError(f"unknown segment kind {kind!r}")
        h = state["heading"]
        state["root"] = state["root"] + fwd * np.array([math.cos(h), 0, math.sin(h)]) \
            + side * np.array([-math.sin(h), 0, math.cos(h)])
        frames[i] = _to_world(pose, state["root"], h)
    return frames


def synthesize_sample(idx: int, cfg: GeneratorConfig, rng: Rng) -> tuple:
    """Returns (motion, caption, segment phrases) for one sample."""
    lo, hi = cfg.depth_range
    depth = lo + int(rng.choice(hi - lo + 1, p=np.asarray(cfg.depth_weights[:hi - lo + 1]) /
                                np.sum(cfg.depth_weights[:hi - lo + 1])))
    kinds = [cfg.vocabulary[int(k)] for k in rng.choice(len(cfg.vocabulary), size=depth, p=cfg.class_probs())]
    lengths = np.arange(cfg.length_range[0], cfg.length_range[1] + 1, cfg.length_step)
    L = int(lengths[rng.integers(len(lengths))])
    cuts = [L * i // depth for i in range(depth + 1)]
    scale = 1.0 + 0.05 * (rng.uniform() * 2 - 1)
    state = {"root": np.zeros(3), "heading": 0.0}
    parts, words = [], []
    for s, kind in enumerate(kinds):
        adverb = None
        if rng.uniform() < cfg.adverb_prob:
            adverb = "quickly" if rng.uniform() < 0.5 else "slowly"
        speed = ADVERBS.get(adverb, 1.0) * (0.9 + 0.2 * rng.uniform())
        parts.append(_segment(kind, cuts[s + 1] - cuts[s], speed, state, rng, scale, cfg.fps))
        forms = SURFACE_FORMS[kind]
        w = forms[int(rng.integers(len(forms)))]
        words.append(f"{w} {adverb}" if adverb else w)
    motion = np.concatenate(parts)
    motion = motion + cfg.noise_std * rng.normal(motion.shape, np.float64)
    subject = SUBJECTS[int(rng.integers(len(SUBJECTS)))]
    caption = f"{subject} {words[0]}"
    for w in words[1:]:
        caption += CONNECTORS[int(rng.integers(len(CONNECTORS)))] + w
    return motion, caption, kinds


def generate_synthetic(cfg: GeneratorConfig, n: int, seed: int) -> Dataset:
    """Generate ``n`` samples, then annotate them through the class-table pipeline."""
    cfg.validate()
    if n < 1:
        raise ValueError("generate_synthetic: n must be >= 1")
    root = Rng(seed)
    raw = [synthesize_sample(i, cfg, root.spawn(i)) for i in range(n)]
    table, bands = build_class_table([c for _, c, _ in raw], cfg.num_classes, seed=seed)
    p2c = table.phrase_to_class
    samples = []
    for i, (m, cap, kinds) in enumerate(raw):
        labels = sorted({p2c[k] for k in kinds})
        samples.append(MotionSample(f"s{i:05d}", m, cap, labels, kinds))
    return Dataset(samples, table, bands, cfg.topology)


# -- on-disk layout ----------------------------------------------------
def write_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "motions").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in ds.samples:
        rel = f"motions/{s.id}.txt"
        write_motion(out / rel, s.motion)
        if "\t" in s.caption or "\n" in s.caption:
            raise ValueError(f"caption of {s.id} contains a tab or newline")
        lines.append(f"{s.id}\t{rel}\t{s.caption}\t{','.join(map(str, s.label_ids))}\n")
    (out / "manifest.tsv").write_text("".join(lines), encoding="utf-8", newline="\n")
    (out / "classes.tsv").write_text(ds.class_table.to_text(), encoding="utf-8", newline="\n")
    return out


def read_dataset(data_dir) -> Dataset:
    from .annotate import frequency_bands

    d = Path(data_dir)
    man = d / "manifest.tsv"
    if not man.exists():
        raise FileNotFoundError(f"missing manifest: {man}")
    table = ClassTable.from_text((d / "classes.tsv").read_text(encoding="utf-8"))
    samples = []
    for line in man.read_text(encoding="utf-8").splitlines():
        sid, rel, cap, labels = line.split("\t")
        ids = [int(x) for x in labels.split(",") if x]
        bad = [i for i in ids if i >= len(table)]
        if bad:
            raise ValueError(f"{sid}: label ids {bad} not in class table")
        samples.append(MotionSample(sid, read_motion(d / rel), cap, ids))
    return Dataset(samples, table, frequency_bands([c.count for c in table.classes]))
