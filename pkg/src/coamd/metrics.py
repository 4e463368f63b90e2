"""Embedding-space evaluation metrics, reports and plots.

All embedding metrics run in the trained recognizer's shared space, so
absolute values are only comparable within this artifact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Rng

REPORT_HEADER = "# embedding metrics computed with the in-repo recognizer as evaluator; compare directions only"


@dataclass
class MetricReport:
    name: str
    value: float
    ci: float | None = None
    runs: int = 1
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("MetricReport: runs must be >= 1")
        if self.runs < 2:
            self.ci = None

    def line(self) -> str:
        ci = "na" if self.ci is None else f"{self.ci:.6f}"
        return f"metric={self.name} value={self.value:.6f} ci={ci} runs={self.runs}"


def summarize(name: str, values, config: dict | None = None) -> MetricReport:
    """Mean of repeated runs with a 95% half-width 1.96 * std / sqrt(R)."""
    v = np.asarray(values, np.float64)
    if v.size == 0:
        raise ValueError(f"summarize: no values for {name}")
    ci = 1.96 * v.std(ddof=1) / math.sqrt(v.size) if v.size >= 2 else None
    return MetricReport(name, float(v.mean()), ci, int(v.size), dict(config or {}))


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.startswith("metric="):
            continue
        kv = dict(tok.split("=", 1) for tok in line.split())
        ci = None if kv["ci"] == "na" else float(kv["ci"])
        out[kv["metric"]] = MetricReport(kv["metric"], float(kv["value"]), ci, int(kv["runs"]))
    return out


def format_report(reports, header: str = REPORT_HEADER) -> str:
    return header + "\n" + "".join(r.line() + "\n" for r in reports)


# -- Gaussian / FID ----------------------------------------------------
@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def fit(cls, embs) -> "GaussianSummary":
        x = np.asarray(embs, np.float64)
        if x.ndim != 2 or len(x) < 2:
            raise ValueError(f"GaussianSummary: need (n >= 2, d) embeddings, got {x.shape}")
        cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
        if len(x) < x.shape[1] + 1:
            cov = cov + 1e-6 * np.eye(x.shape[1])
        return cls(x.mean(0), (cov + cov.T) / 2)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"fid: dimension mismatch {a.mean.shape} vs {b.mean.shape}")
    s1 = _psd_sqrt(a.cov)
    w = np.linalg.eigvalsh(s1 @ b.cov @ s1)
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    d = a.mean - b.mean
    return float(max(d @ d + np.trace(a.cov) + np.trace(b.cov) - 2 * tr_sqrt, 0.0))


def fid(real_embs, gen_embs) -> float:
    real, gen = np.asarray(real_embs), np.asarray(gen_embs)
    if real.ndim != 2 or gen.ndim != 2 or real.shape[1] != gen.shape[1]:
        raise ValueError(f"fid: dimension mismatch {real.shape} vs {gen.shape}")
    return frechet_distance(GaussianSummary.fit(real), GaussianSummary.fit(gen))


# -- pairwise metrics --------------------------------------------------
def _paired(a, b, name):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{name}: {a.shape} vs {b.shape}")
    return a, b


def _unit(x):
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def r_precision_once(motion_embs, text_embs, rng: Rng, batch_size: int = 32, ks=(1, 2, 3)) -> dict:
    m, t = _paired(motion_embs, text_embs, "r_precision")
    n = len(m) // batch_size
    if n == 0:
        raise ValueError(f"r_precision: need at least {batch_size} pairs, got {len(m)}")
    order = rng.permutation(len(m))[: n * batch_size].reshape(n, batch_size)
    hits = {k: [] for k in ks}
    for idx in order:
        sim = _unit(m[idx]) @ _unit(t[idx]).T
        rank = 1 + (sim > np.diag(sim)[:, None]).sum(1)
        for k in ks:
            hits[k].append((rank <= k).mean())
    return {k: float(np.mean(v)) for k, v in hits.items()}


def r_precision(motion_embs, text_embs, rng: Rng, batch_size: int = 32, ks=(1, 2, 3),
                runs: int = 1) -> dict:
    """Top-k MetricReports keyed by k; each run reshuffles the pairs."""
    per_run = [r_precision_once(motion_embs, text_embs, rng.spawn(r), batch_size, ks) for r in range(runs)]
    return {k: summarize(f"r_precision_top{k}", [p[k] for p in per_run]) for k in ks}


def mm_dist(motion_embs, text_embs) -> float:
    m, t = _paired(motion_embs, text_embs, "mm_dist")
    return float(np.linalg.norm(m - t, axis=1).mean())


def clip_style_score(motion_embs, text_embs) -> float:
    m, t = _paired(motion_embs, text_embs, "clip_style_score")
    return float((_unit(m) * _unit(t)).sum(1).mean())


def m_modality(per_prompt_embeddings) -> float:
    """Mean over prompts of the mean pairwise distance among that prompt's generations."""
    vals = []
    for i, e in enumerate(per_prompt_embeddings):
        e = np.asarray(e, np.float64)
        if len(e) < 2:
            raise ValueError(f"m_modality: prompt {i} has fewer than 2 samples")
        d = np.linalg.norm(e[:, None] - e[None], axis=-1)
        iu = np.triu_indices(len(e), 1)
        vals.append(d[iu].mean())
    if not vals:
        raise ValueError("m_modality: no prompts")
    return float(np.mean(vals))


def recognition_accuracy(predictions, label_sets, bands) -> dict:
    """Top-1 accuracy (%) overall and per frequency band (many / medium / few)."""
    known = bands.head | bands.medium | bands.tail
    groups = {"overall": [], "many": [], "medium": [], "few": []}
    band_sets = {"many": bands.head, "medium": bands.medium, "few": bands.tail}
    for pred, labels in zip(predictions, label_sets):
        labels = set(int(x) for x in labels)
        bad = ({int(pred)} | labels) - known
        if bad:
            raise ValueError(f"recognition_accuracy: unknown class id(s) {sorted(bad)}")
        hit = float(int(pred) in labels)
        groups["overall"].append(hit)
        for name, members in band_sets.items():
            if labels & members:
                groups[name].append(hit)
    return {k: 100.0 * float(np.mean(v)) if v else float("nan") for k, v in groups.items()}


def sign_test(a, b) -> tuple:
    """Paired one-sided sign test of a > b: (wins, losses, p-value); ties dropped."""
    a, b = np.asarray(a), np.asarray(b)
    wins, losses = int((a > b).sum()), int((a < b).sum())
    n = wins + losses
    if n == 0:
        return wins, losses, 1.0
    p = sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0 ** n
    return wins, losses, float(p)


# -- plots -------------------------------------------------------------
def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "coamd"
    return plt


def plot_metric_bars(groups: dict, path):
    """Grouped bars: ``groups`` maps series name -> {metric: value}."""
    plt = _pyplot()
    metrics = sorted({m for vals in groups.values() for m in vals})
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(metrics)), 3))
    width = 0.8 / max(len(groups), 1)
    for i, (series, vals) in enumerate(groups.items()):
        xs = np.arange(len(metrics)) + i * width
        ax.bar(xs, [vals.get(m, np.nan) for m in metrics], width, label=series)
    ax.set_xticks(np.arange(len(metrics)) + width * (len(groups) - 1) / 2)
    ax.set_xticklabels(metrics, rotation=30, ha="right", fontsize=7)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_frame_strip(motion: np.ndarray, topology, path, frames: int = 8, spacing: float = 0.6):
    """Side-view (x, y) stick figures of evenly spaced frames, laid out left to right."""
    plt = _pyplot()
    motion = np.asarray(motion)
    idx = np.linspace(0, len(motion) - 1, min(frames, len(motion))).round().astype(int)
    fig, ax = plt.subplots(figsize=(1.2 * len(idx), 2.4))
    for i, f in enumerate(idx):
        pose = motion[f]
        off = i * spacing - motion[0, 0, 0]
        for j, p in enumerate(topology.parents):
            if j != p:
                ax.plot([pose[j, 0] + off, pose[p, 0] + off], [pose[j, 1], pose[p, 1]], "k-", lw=1)
        ax.plot(pose[:, 0] + off, pose[:, 1], "o", ms=2)
    ax.set_aspect("equal")
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
