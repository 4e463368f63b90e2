"""Multi-modal action recognizer: motion/text encoders trained contrastively.

Each motion stream runs through its own small transformer over frame
patches; the pooled stream features give per-stream embeddings and, after
concatenation and a projection, the fused embedding.  Captions and class
phrases share one word-level text encoder.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

import numpy as np

from . import configio
from . import diffcore as dc
from .autoencoder import pad_streams
from .batching import length_batches, stack_streams
from .diffcore import Rng, Tensor, checkpoint
from .diffcore.nn import Embedding, LayerNorm, Linear, Module, TransformerBlock
from .motion import HUMANOID9, MultiModalMotion, NormalizationStats, SkeletonTopology

log = logging.getLogger(__name__)

STREAMS = ("joints", "bones", "motion")
PAD, UNK = "<pad>", "<unk>"


@dataclass
class RecognizerConfig:
    dim: int = 512
    width: int = 128
    layers: int = 1
    heads: int = 4
    tau: float = 0.1
    patch: int = 2
    max_frames: int = 256
    max_tokens: int = 24
    num_joints: int = 9
    streams: tuple = STREAMS
    symmetric: bool = False
    batch_size: int = 32
    lr: float = 2e-4
    weight_decay: float = 0.0

    def validate(self):
        if self.tau <= 0:
            raise ValueError(f"RecognizerConfig: tau must be > 0, got {self.tau}")
        if self.dim < 8:
            raise ValueError(f"RecognizerConfig: dim must be >= 8, got {self.dim}")
        bad = [s for s in self.streams if s not in STREAMS]
        if bad or not self.streams:
            raise ValueError(f"RecognizerConfig: streams must be a non-empty subset of {STREAMS}")


# -- text --------------------------------------------------------------
_PUNCT = re.compile(r"[^\w\s]")


def tokenize(text: str) -> list:
    return _PUNCT.sub(" ", text.lower()).split()


class TextVocab:
    """Token <-> id table; id 0 is padding, id 1 the unknown token."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tokens[:2] != [PAD, UNK]:
            raise ValueError("TextVocab: first two tokens must be <pad>, <unk>")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, texts) -> "TextVocab":
        words = sorted({w for t in texts for w in tokenize(t)})
        return cls([PAD, UNK] + words)

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str, max_tokens: int) -> list:
        ids = [self.ids.get(w, 1) for w in tokenize(text)][:max_tokens]
        return ids or [1]

    def batch(self, texts, max_tokens: int):
        seqs = [self.encode(t, max_tokens) for t in texts]
        n = max(len(s) for s in seqs)
        ids = np.zeros((len(seqs), n), np.int64)
        mask = np.zeros((len(seqs), n), bool)
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = s
            mask[i, :len(s)] = True
        return ids, mask

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self.tokens)

    @classmethod
    def from_text(cls, text: str) -> "TextVocab":
        return cls(text.splitlines())


# -- embeddings --------------------------------------------------------
@dataclass
class EmbeddingsBundle:
    """Unit-norm (B, dim) embeddings; streams absent from the config are None."""

    e_f: Tensor
    e_j: Tensor | None = None
    e_b: Tensor | None = None
    e_m: Tensor | None = None

    def streams(self) -> list:
        return [e for e in (self.e_j, self.e_b, self.e_m) if e is not None]


@dataclass
class TextEmbedding:
    c: Tensor
    kind: str = "caption"


class StreamEncoder(Module):
    def __init__(self, cfg: RecognizerConfig, rng: Rng):
        W = cfg.width
        self.inp = Linear(cfg.patch * 3 * cfg.num_joints, W, rng)
        self.pos = Embedding(cfg.max_frames // cfg.patch, W, rng)
        self.blocks = [TransformerBlock(W, cfg.heads, 2 * W, rng) for _ in range(cfg.layers)]
        self.ln = LayerNorm(W)
        self.out = Linear(W, cfg.dim, rng)

    def forward(self, x):
        """x: (B, T, patch*3J) -> pooled (B, W)."""
        h = self.inp(x) + self.pos.weight[: x.shape[1]]
        for b in self.blocks:
            h = b(h)
        return dc.mean(self.ln(h), axis=1)


class TextEncoder(Module):
    def __init__(self, vocab_size: int, cfg: RecognizerConfig, rng: Rng):
        W = cfg.width
        self.tok = Embedding(vocab_size, W, rng, scale=1.0)
        self.pos = Embedding(cfg.max_tokens, W, rng)
        self.blocks = [TransformerBlock(W, cfg.heads, 2 * W, rng) for _ in range(cfg.layers)]
        self.ln = LayerNorm(W)
        self.out = Linear(W, cfg.dim, rng)

    def forward(self, ids, mask):
        h = self.tok(ids) + self.pos.weight[: ids.shape[1]]
        for b in self.blocks:
            h = b(h, mask)
        h = self.ln(h)
        w = (mask / mask.sum(1, keepdims=True)).astype(h.dtype)[..., None]
        return dc.normalize(self.out(dc.sum_(h * w, axis=1)))


class Recognizer(Module):
    def __init__(self, cfg: RecognizerConfig, vocab: TextVocab, stats: NormalizationStats,
                 rng: Rng, topology: SkeletonTopology = HUMANOID9):
        cfg.validate()
        self._cfg, self._vocab, self._stats, self._topo = cfg, vocab, stats, topology
        self.enc = [StreamEncoder(cfg, rng.spawn(i)) for i, _ in enumerate(cfg.streams)]
        self.fuse = Linear(len(cfg.streams) * cfg.width, cfg.dim, rng.spawn(10))
        self.text = TextEncoder(len(vocab), cfg, rng.spawn(11))

    config = property(lambda self: self._cfg)
    vocab = property(lambda self: self._vocab)
    stats = property(lambda self: self._stats)
    topology = property(lambda self: self._topo)

    def embed_motion(self, mm: MultiModalMotion) -> EmbeddingsBundle:
        shapes = {tuple(s.shape) for s in mm.as_tuple()}
        if len(shapes) != 1:
            raise dc.ShapeError(f"embed_motion: stream shapes differ {sorted(shapes)}")
        B, L, J, _ = mm.joints.shape
        cfg = self._cfg
        Lp = -(-L // cfg.patch) * cfg.patch
        if Lp > cfg.max_frames:
            raise dc.ShapeError(f"embed_motion: {L} frames exceeds max_frames={cfg.max_frames}")
        mm = pad_streams(mm, Lp)
        pooled, per = [], {}
        for name, enc in zip(cfg.streams, self.enc):
            x = self._stats.normalize(dc.as_tensor(getattr(mm, name)), name)
            p = enc(x.reshape(B, Lp // cfg.patch, cfg.patch * 3 * J))
            pooled.append(p)
            per[name] = dc.normalize(enc.out(p))
        e_f = dc.normalize(self.fuse(dc.concat(pooled, axis=-1)))
        return EmbeddingsBundle(e_f, per.get("joints"), per.get("bones"), per.get("motion"))

    def embed_text(self, texts, kind: str = "caption") -> TextEmbedding:
        if isinstance(texts, str):
            texts = [texts]
        ids, mask = self._vocab.batch(texts, self._cfg.max_tokens)
        return TextEmbedding(self.text(ids, mask), kind)

    # -- persistence ---------------------------------------------------
    def save(self, path, extra_meta: dict | None = None):
        tensors = {f"param.{k}": v for k, v in self.state_dict().items()}
        tensors.update(self._stats.to_dict())
        meta = {"module": "mar", **configio.to_meta(self._cfg),
                "vocab": " ".join(self._vocab.tokens), **(extra_meta or {})}
        checkpoint.save(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "Recognizer":
        tensors, meta = checkpoint.load(path, expect_module="mar")
        cfg = configio.from_meta(RecognizerConfig, meta)
        vocab = TextVocab(meta["vocab"].split(" "))
        model = cls(cfg, vocab, NormalizationStats.from_dict(tensors), Rng(0))
        model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("param.")})
        return model


# -- losses ------------------------------------------------------------
def info_nce_loss(motion_embeddings, text_embeddings, tau: float, symmetric: bool = False) -> Tensor:
    """Mean over i of -log softmax_k(sim(e_i, c_k)/tau)[i]."""
    if tau <= 0:
        raise ValueError(f"info_nce_loss: tau must be > 0, got {tau}")
    e = _stack(motion_embeddings)
    c = _stack(text_embeddings)
    if e.shape[0] != c.shape[0] or e.shape[0] < 1:
        raise dc.ShapeError(f"info_nce_loss: {e.shape[0]} motion vs {c.shape[0]} text embeddings")
    logits = (e @ c.T) * (1.0 / tau)
    target = np.arange(e.shape[0])
    loss = dc.cross_entropy(logits, target)
    if symmetric:
        loss = (loss + dc.cross_entropy(logits.T, target)) * 0.5
    return loss


def _stack(x):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray):
        return Tensor(x)
    return dc.stack([dc.as_tensor(v) for v in x])


def mar_loss(bundle: EmbeddingsBundle, captions: Tensor, classes: Tensor | None,
             cfg: RecognizerConfig, class_rows=None) -> Tensor:
    """Caption InfoNCE for e_f and each stream embedding, plus e_f vs class text."""
    loss = info_nce_loss(bundle.e_f, captions, cfg.tau, cfg.symmetric)
    for e in bundle.streams():
        loss = loss + info_nce_loss(e, captions, cfg.tau, cfg.symmetric)
    if classes is not None:
        e_f = bundle.e_f if class_rows is None else bundle.e_f[class_rows]
        loss = loss + info_nce_loss(e_f, classes, cfg.tau, cfg.symmetric)
    return loss


# -- training ----------------------------------------------------------
@dataclass
class TrainLog:
    epoch_loss: list = field(default_factory=list)
    steps: int = 0


def train_mar(dataset, class_table, cfg: RecognizerConfig, epochs: int, seed: int,
              topology: SkeletonTopology | None = None, on_epoch=None) -> tuple:
    if class_table is None:
        raise ValueError("train_mar: missing class table")
    samples = dataset.samples if hasattr(dataset, "samples") else list(dataset)
    if not samples:
        raise ValueError("train_mar: empty dataset")
    topology = topology or getattr(dataset, "topology", HUMANOID9)
    canon = [c.canonical for c in class_table.classes]
    vocab = TextVocab.build([s.caption for s in samples] + canon)
    stats = NormalizationStats.fit([s.motion for s in samples], topology)
    stats = NormalizationStats(*({k: v.astype(np.float32).astype(np.float64) for k, v in d.items()}
                                 for d in (stats.mean, stats.std)))
    rng = Rng(seed)
    model = Recognizer(cfg, vocab, stats, rng.spawn(1), topology)
    opt = dc.AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, clip=1.0)
    lengths = [len(s.motion) for s in samples]
    tlog = TrainLog()
    for epoch in range(epochs):
        total, count = 0.0, 0
        for batch in length_batches(lengths, cfg.batch_size, rng.spawn(1000 + epoch)):
            mm = stack_streams([samples[i].motion for i in batch], topology)
            rows = [k for k, i in enumerate(batch) if samples[i].label_ids]
            opt.zero_grad()
            bundle = model.embed_motion(mm)
            caps = model.embed_text([samples[i].caption for i in batch]).c
            cls = None
            if rows:
                cls = model.embed_text([canon[samples[batch[k]].label_ids[0]] for k in rows], "class-label").c
            loss = mar_loss(bundle, caps, cls, cfg, np.array(rows))
            try:
                loss.backward()
                opt.step()
            except dc.NumericError as e:
                raise dc.NumericError(f"train_mar: numeric failure at step {tlog.steps}: {e}") from e
            tlog.steps += 1
            total += loss.item() * len(batch)
            count += len(batch)
        tlog.epoch_loss.append(total / count)
        log.info("mar epoch %d loss %.5f", epoch, tlog.epoch_loss[-1])
        if on_epoch:
            on_epoch(epoch, tlog.epoch_loss[-1])
    return model, tlog


# -- inference ---------------------------------------------------------
def embed_samples(model: Recognizer, motions: list, batch_size: int = 64) -> np.ndarray:
    """Fused embeddings (N, dim) for a list of (L, J, 3) motions, in input order."""
    out = np.zeros((len(motions), model.config.dim))
    with dc.no_grad():
        for batch in length_batches([len(m) for m in motions], batch_size, None):
            mm = stack_streams([motions[i] for i in batch], model.topology)
            out[batch] = model.embed_motion(mm).e_f.data
    return out


def embed_texts(model: Recognizer, texts: list, kind: str = "caption", batch_size: int = 256) -> np.ndarray:
    out = []
    with dc.no_grad():
        for s in range(0, len(texts), batch_size):
            out.append(model.embed_text(texts[s:s + batch_size], kind).c.data)
    return np.concatenate(out) if out else np.zeros((0, model.config.dim))


def classify(motion_embeddings: np.ndarray, class_embeddings: np.ndarray) -> tuple:
    """Cosine scores (B, C) and class ids ranked by descending score."""
    scores = np.atleast_2d(motion_embeddings) @ np.atleast_2d(class_embeddings).T
    order = np.argsort(-scores, axis=1, kind="stable")
    return order, scores


def classify_motion(model: Recognizer, mm: MultiModalMotion, class_table) -> tuple:
    canon = [c.canonical for c in class_table.classes]
    with dc.no_grad():
        e = model.embed_motion(mm).e_f.data
    return classify(e, embed_texts(model, canon, "class-label"))


def recognition_accuracy(ranked: np.ndarray, label_sets: list) -> float:
    """Top-1 counted correct when it belongs to the sample's label set."""
    hits = [int(r[0]) in set(ls) for r, ls in zip(ranked, label_sets)]
    return float(np.mean(hits)) if hits else 0.0


def match_ranks(sim: np.ndarray) -> np.ndarray:
    """Rank of the true (diagonal) match per row; ties resolve in its favour."""
    diag = np.diag(sim)[:, None]
    return 1 + (sim > diag).sum(axis=1)


@dataclass
class RetrievalResult:
    t2m: float
    m2t: float


def retrieve(query_embeddings: np.ndarray, gallery_embeddings: np.ndarray, k: int = 1) -> RetrievalResult:
    """Recall@k for pairs matched by index; queries are motions, gallery texts."""
    q = np.asarray(query_embeddings, np.float64)
    g = np.asarray(gallery_embeddings, np.float64)
    if len(g) == 0 or len(q) == 0:
        raise ValueError("retrieve: empty gallery")
    if len(q) != len(g):
        raise ValueError(f"retrieve: {len(q)} queries vs {len(g)} gallery items")
    if k < 1:
        raise ValueError("retrieve: k must be >= 1")
    sim = q @ g.T
    return RetrievalResult(t2m=float((match_ranks(sim.T) <= k).mean()),
                           m2t=float((match_ranks(sim) <= k).mean()))


def batched_retrieval(motion_emb: np.ndarray, text_emb: np.ndarray, k: int = 1,
                      batch: int = 32) -> RetrievalResult:
    """Mean recall@k over consecutive full batches of ``batch`` pairs."""
    n = len(motion_emb) // batch
    if n == 0:
        raise ValueError(f"batched_retrieval: need at least {batch} pairs")
    rs = [retrieve(motion_emb[i * batch:(i + 1) * batch], text_emb[i * batch:(i + 1) * batch], k)
          for i in range(n)]
    return RetrievalResult(float(np.mean([r.t2m for r in rs])), float(np.mean([r.m2t for r in rs])))
