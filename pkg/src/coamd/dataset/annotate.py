"""Caption -> action-phrase extraction, phrase embedding, balanced clustering
and the class table / frequency bands built on top of them."""
from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..diffcore import Rng

# inflected form -> lemma
VERB_LEMMAS = {
    "walk": "walk", "walks": "walk", "walking": "walk", "walked": "walk",
    "jog": "jog", "jogs": "jog", "jogging": "jog", "jogged": "jog",
    "run": "run", "runs": "run", "running": "run", "ran": "run",
    "bend": "bend", "bends": "bend", "bending": "bend", "bent": "bend",
    "pick": "pick", "picks": "pick", "picking": "pick", "picked": "pick",
    "turn": "turn", "turns": "turn", "turning": "turn", "turned": "turn",
    "set": "put", "sets": "put", "setting": "put", "put": "put", "puts": "put", "putting": "put",
    "raise": "raise", "raises": "raise", "raising": "raise", "raised": "raise",
    "lift": "raise", "lifts": "raise", "lifting": "raise", "lifted": "raise",
    "swing": "swing", "swings": "swing", "swinging": "swing", "swung": "swing",
    "spin": "spin", "spins": "spin", "spinning": "spin", "spun": "spin",
    "shuffle": "shuffle", "shuffles": "shuffle", "shuffling": "shuffle", "shuffled": "shuffle",
    "trip": "trip", "trips": "trip", "tripping": "trip", "tripped": "trip",
    "move": "move", "moves": "move", "moving": "move", "moved": "move",
    "crouch": "crouch", "crouches": "crouch", "crouching": "crouch", "crouched": "crouch",
    "hear": "listen", "hears": "listen", "listen": "listen", "listens": "listen", "listening": "listen",
    "play": "play", "plays": "play", "playing": "play", "played": "play",
    "wave": "wave", "waves": "wave", "waving": "wave", "waved": "wave",
    "jump": "jump", "jumps": "jump", "jumping": "jump", "jumped": "jump",
    "squat": "squat", "squats": "squat", "squatting": "squat", "squatted": "squat",
    "sidestep": "sidestep", "sidesteps": "sidestep", "sidestepping": "sidestep", "sidestepped": "sidestep",
    "kick": "kick", "kicks": "kick", "kicking": "kick", "kicked": "kick",
    "sit": "sit", "sits": "sit", "sitting": "sit", "sat": "sit",
    "throw": "throw", "throws": "throw", "throwing": "throw", "threw": "throw",
}

LOCOMOTION_DIRS = {
    "forward": "forward", "forwards": "forward", "ahead": "forward",
    "backward": "backward", "backwards": "backward", "back": "backward",
    "sideways": "sideways", "diagonal": "diagonal", "diagonally": "diagonal",
    "circle": "in circle", "circles": "in circle", "spiral": "in circle", "circular": "in circle",
}
BEND_DIRS = {"left": "left", "right": "right", "down": "down", "over": "over", "forward": "forward"}
MOVABLE = {"it", "object", "something", "box", "thing"}
INSTRUMENTS = {"guitar", "violin", "drums", "piano"}
LIMBS = {"hand": "hand", "hands": "hands", "arm": "hand", "arms": "hands"}
BOUNDARIES = {",", ".", ";", "then", "and", "while"}

_TOKEN_RE = re.compile(r"[a-z]+|[,.;]")


def _modifier(lemma: str, window: list) -> str | None:
    """Phrase for ``lemma`` given the tokens that follow it; None drops it."""
    if lemma in ("walk", "jog", "run"):
        for tok in window:
            if tok in LOCOMOTION_DIRS:
                return f"{lemma} {LOCOMOTION_DIRS[tok]}"
        return lemma
    if lemma == "bend":
        for tok in window:
            if tok in BEND_DIRS:
                return f"bend {BEND_DIRS[tok]}"
        return lemma
    if lemma == "pick":
        return "pick up" if "up" in window else "pick"
    if lemma == "put":
        return "put down" if "down" in window else None
    if lemma == "raise":
        side = next((t for t in window if t in ("left", "right")), None)
        limb = next((LIMBS[t] for t in window if t in LIMBS), None)
        if side and limb:
            return f"raise {side} hand"
        return f"raise {limb}" if limb else lemma
    if lemma == "swing":
        if any(t in ("hand", "hands", "arm", "arms") for t in window):
            return "swing arms"
        return "swing legs" if any(t in ("leg", "legs") for t in window) else lemma
    if lemma == "move":
        return "move object" if any(t in MOVABLE for t in window) else None
    if lemma == "play":
        inst = next((t for t in window if t in INSTRUMENTS), None)
        return f"play {inst}" if inst else lemma
    return lemma


def extract_action_phrases(caption: str) -> list:
    """Ordered, de-duplicated verb phrases found in a caption.

    >>> extract_action_phrases("a person walks backwards quickly")
    ['walk backward']
    """
    tokens = _TOKEN_RE.findall(caption.lower())
    phrases = []
    for i, tok in enumerate(tokens):
        lemma = VERB_LEMMAS.get(tok)
        if lemma is None:
            continue
        window = []
        for nxt in tokens[i + 1:]:
            if nxt in BOUNDARIES or nxt in VERB_LEMMAS:
                break
            window.append(nxt)
        phrase = _modifier(lemma, window)
        if phrase and phrase not in phrases:
            phrases.append(phrase)
    return phrases


def embed_phrase(phrase: str, dim: int = 64) -> np.ndarray:
    """Hashed character-trigram counts, L2-normalized."""
    s = "#" + "#".join(phrase.lower().split()) + "#"
    v = np.zeros(dim)
    for i in range(len(s) - 2):
        v[zlib.crc32(s[i:i + 3].encode()) % dim] += 1
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


# -- balanced k-means --------------------------------------------------
@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective: list = field(default_factory=list)

    @property
    def sizes(self):
        return np.bincount(self.assignments, minlength=len(self.centroids))


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)


def _centroids(X, a, k):
    return np.stack([X[a == c].mean(0) for c in range(k)])


def _sse(X, a, k):
    return float(sum(((X[a == c] - X[a == c].mean(0)) ** 2).sum() for c in range(k)))


def _kmeanspp(X, k, rng: Rng):
    n = len(X)
    idx = [int(rng.integers(n))]
    for _ in range(1, k):
        d = _sq_dists(X, X[idx]).min(1)
        tot = d.sum()
        if tot <= 0:
            rest = [i for i in range(n) if i not in idx]
            idx.append(int(rest[rng.integers(len(rest))]))
        else:
            idx.append(int(rng.choice(n, p=d / tot)))
    return X[idx].copy()


def _greedy_assign(X, C, q, r):
    """Capacity-constrained assignment: most decided points choose first."""
    n, k = len(X), len(C)
    d = _sq_dists(X, C)
    ranked = np.argsort(d, axis=1, kind="stable")
    if k > 1:
        srt = np.take_along_axis(d, ranked[:, :2], 1)
        margin = srt[:, 0] - srt[:, 1]
    else:
        margin = np.zeros(n)
    sizes = np.zeros(k, int)
    big = 0
    a = np.empty(n, int)
    for i in np.argsort(margin, kind="stable"):
        for c in ranked[i]:
            if sizes[c] < q or (sizes[c] == q and big < r):
                if sizes[c] == q:
                    big += 1
                sizes[c] += 1
                a[i] = c
                break
    return a


def _local_search(X, a, k, max_passes=50):
    """Exact-objective single moves and pairwise swaps that keep balance."""
    n = len(X)
    if n > 400:
        return a
    a = a.copy()
    q = n // k
    cur = _sse(X, a, k)
    for _ in range(max_passes):
        improved = False
        for i in range(n):
            for j in range(i + 1, n):
                ca, cb = a[i], a[j]
                if ca == cb:
                    continue
                a[i], a[j] = cb, ca
                new = _sse(X, a, k)
                if new < cur - 1e-12:
                    cur, improved = new, True
                else:
                    a[i], a[j] = ca, cb
        sizes = np.bincount(a, minlength=k)
        if n % k:
            for i in range(n):
                src = a[i]
                if sizes[src] != q + 1:
                    continue
                for dst in np.flatnonzero(sizes == q):
                    a[i] = dst
                    new = _sse(X, a, k)
                    if new < cur - 1e-12:
                        cur, improved = new, True
                        sizes[src] -= 1
                        sizes[dst] += 1
                        break
                    a[i] = src
        if not improved:
            break
    return a


def _single_run(X, k, max_iter, rng):
    n = len(X)
    q, r = divmod(n, k)
    C = _kmeanspp(X, k, rng)
    a = _greedy_assign(X, C, q, r)
    C = _centroids(X, a, k)
    history = [_sse(X, a, k)]
    for _ in range(max_iter):
        cand = _greedy_assign(X, C, q, r)
        # accept only if it lowers the cost under the current centroids
        old_cost = float(((X - C[a]) ** 2).sum())
        new_cost = float(((X - C[cand]) ** 2).sum())
        if new_cost < old_cost - 1e-12:
            a = cand
        a = _local_search(X, a, k)
        C = _centroids(X, a, k)
        obj = _sse(X, a, k)
        stable = obj >= history[-1] - 1e-12
        history.append(obj)
        if stable:
            break
    return a, C, history


def balanced_kmeans(vectors, k: int, max_iter: int = 100, seed: int = 0, n_init: int = 4) -> KMeansResult:
    """Balanced k-means: cluster sizes are floor(n/k) or ceil(n/k).

    k-means++ seeding, then alternating capacity-constrained assignment
    (points ordered by best-minus-second-best distance, each taking its
    nearest non-full centroid) and centroid updates.  Each iteration is
    polished by balance-preserving swaps, so the recorded objective never
    increases.  The best of ``n_init`` seeded restarts is returned.
    """
    X = np.asarray(vectors, np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if k <= 0:
        raise ValueError("balanced_kmeans: k must be >= 1")
    if k > n:
        raise ValueError(f"balanced_kmeans: k={k} exceeds number of points n={n}")
    root = Rng(seed)
    best = None
    for run in range(n_init):
        a, C, hist = _single_run(X, k, max_iter, root.spawn(run))
        if best is None or hist[-1] < best[2][-1] - 1e-12:
            best = (a, C, hist)
    return KMeansResult(best[0], best[1], best[2])


# -- class table -------------------------------------------------------
@dataclass
class ActionClass:
    canonical: str
    members: list
    count: int


@dataclass
class ClassTable:
    classes: list

    def __len__(self):
        return len(self.classes)

    @property
    def phrase_to_class(self) -> dict:
        return {p: i for i, c in enumerate(self.classes) for p in c.members}

    def labels_for(self, caption: str) -> list:
        m = self.phrase_to_class
        return sorted({m[p] for p in extract_action_phrases(caption) if p in m})

    def to_text(self) -> str:
        return "".join(f"{i}\t{c.canonical}\t{c.count}\t{'|'.join(c.members)}\n"
                       for i, c in enumerate(self.classes))

    @classmethod
    def from_text(cls, text: str) -> "ClassTable":
        classes = []
        for i, line in enumerate(text.splitlines()):
            cid, canon, count, members = line.split("\t")
            if int(cid) != i:
                raise ValueError(f"class table ids must be dense; line {i} has id {cid}")
            classes.append(ActionClass(canon, members.split("|"), int(count)))
        return cls(classes)


@dataclass
class FrequencyBands:
    head: set
    medium: set
    tail: set

    def band_of(self, cid: int) -> str:
        return "head" if cid in self.head else "medium" if cid in self.medium else "tail"


def frequency_bands(counts) -> FrequencyBands:
    """Top 10% / next 30% / rest of classes by count, ties by class id."""
    C = len(counts)
    order = sorted(range(C), key=lambda c: (-counts[c], c))
    n_head = max(1, int(round(0.1 * C))) if C else 0
    n_med = min(C - n_head, int(round(0.3 * C)))
    return FrequencyBands(set(order[:n_head]), set(order[n_head:n_head + n_med]), set(order[n_head + n_med:]))


def build_class_table(captions: list, num_classes: int = 32, seed: int = 0) -> tuple:
    """Cluster extracted phrases into classes; returns (ClassTable, FrequencyBands)."""
    if not captions:
        raise ValueError("build_class_table: empty dataset")
    per_caption = [extract_action_phrases(c) for c in captions]
    distinct = sorted({p for ps in per_caption for p in ps})
    if not distinct:
        raise ValueError("build_class_table: no action phrases found in any caption")
    k = min(num_classes, len(distinct))
    vecs = np.stack([embed_phrase(p) for p in distinct])
    km = balanced_kmeans(vecs, k, seed=seed)
    groups = []
    for c in range(k):
        members = [distinct[i] for i in np.flatnonzero(km.assignments == c)]
        idx = np.flatnonzero(km.assignments == c)
        d = ((vecs[idx] - km.centroids[c]) ** 2).sum(1)
        canonical = distinct[idx[int(np.argmin(d))]]
        mset = set(members)
        count = sum(1 for ps in per_caption if mset.intersection(ps))
        groups.append(ActionClass(canonical, members, count))
    groups.sort(key=lambda g: (-g.count, g.canonical))
    table = ClassTable(groups)
    return table, frequency_bands([g.count for g in groups])
