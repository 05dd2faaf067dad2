"""Modality quantizers: image patches, text, boxes and category labels to tokens and back.

The image quantizer is a k-means codebook over flattened ``P x P`` RGB patches;
encoding is a nearest-entry search in L2. Text uses a character-level BPE over a
declared alphabet. Box coordinates map to one of 1001 bin tokens.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .vocab import B_ED, B_ST, BIN, C_ED, C_ST, IMAGE, TEXT, Vocabulary


class QuantizerError(ValueError):
    pass


class ParseError(ValueError):
    """Malformed token frame; ``position`` indexes the offending token."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at token {position})")
        self.position = position


# ---------------------------------------------------------------------------
# images


@dataclass(frozen=True, eq=False)
class Codebook:
    entries: np.ndarray  # (K, D) float64
    patch_size: int

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] < 2:
            raise QuantizerError("codebook needs at least two entries")
        if e.shape[1] != 3 * self.patch_size**2:
            raise QuantizerError(f"entry dimension {e.shape[1]} != 3*P^2 for P={self.patch_size}")
        if not np.all(np.isfinite(e)):
            raise QuantizerError("codebook entries must be finite")
        if len(np.unique(e, axis=0)) != len(e):
            raise QuantizerError("codebook entries must be distinct")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def nearest(self, vectors: np.ndarray) -> np.ndarray:
        """Index of the L2-nearest entry per row; ties go to the lowest index."""
        x = np.asarray(vectors, dtype=np.float64)
        d2 = (
            np.sum(x * x, axis=1)[:, None]
            - 2.0 * x @ self.entries.T
            + np.sum(self.entries * self.entries, axis=1)[None, :]
        )
        # the expanded form can misorder near-ties; re-rank close candidates exactly
        best = np.argmin(d2, axis=1)
        slack = d2[np.arange(len(x)), best] + 1e-9 * (1.0 + np.abs(d2).max(axis=1))
        out = best.copy()
        for row in np.nonzero((d2 <= slack[:, None]).sum(axis=1) > 1)[0]:
            cand = np.nonzero(d2[row] <= slack[row])[0]
            exact = np.sum((self.entries[cand] - x[row]) ** 2, axis=1)
            out[row] = cand[np.argmin(exact)]
        return out

    def to_text(self) -> str:
        k, d = self.entries.shape
        lines = [f"{k} {d} {self.patch_size}"]
        lines.extend(" ".join(repr(float(v)) for v in row) for row in self.entries)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Codebook":
        lines = text.splitlines()
        k, d, p = (int(t) for t in lines[0].split())
        rows = [[float(t) for t in line.split()] for line in lines[1 : 1 + k]]
        entries = np.array(rows, dtype=np.float64)
        if entries.shape != (k, d):
            raise QuantizerError(f"codebook payload shape {entries.shape} != header {(k, d)}")
        return cls(entries, p)


def image_to_patches(img: np.ndarray, patch_size: int) -> np.ndarray:
    """Row-major ``(H/P * W/P, 3*P*P)`` patch matrix of an ``H x W x 3`` image."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise QuantizerError(f"expected H x W x 3 image, got shape {img.shape}")
    h, w, _ = img.shape
    p = patch_size
    if h % p or w % p:
        raise QuantizerError(f"image {h}x{w} not divisible by patch size {p}")
    x = img.reshape(h // p, p, w // p, p, 3).transpose(0, 2, 1, 3, 4)
    return x.reshape((h // p) * (w // p), p * p * 3)


def patches_to_image(patches: np.ndarray, patch_size: int, h: int, w: int) -> np.ndarray:
    p = patch_size
    x = np.asarray(patches).reshape(h // p, w // p, p, p, 3).transpose(0, 2, 1, 3, 4)
    return x.reshape(h, w, 3)


def train_codebook(patches, k: int, iters: int, seed: int, patch_size: int | None = None) -> Codebook:
    """k-means with k-means++ seeding over the distinct patches (weighted by multiplicity)."""
    x = np.asarray(patches, dtype=np.float64)
    if iters < 1:
        raise QuantizerError("iters must be >= 1")
    if k < 2:
        raise QuantizerError("k must be >= 2")
    if patch_size is None:
        patch_size = int(round(math.sqrt(x.shape[1] / 3)))
    uniq, counts = np.unique(x, axis=0, return_counts=True)
    if len(uniq) < k:
        raise QuantizerError(f"only {len(uniq)} distinct patches for k={k}")
    rng = np.random.default_rng(seed)
    weights = counts.astype(np.float64)

    centers = np.empty((k, x.shape[1]))
    centers[0] = uniq[rng.choice(len(uniq), p=weights / weights.sum())]
    d2 = np.sum((uniq - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        p = weights * d2
        centers[j] = uniq[rng.choice(len(uniq), p=p / p.sum())]
        d2 = np.minimum(d2, np.sum((uniq - centers[j]) ** 2, axis=1))

    for _ in range(iters):
        dist = np.sum((uniq[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assign = np.argmin(dist, axis=1)
        new = np.zeros_like(centers)
        mass = np.bincount(assign, weights=weights, minlength=k)
        np.add.at(new, assign, uniq * weights[:, None])
        empty = mass == 0
        new[~empty] /= mass[~empty, None]
        # a cluster of one distinct patch is that patch, without rounding
        members = np.bincount(assign, minlength=k)
        lone = np.nonzero(members == 1)[0]
        if lone.size:
            owner = np.full(k, -1)
            owner[assign] = np.arange(len(uniq))
            new[lone] = uniq[owner[lone]]
        if empty.any():
            # refill empty clusters with the worst-served distinct patches
            worst = np.argsort(-dist[np.arange(len(uniq)), assign] * weights, kind="stable")
            new[empty] = uniq[worst[: empty.sum()]]
        if np.array_equal(new, centers):
            break
        centers = new
    return Codebook(centers, patch_size)


def _codes_of(tokens, v: Vocabulary | None, cb: Codebook) -> np.ndarray:
    codes = np.asarray(list(tokens), dtype=np.int64)
    if v is not None:
        off = v.segment_offsets[IMAGE]
        bad = (codes < off) | (codes >= off + v.image_code_count)
        if bad.any():
            pos = int(np.argmax(bad))
            raise QuantizerError(f"token {int(codes[pos])} at position {pos} is not an image token")
        codes = codes - off
    if codes.size and (codes.min() < 0 or codes.max() >= cb.size):
        raise QuantizerError("image code outside codebook")
    return codes


def quantize_image(img: np.ndarray, cb: Codebook, v: Vocabulary | None = None) -> list[int]:
    """Row-major patch tokens; global image-segment ids when ``v`` is given, else raw codes.

    Pixel values are taken as-is; uint8 images are scaled to [0, 1].
    """
    img = np.asarray(img)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    codes = cb.nearest(image_to_patches(img, cb.patch_size))
    if v is not None:
        codes = codes + v.segment_offsets[IMAGE]
    return [int(c) for c in codes]


def dequantize_image(tokens, cb: Codebook, h: int, w: int, v: Vocabulary | None = None) -> np.ndarray:
    p = cb.patch_size
    if h % p or w % p:
        raise QuantizerError(f"{h}x{w} not divisible by patch size {p}")
    codes = _codes_of(tokens, v, cb)
    need = (h // p) * (w // p)
    if len(codes) != need:
        raise QuantizerError(f"expected {need} image tokens, got {len(codes)}")
    return patches_to_image(cb.entries[codes], p, h, w)


# ---------------------------------------------------------------------------
# text


@dataclass(frozen=True, eq=False)
class BpeTokenizer:
    alphabet: tuple[str, ...]
    merges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(set(self.alphabet)) != len(self.alphabet) or any(len(c) != 1 for c in self.alphabet):
            raise QuantizerError("alphabet must be distinct single characters")
        strings = list(self.alphabet)
        for a, b in self.merges:
            if not (0 <= a < len(strings) and 0 <= b < len(strings)):
                raise QuantizerError(f"merge ({a}, {b}) references an undefined token")
            strings.append(strings[a] + strings[b])
        object.__setattr__(self, "_strings", tuple(strings))
        object.__setattr__(self, "_char_ids", {c: i for i, c in enumerate(self.alphabet)})
        object.__setattr__(self, "_rank", {pair: r for r, pair in enumerate(self.merges)})
        object.__setattr__(self, "_cache", lru_cache(maxsize=65536)(self._encode_uncached))

    @property
    def vocab(self) -> tuple[str, ...]:
        return self._strings

    @property
    def size(self) -> int:
        return len(self._strings)

    def _encode_uncached(self, s: str) -> tuple[int, ...]:
        try:
            seq = [self._char_ids[c] for c in s]
        except KeyError as exc:
            raise QuantizerError(f"character {exc.args[0]!r} not in tokenizer alphabet") from None
        base = len(self.alphabet)
        for r, (a, b) in enumerate(self.merges):
            if len(seq) < 2:
                break
            seq = _apply_merge(seq, a, b, base + r)
        return tuple(seq)

    def encode(self, s: str) -> list[int]:
        return list(self._cache(s))

    def decode(self, ids) -> str:
        out = []
        for pos, i in enumerate(ids):
            i = int(i)
            if not 0 <= i < self.size:
                raise QuantizerError(f"token {i} at position {pos} is not a text token")
            out.append(self._strings[i])
        return "".join(out)

    def to_text(self) -> str:
        lines = [json.dumps("".join(self.alphabet), ensure_ascii=True)]
        lines.extend(f"{a} {b}" for a, b in self.merges)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BpeTokenizer":
        lines = text.splitlines()
        alphabet = tuple(json.loads(lines[0]))
        merges = tuple(tuple(int(t) for t in line.split()) for line in lines[1:])
        return cls(alphabet, merges)


def _apply_merge(seq: list[int], a: int, b: int, new: int) -> list[int]:
    out = []
    i = 0
    n = len(seq)
    while i < n:
        if i + 1 < n and seq[i] == a and seq[i + 1] == b:
            out.append(new)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def train_bpe(corpus, num_merges: int, alphabet: str | None = None) -> BpeTokenizer:
    """Greedy BPE: repeatedly merge the most frequent adjacent pair.

    Frequency ties break on the lexicographically smallest ``(left, right)``
    string pair. Stops early once no adjacent pair is left to merge.
    """
    corpus = list(corpus)
    if not corpus:
        raise QuantizerError("empty corpus")
    if num_merges < 0:
        raise QuantizerError("num_merges must be >= 0")
    chars = sorted(set("".join(corpus)) | set(alphabet or ""))
    if not chars:
        raise QuantizerError("corpus has no characters")
    ids = {c: i for i, c in enumerate(chars)}
    strings = list(chars)
    words = Counter(corpus)
    seqs = [([ids[c] for c in w], n) for w, n in words.items()]
    merges: list[tuple[int, int]] = []
    for _ in range(num_merges):
        counts: Counter = Counter()
        for seq, n in seqs:
            for a, b in zip(seq, seq[1:]):
                counts[(a, b)] += n
        if not counts:
            break
        top = max(counts.values())
        a, b = min((p for p, c in counts.items() if c == top), key=lambda p: (strings[p[0]], strings[p[1]], p))
        new = len(strings)
        strings.append(strings[a] + strings[b])
        merges.append((a, b))
        seqs = [(_apply_merge(seq, a, b, new), n) for seq, n in seqs]
    return BpeTokenizer(tuple(chars), tuple(merges))


def encode_text(t: BpeTokenizer, s: str) -> list[int]:
    """Text ids; the text segment starts at id 0, so local and global ids coincide."""
    return t.encode(s)


def decode_text(t: BpeTokenizer, ids) -> str:
    return t.decode(ids)


# ---------------------------------------------------------------------------
# boxes and categories

BIN_SCALE = 1000


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            c = float(getattr(self, name))
            object.__setattr__(self, name, c)
            if not (0.0 <= c <= 1.0) or math.isnan(c):
                raise QuantizerError(f"{name}={c} outside [0, 1]")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise QuantizerError(f"degenerate box {self.as_tuple()}: need x1<=x2 and y1<=y2")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def iou(self, other: "BBox") -> float:
        iw = min(self.x2, other.x2) - max(self.x1, other.x1)
        ih = min(self.y2, other.y2) - max(self.y1, other.y1)
        inter = max(iw, 0.0) * max(ih, 0.0)
        union = self.area + other.area - inter
        if union <= 0.0:
            return 1.0 if self == other else 0.0
        return inter / union


def coord_to_bin(c: float) -> int:
    """Nearest bin index; exact .5 ties go to the lower bin."""
    if not 0.0 <= c <= 1.0:
        raise QuantizerError(f"coordinate {c} outside [0, 1]")
    return min(max(math.ceil(c * BIN_SCALE - 0.5), 0), BIN_SCALE)


def quantize_bbox(b: BBox, v: Vocabulary) -> list[int]:
    bins = [v.bin_id(coord_to_bin(c)) for c in b.as_tuple()]
    return [v.tag(B_ST), *bins, v.tag(B_ED)]


def dequantize_bbox(ids, v: Vocabulary, start: int = 0) -> BBox:
    """Inverse of :func:`quantize_bbox`; ``start`` only offsets reported positions."""
    ids = list(ids)
    if not ids or ids[0] != v.tag(B_ST):
        raise ParseError("expected <b_st>", start)
    coords = []
    for j in range(1, 5):
        if j >= len(ids):
            raise ParseError("box frame truncated", start + j)
        kind, local = v.resolve(ids[j])
        if kind != BIN:
            raise ParseError(f"expected a bin token, got {v.token_name(ids[j])}", start + j)
        coords.append(local / BIN_SCALE)
    if len(ids) < 6 or ids[5] != v.tag(B_ED):
        raise ParseError("expected <b_ed>", start + min(5, len(ids)))
    if len(ids) != 6:
        raise ParseError("trailing tokens after <b_ed>", start + 6)
    return BBox(*coords)


def encode_category(c: int, v: Vocabulary, names, t: BpeTokenizer) -> list[int]:
    if not 0 <= c < len(names):
        raise QuantizerError(f"unknown class index {c}")
    return [v.tag(C_ST), *encode_text(t, names[c]), v.tag(C_ED)]


def is_text_id(v: Vocabulary, token_id: int) -> bool:
    return v.is_kind(token_id, TEXT)
