"""Dual-quantization tokenizer and the token-id address space.

Numeric columns become two ids (coarse K-Means bin, fine quantile bin);
categorical columns become one label-encoded id. All ids are 1-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import DataError, Table, drop_missing

MAX_LLOYD_ITER = 300

# Position kinds in a token sequence.
BOS, LEAF, CAT, BIN, QUANT, EOS = "bos", "leaf", "cat", "bin", "quant", "eos"


@dataclass(frozen=True)
class KMeans1D:
    centers: np.ndarray

    @property
    def boundaries(self) -> np.ndarray:
        c = self.centers
        return (c[:-1] + c[1:]) / 2.0

    @property
    def n_bins(self) -> int:
        return len(self.centers)

    def assign(self, values) -> np.ndarray:
        """1-based nearest-center ids; exact midpoints go to the lower center."""
        return np.searchsorted(self.boundaries, np.asarray(values, dtype=np.float64), side="left") + 1


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = (x - centers[0]) ** 2
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        c = x[rng.choice(len(x), p=d2 / total)]
        centers.append(c)
        d2 = np.minimum(d2, (x - c) ** 2)
    return np.sort(np.array(centers))


def _lloyd(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, float]:
    labels = None
    for _ in range(MAX_LLOYD_ITER):
        bounds = (centers[:-1] + centers[1:]) / 2.0
        new = np.searchsorted(bounds, x, side="left")
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        sums = np.bincount(labels, weights=x, minlength=len(centers))
        counts = np.bincount(labels, minlength=len(centers))
        keep = counts > 0
        centers = np.sort(sums[keep] / counts[keep])
        if not keep.all():
            labels = None
    bounds = (centers[:-1] + centers[1:]) / 2.0
    labels = np.searchsorted(bounds, x, side="left")
    inertia = float(((x - centers[labels]) ** 2).sum())
    return centers, inertia


def fit_kmeans_1d(values, k: int, seed: int, n_init: int = 4) -> KMeans1D:
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise DataError("cannot fit K-Means on an empty column")
    if not np.isfinite(x).all():
        raise DataError("K-Means input must be finite")
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    distinct = np.unique(x)
    k = min(k, len(distinct))
    if k == len(distinct):
        return KMeans1D(distinct)
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(n_init):
        centers, inertia = _lloyd(x, _kmeanspp(x, k, rng))
        if inertia < best_inertia:
            best, best_inertia = centers, inertia
    centers = np.unique(best)
    return KMeans1D(centers)


@dataclass(frozen=True)
class QuantileBins:
    """Fine quantizer. ``edges`` has ``n_bins + 1`` entries; a constant column is
    the one degenerate case with ``edges == [v, v]``."""

    edges: np.ndarray
    representatives: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.representatives)

    def assign(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        idx = np.searchsorted(self.edges, v, side="right") - 1
        return np.clip(idx, 0, self.n_bins - 1) + 1

    def widths(self) -> np.ndarray:
        return np.diff(self.edges)


def fit_quantile_bins(values, q: int) -> QuantileBins:
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise DataError("cannot fit quantile bins on an empty column")
    if not np.isfinite(x).all():
        raise DataError("quantile bin input must be finite")
    if q < 1:
        raise ValueError(f"Q must be >= 1, got {q}")
    edges = np.unique(np.quantile(x, np.linspace(0.0, 1.0, q + 1)))
    if len(edges) == 1:
        return QuantileBins(np.array([edges[0], edges[0]]), np.array([edges[0]]))
    # merge empty bins into their left neighbour so every bin holds training data
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, len(edges) - 2)
    occupied = np.unique(idx)
    edges = np.concatenate([[edges[0]], edges[occupied[1:]], [edges[-1]]])
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, len(edges) - 2)
    order = np.argsort(idx, kind="stable")
    groups = np.split(x[order], np.flatnonzero(np.diff(idx[order])) + 1)
    reps = np.array([np.median(g) for g in groups])
    return QuantileBins(edges, reps)


@dataclass(frozen=True)
class CategoryMap:
    categories: tuple[str, ...]

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    @property
    def index(self) -> dict[str, int]:
        return {c: i + 1 for i, c in enumerate(self.categories)}


@dataclass(frozen=True)
class NumericCodec:
    kmeans: KMeans1D
    quantiles: QuantileBins


@dataclass(frozen=True)
class DataTokenizer:
    schema: object
    codecs: tuple
    k: int
    q: int
    _cat_index: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_cat_index", tuple(
            c.index if isinstance(c, CategoryMap) else None for c in self.codecs))

    @property
    def n_c(self) -> int:
        return max((c.n_categories for c in self.codecs if isinstance(c, CategoryMap)), default=0)

    @property
    def n_b(self) -> int:
        return max((c.kmeans.n_bins for c in self.codecs if isinstance(c, NumericCodec)), default=0)

    @property
    def n_q(self) -> int:
        return max((c.quantiles.n_bins for c in self.codecs if isinstance(c, NumericCodec)), default=0)

    @property
    def width(self) -> int:
        """Number of encoded ids per row (m_d + 2 m_c)."""
        return sum(2 if isinstance(c, NumericCodec) else 1 for c in self.codecs)

    def slots(self) -> list[tuple[int, str, int]]:
        """(feature index, kind, id count) for each encoded slot in order."""
        out = []
        for j, c in enumerate(self.codecs):
            if isinstance(c, NumericCodec):
                out.append((j, BIN, c.kmeans.n_bins))
                out.append((j, QUANT, c.quantiles.n_bins))
            else:
                out.append((j, CAT, c.n_categories))
        return out

    def encode(self, t: Table) -> np.ndarray:
        """Encode every row; returns an ``n x width`` array of 1-based ids."""
        if t.schema.names != self.schema.names:
            raise DataError(f"table columns {t.schema.names} do not match tokenizer {self.schema.names}")
        out = np.zeros((t.n_rows, self.width), dtype=np.int64)
        s = 0
        for j, (spec, codec) in enumerate(zip(self.schema.columns, self.codecs)):
            col = t[spec.name]
            if isinstance(codec, NumericCodec):
                col = np.asarray(col, dtype=np.float64)
                if not np.isfinite(col).all():
                    bad = int(np.flatnonzero(~np.isfinite(col))[0])
                    raise DataError(f"column {spec.name!r}, row {bad}: non-finite numeric value")
                out[:, s] = codec.kmeans.assign(col)
                out[:, s + 1] = codec.quantiles.assign(col)
                s += 2
            else:
                index = self._cat_index[j]
                for i, v in enumerate(col):
                    try:
                        out[i, s] = index[v]
                    except KeyError:
                        raise DataError(f"column {spec.name!r}: unseen category {v!r}") from None
                s += 1
        return out

    def encode_row(self, row) -> list[int]:
        t = Table.from_columns(self.schema, {n: [v] for n, v in zip(self.schema.names, row)})
        return self.encode(t)[0].tolist()

    def decode(self, ids) -> Table:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        if ids.shape[1] != self.width:
            raise DataError(f"expected {self.width} ids per row, got {ids.shape[1]}")
        data = {}
        s = 0
        for spec, codec in zip(self.schema.columns, self.codecs):
            if isinstance(codec, NumericCodec):
                b, qid = ids[:, s], ids[:, s + 1]
                if ((b < 1) | (b > codec.kmeans.n_bins)).any():
                    raise DataError(f"column {spec.name!r}: bin id out of range")
                if ((qid < 1) | (qid > codec.quantiles.n_bins)).any():
                    raise DataError(f"column {spec.name!r}: quantile id out of range")
                data[spec.name] = codec.quantiles.representatives[qid - 1]
                s += 2
            else:
                c = ids[:, s]
                if ((c < 1) | (c > codec.n_categories)).any():
                    raise DataError(f"column {spec.name!r}: category id out of range")
                cats = np.array(codec.categories, dtype=object)
                data[spec.name] = cats[c - 1]
                s += 1
        return Table(self.schema, data)

    def decode_row(self, ids) -> tuple:
        return self.decode([list(ids)]).rows()[0]

    def to_dict(self) -> dict:
        codecs = []
        for c in self.codecs:
            if isinstance(c, NumericCodec):
                codecs.append({"type": "numeric",
                               "centers": c.kmeans.centers.tolist(),
                               "edges": c.quantiles.edges.tolist(),
                               "representatives": c.quantiles.representatives.tolist()})
            else:
                codecs.append({"type": "categorical", "categories": list(c.categories)})
        return {"schema": self.schema.to_dict(), "k": self.k, "q": self.q, "codecs": codecs}

    @classmethod
    def from_dict(cls, d: dict) -> "DataTokenizer":
        from .dataset import Schema
        codecs = []
        for c in d["codecs"]:
            if c["type"] == "numeric":
                codecs.append(NumericCodec(KMeans1D(np.array(c["centers"])),
                                           QuantileBins(np.array(c["edges"]), np.array(c["representatives"]))))
            else:
                codecs.append(CategoryMap(tuple(c["categories"])))
        return cls(Schema.from_dict(d["schema"]), tuple(codecs), d["k"], d["q"])


def fit_tokenizer(t: Table, k: int = 10, q: int = 1000, seed: int = 0) -> DataTokenizer:
    t = drop_missing(t)
    if t.n_rows == 0:
        raise DataError("cannot fit a tokenizer on an empty table")
    codecs = []
    for j, spec in enumerate(t.schema.columns):
        col = t[spec.name]
        if spec.is_numeric:
            codecs.append(NumericCodec(fit_kmeans_1d(col, k, seed + j), fit_quantile_bins(col, q)))
        else:
            cats = list(spec.declared_categories or ())
            seen = set(cats)
            for v in sorted(set(col)):
                if v not in seen:
                    cats.append(v)
                    seen.add(v)
            codecs.append(CategoryMap(tuple(cats)))
    return DataTokenizer(t.schema, tuple(codecs), k, q)


@dataclass(frozen=True)
class VocabLayout:
    """Token-id address space and per-position structure of a row sequence.

    Ids: leaf ``[0, n_l)``, cat, bin, quant families in that order, then BOS, EOS, MASK.
    Positions are 1-based: 1 is BOS, ``2..T+1`` the trees, then encoded value slots, ``L`` is EOS.
    """

    leaf_counts: tuple[int, ...]
    slots: tuple[tuple[int, str, int], ...]
    n_c: int
    n_b: int
    n_q: int

    @classmethod
    def build(cls, tokenizer: DataTokenizer, leaf_counts) -> "VocabLayout":
        leaf_counts = tuple(int(x) for x in leaf_counts)
        if not leaf_counts or min(leaf_counts) < 1:
            raise ValueError("every tree needs at least one leaf")
        return cls(leaf_counts, tuple(tokenizer.slots()), tokenizer.n_c, tokenizer.n_b, tokenizer.n_q)

    @property
    def n_trees(self) -> int:
        return len(self.leaf_counts)

    @property
    def n_l(self) -> int:
        return max(self.leaf_counts)

    @property
    def leaf_offset(self) -> int:
        return 0

    @property
    def cat_offset(self) -> int:
        return self.n_l

    @property
    def bin_offset(self) -> int:
        return self.n_l + self.n_c

    @property
    def quant_offset(self) -> int:
        return self.n_l + self.n_c + self.n_b

    @property
    def bos(self) -> int:
        return self.n_l + self.n_c + self.n_b + self.n_q

    @property
    def eos(self) -> int:
        return self.bos + 1

    @property
    def mask(self) -> int:
        return self.bos + 2

    @property
    def vocab_size(self) -> int:
        return self.n_l + self.n_c + self.n_b + self.n_q + 3

    @property
    def seq_len(self) -> int:
        return 2 + self.n_trees + len(self.slots)

    def family_offset(self, kind: str) -> int:
        return {LEAF: self.leaf_offset, CAT: self.cat_offset, BIN: self.bin_offset, QUANT: self.quant_offset}[kind]

    def position_info(self, position: int) -> tuple[str, int, int]:
        """(kind, feature or tree index, valid id count) at a 1-based position."""
        L, T = self.seq_len, self.n_trees
        if not 1 <= position <= L:
            raise IndexError(f"position {position} outside 1..{L}")
        if position == 1:
            return BOS, -1, 1
        if position == L:
            return EOS, -1, 1
        if position <= T + 1:
            return LEAF, position - 2, self.leaf_counts[position - 2]
        feature, kind, count = self.slots[position - T - 2]
        return kind, feature, count

    def valid_range(self, position: int) -> tuple[int, int]:
        """Half-open id range of valid tokens at a 1-based position."""
        kind, _, count = self.position_info(position)
        if kind == BOS:
            return self.bos, self.bos + 1
        if kind == EOS:
            return self.eos, self.eos + 1
        start = self.family_offset(kind)
        return start, start + count

    def valid_vocab_at(self, position: int) -> set[int]:
        lo, hi = self.valid_range(position)
        return set(range(lo, hi))

    def position_kinds(self) -> list[str]:
        return [self.position_info(i)[0] for i in range(1, self.seq_len + 1)]

    def valid_ranges(self) -> np.ndarray:
        return np.array([self.valid_range(i) for i in range(1, self.seq_len + 1)], dtype=np.int64)

    def valid_mask(self) -> np.ndarray:
        """``L x V`` boolean matrix of allowed tokens per position."""
        m = np.zeros((self.seq_len, self.vocab_size), dtype=bool)
        for i, (lo, hi) in enumerate(self.valid_ranges()):
            m[i, lo:hi] = True
        return m

    def build_sequences(self, leaves, values) -> np.ndarray:
        """Token ids ``[BOS, leaves..., values..., EOS]`` for each row."""
        leaves = np.atleast_2d(np.asarray(leaves, dtype=np.int64))
        values = np.atleast_2d(np.asarray(values, dtype=np.int64))
        n = leaves.shape[0]
        if leaves.shape[1] != self.n_trees or values.shape != (n, len(self.slots)):
            raise ValueError(f"expected {self.n_trees} leaf ids and {len(self.slots)} value ids per row")
        counts = np.array(self.leaf_counts)
        if ((leaves < 1) | (leaves > counts)).any():
            raise ValueError("leaf id out of range for its tree")
        seq = np.empty((n, self.seq_len), dtype=np.int64)
        seq[:, 0] = self.bos
        seq[:, -1] = self.eos
        seq[:, 1:1 + self.n_trees] = leaves - 1 + self.leaf_offset
        for s, (_, kind, count) in enumerate(self.slots):
            col = values[:, s]
            if ((col < 1) | (col > count)).any():
                raise ValueError(f"value id out of range in slot {s} ({kind})")
            seq[:, 1 + self.n_trees + s] = col - 1 + self.family_offset(kind)
        return seq

    def build_sequence(self, leaf_row, value_ids) -> list[int]:
        return self.build_sequences([leaf_row], [value_ids])[0].tolist()

    def extract_values(self, seqs) -> np.ndarray:
        """Inverse of the value part of ``build_sequences``: 1-based ids per slot."""
        seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
        start = 1 + self.n_trees
        out = np.empty((seqs.shape[0], len(self.slots)), dtype=np.int64)
        for s, (_, kind, _) in enumerate(self.slots):
            out[:, s] = seqs[:, start + s] - self.family_offset(kind) + 1
        return out

    def to_dict(self) -> dict:
        return {"leaf_counts": list(self.leaf_counts), "slots": [list(s) for s in self.slots],
                "n_c": self.n_c, "n_b": self.n_b, "n_q": self.n_q}

    @classmethod
    def from_dict(cls, d: dict) -> "VocabLayout":
        return cls(tuple(d["leaf_counts"]), tuple((int(a), str(b), int(c)) for a, b, c in d["slots"]),
                   d["n_c"], d["n_b"], d["n_q"])
