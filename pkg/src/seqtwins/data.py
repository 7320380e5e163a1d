"""Interaction-log ingestion, vocabulary, sequence building and splits.

Supported raw formats:

* ``movielens-1m``: ``ratings.dat`` / ``movies.dat`` / ``users.dat`` with ``::``
  separators (latin-1).
* ``movielens-20m``: ``ratings.csv`` / ``movies.csv`` with headers.
* ``yelp``: JSON-lines tips plus the business file for categories.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import sparse

from .exceptions import DataError

logger = logging.getLogger(__name__)

SEQ_LEN = 16
MIN_ACTIONS = 10
MASK_INDEX = 0
UNDEFINED_LABEL = -1
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
LABEL_TASKS = ("favorite_category", "age_group", "occupation")

FORMATS = ("movielens-1m", "movielens-20m", "yelp")
DEFAULT_FILES = {
    "movielens-1m": {"ratings": "ratings.dat", "items": "movies.dat", "users": "users.dat"},
    "movielens-20m": {"ratings": "ratings.csv", "items": "movies.csv"},
    "yelp": {
        "ratings": "yelp_academic_dataset_tip.json",
        "items": "yelp_academic_dataset_business.json",
    },
}


def natural_key(s: str):
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


@dataclass(frozen=True, slots=True)
class InteractionRecord:
    user_id: str
    item_id: str
    timestamp: int
    item_categories: tuple[int, ...] = ()

    def __post_init__(self):
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")
        if not self.item_id:
            raise DataError("empty item id")


@dataclass
class ItemCatalog:
    """Item ids in file order and their category names."""

    item_ids: list[str] = field(default_factory=list)
    item_categories: dict[str, list[str]] = field(default_factory=dict)
    n_malformed: int = 0


@dataclass
class InteractionLog:
    """Columnar interaction log, sorted by user then timestamp.

    Users are ordered by natural id (numeric ids numerically); equal
    timestamps keep their original file order.
    """

    user_ids: np.ndarray
    item_ids: np.ndarray
    timestamps: np.ndarray
    n_malformed: int = 0

    def __post_init__(self):
        if not len(self.user_ids):
            raise DataError("no valid interaction records")
        users = np.asarray(self.user_ids, dtype=object)
        uniq, inv = np.unique(users, return_inverse=True)
        rank = np.empty(len(uniq), dtype=np.int64)
        rank[np.array(sorted(range(len(uniq)), key=lambda i: natural_key(uniq[i])), dtype=np.int64)] = (
            np.arange(len(uniq))
        )
        ts = np.asarray(self.timestamps, dtype=np.int64)
        order = np.lexsort((np.arange(len(ts)), ts, rank[inv]))
        self.user_ids = users[order]
        self.item_ids = np.asarray(self.item_ids, dtype=object)[order]
        self.timestamps = ts[order]

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def n_users(self) -> int:
        return len(set(self.user_ids.tolist()))

    def records(self, vocab: Vocabulary | None = None) -> Iterator[InteractionRecord]:
        for u, i, t in zip(self.user_ids, self.item_ids, self.timestamps):
            cats = tuple(vocab.categories_of(i)) if vocab is not None else ()
            yield InteractionRecord(u, i, int(t), cats)


# ---------------------------------------------------------------------------
# readers


def _open_text(path: Path, encoding: str = "utf-8"):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"cannot read {path}")
    return open(path, encoding=encoding, errors="replace", newline="")


def read_movielens_ratings(path, sep: str = "::") -> InteractionLog:
    users, items, stamps, bad = [], [], [], 0
    with _open_text(path, "latin-1") as fh:
        if sep == ",":
            reader = csv.reader(fh)
            header = next(reader, None)
            if header and header[0].strip().isdigit():
                reader = _prepend(header, reader)
            lines = reader
        else:
            lines = (ln.rstrip("\r\n").split(sep) for ln in fh if ln.strip())
        for parts in lines:
            try:
                u, i, _, t = parts
                ts = int(float(t))
                if not u or not i or ts < 0:
                    raise ValueError
            except ValueError:
                bad += 1
                continue
            users.append(u.strip())
            items.append(i.strip())
            stamps.append(ts)
    if bad:
        logger.warning("%s: skipped %d malformed lines", path, bad)
    return InteractionLog(users, items, np.array(stamps, dtype=np.int64), bad)


def _prepend(first, rest):
    yield first
    yield from rest


def read_movielens_items(path, sep: str = "::") -> ItemCatalog:
    cat = ItemCatalog()
    with _open_text(path, "latin-1") as fh:
        if sep == ",":
            reader = csv.reader(fh)
            next(reader, None)
            rows = reader
        else:
            rows = (ln.rstrip("\r\n").split(sep) for ln in fh if ln.strip())
        for parts in rows:
            if len(parts) < 3 or not parts[0].strip():
                cat.n_malformed += 1
                continue
            item = parts[0].strip()
            genres = [g for g in parts[-1].strip().split("|") if g and g != "(no genres listed)"]
            cat.item_ids.append(item)
            cat.item_categories[item] = genres
    return cat


def read_movielens_users(path) -> dict[str, dict[str, str]]:
    """``users.dat`` -> {user_id: {"gender", "age_group", "occupation"}}."""
    out = {}
    with _open_text(path, "latin-1") as fh:
        for ln in fh:
            parts = ln.rstrip("\r\n").split("::")
            if len(parts) < 4:
                continue
            out[parts[0]] = {"gender": parts[1], "age_group": parts[2], "occupation": parts[3]}
    return out


def _parse_yelp_date(s: str) -> int:
    return int(datetime.strptime(s, "%Y-%m-%d %H:%M:%S").replace(tzinfo=timezone.utc).timestamp())


def read_yelp_tips(path) -> InteractionLog:
    users, items, stamps, bad = [], [], [], 0
    with _open_text(path) as fh:
        for ln in fh:
            if not ln.strip():
                continue
            try:
                row = json.loads(ln)
                u, i, ts = row["user_id"], row["business_id"], _parse_yelp_date(row["date"])
                if not u or not i:
                    raise ValueError
            except (ValueError, KeyError, TypeError):
                bad += 1
                continue
            users.append(u)
            items.append(i)
            stamps.append(ts)
    if bad:
        logger.warning("%s: skipped %d malformed lines", path, bad)
    return InteractionLog(users, items, np.array(stamps, dtype=np.int64), bad)


def read_yelp_businesses(path) -> ItemCatalog:
    cat = ItemCatalog()
    with _open_text(path) as fh:
        for ln in fh:
            if not ln.strip():
                continue
            try:
                row = json.loads(ln)
                item = row["business_id"]
            except (ValueError, KeyError, TypeError):
                cat.n_malformed += 1
                continue
            raw = row.get("categories") or ""
            cat.item_ids.append(item)
            cat.item_categories[item] = [c.strip() for c in raw.split(",") if c.strip()]
    return cat


def ingest(path, fmt: str, items_path=None) -> tuple[InteractionLog, ItemCatalog | None]:
    """Read one interaction file, and optionally its item/category file."""
    if fmt not in FORMATS:
        raise DataError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    if fmt == "yelp":
        log = read_yelp_tips(path)
        catalog = read_yelp_businesses(items_path) if items_path else None
    else:
        sep = "::" if fmt == "movielens-1m" else ","
        log = read_movielens_ratings(path, sep)
        catalog = read_movielens_items(items_path, sep) if items_path else None
    return log, catalog


# ---------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocabulary:
    """Item ids mapped to indices 1..V; index 0 is the mask/pad token."""

    item_ids: list[str]
    categories: list[str]
    item_categories: list[tuple[int, ...]]  # position 0 is the pad token
    label_classes: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.item_to_index = {item: i + 1 for i, item in enumerate(self.item_ids)}
        if len(self.item_to_index) != len(self.item_ids):
            raise DataError("duplicate item ids in vocabulary")
        if len(self.item_categories) != len(self.item_ids) + 1:
            raise DataError("item_categories must have V + 1 entries")
        self._cat_index = {c: k for k, c in enumerate(self.categories)}

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.item_ids)

    def index(self, item_id: str) -> int:
        return self.item_to_index[item_id]

    def categories_of(self, item_id: str) -> tuple[int, ...]:
        return self.item_categories[self.item_to_index[item_id]]

    def category_index(self, name: str) -> int:
        return self._cat_index[name]

    def category_matrix(self) -> sparse.csr_matrix:
        """(V + 1) x K 0/1 matrix of item categories."""
        rows, cols = [], []
        for idx, cats in enumerate(self.item_categories):
            rows.extend([idx] * len(cats))
            cols.extend(cats)
        data = np.ones(len(rows))
        return sparse.csr_matrix(
            (data, (rows, cols)), shape=(self.n_items + 1, max(len(self.categories), 1))
        )

    @classmethod
    def build(cls, item_ids, catalog: ItemCatalog | None = None) -> Vocabulary:
        """Vocabulary over ``item_ids`` in the given order.

        Categories are indexed in order of first appearance along that order.
        """
        item_ids = list(item_ids)
        categories: list[str] = []
        seen: dict[str, int] = {}
        per_item: list[tuple[int, ...]] = [()]
        for item in item_ids:
            names = catalog.item_categories.get(item, []) if catalog else []
            idx = []
            for name in names:
                if name not in seen:
                    seen[name] = len(categories)
                    categories.append(name)
                if seen[name] not in idx:
                    idx.append(seen[name])
            per_item.append(tuple(sorted(idx)))
        return cls(item_ids, categories, per_item)

    def to_json(self) -> dict:
        return {
            "item_ids": self.item_ids,
            "categories": self.categories,
            "item_categories": [list(c) for c in self.item_categories],
            "label_classes": self.label_classes,
        }

    @classmethod
    def from_json(cls, obj: dict) -> Vocabulary:
        return cls(
            list(obj["item_ids"]),
            list(obj["categories"]),
            [tuple(c) for c in obj["item_categories"]],
            {k: list(v) for k, v in obj.get("label_classes", {}).items()},
        )


def build_vocabulary(log: InteractionLog, catalog: ItemCatalog | None, fmt: str) -> Vocabulary:
    """Pick the item index space for a dataset format.

    MovieLens-1M uses its documented numeric id range 1..max(MovieID) so the
    index equals the movie id; other formats index the union of catalog and
    interacted items in natural-id order.
    """
    observed = set(log.item_ids.tolist())
    known = set(catalog.item_ids) if catalog else set()
    if fmt == "movielens-1m" and all(s.isdigit() for s in observed | known):
        top = max(int(s) for s in observed | known)
        ids = [str(i) for i in range(1, top + 1)]
    else:
        ids = sorted(observed | known, key=natural_key)
    vocab = Vocabulary.build(ids, catalog)
    if fmt == "yelp":
        # restrict categories to those carried by interacted items
        used = sorted({c for i in observed for c in vocab.categories_of(i)})
        remap = {old: new for new, old in enumerate(used)}
        vocab = Vocabulary(
            vocab.item_ids,
            [vocab.categories[c] for c in used],
            [tuple(remap[c] for c in cats if c in remap) for cats in vocab.item_categories],
        )
    return vocab


# ---------------------------------------------------------------------------
# sequences


@dataclass
class UserSequence:
    """One fixed-length model input."""

    items: np.ndarray
    real_length: int
    user_id: str = ""
    labels: dict[str, int] = field(default_factory=dict)
    next_item: int = 0

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64)

    def validate(self, n_items: int | None = None) -> None:
        rl = self.real_length
        if self.items.ndim != 1 or not 1 <= rl <= len(self.items):
            raise DataError(f"real_length {rl} outside [1, {len(self.items)}]")
        if np.any(self.items[rl:] != MASK_INDEX):
            raise DataError("padding positions must hold the mask index")
        if np.any(self.items < 0) or (n_items is not None and np.any(self.items > n_items)):
            raise DataError("item index out of range")


@dataclass
class SequenceStore:
    """Columnar collection of :class:`UserSequence` rows.

    ``segmentation`` is ``"sliding"`` (row t holds the up-to-16 items before
    action t and ``next_item`` is action t) or ``"chunk"`` (non-overlapping
    chunks; ``next_item`` is the chunk's last real item).
    """

    items: np.ndarray
    real_length: np.ndarray
    user_ids: np.ndarray
    next_item: np.ndarray
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    segmentation: str = "sliding"

    def __len__(self) -> int:
        return len(self.real_length)

    @property
    def seq_len(self) -> int:
        return self.items.shape[1]

    def __getitem__(self, i: int) -> UserSequence:
        return UserSequence(
            self.items[i].copy(),
            int(self.real_length[i]),
            str(self.user_ids[i]),
            {k: int(v[i]) for k, v in self.labels.items()},
            int(self.next_item[i]),
        )

    def subset(self, ids) -> SequenceStore:
        ids = np.asarray(ids, dtype=np.int64)
        return SequenceStore(
            self.items[ids],
            self.real_length[ids],
            self.user_ids[ids],
            self.next_item[ids],
            {k: v[ids] for k, v in self.labels.items()},
            self.segmentation,
        )

    def next_item_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Context rows and their target item for next-item training.

        For chunks the last real item is the target and is masked out of the
        context; rows with no context are dropped.
        """
        if self.segmentation == "chunk":
            keep = self.real_length >= 2
            ctx = self.items[keep].copy()
            rl = self.real_length[keep]
            ctx[np.arange(len(ctx)), rl - 1] = MASK_INDEX
            return ctx, self.next_item[keep]
        keep = self.next_item > 0
        return self.items[keep], self.next_item[keep]

    def to_csv(self, path) -> None:
        path = Path(path)
        tasks = list(self.labels)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["seq_id", "user_id", "real_length"]
                + [f"i{j + 1}" for j in range(self.seq_len)]
                + ["next_item"]
                + tasks
            )
            label_cols = [self.labels[t] for t in tasks]
            for i in range(len(self)):
                w.writerow(
                    [i, self.user_ids[i], int(self.real_length[i])]
                    + self.items[i].tolist()
                    + [int(self.next_item[i])]
                    + [int(c[i]) for c in label_cols]
                )

    @classmethod
    def from_csv(cls, path, segmentation: str = "sliding") -> SequenceStore:
        path = Path(path)
        if not path.is_file():
            raise DataError(f"cannot read {path}")
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise DataError(f"{path} is empty")
            body = list(reader)
        n_items_cols = sum(1 for h in header if h[:1] == "i" and h[1:].isdigit())
        tasks = header[4 + n_items_cols :]
        users = np.array([r[1] for r in body], dtype=object)
        ints = np.array(
            [[r[2]] + r[3 : 3 + n_items_cols] + r[3 + n_items_cols :] for r in body], dtype=np.int64
        ).reshape(len(body), -1)
        return cls(
            ints[:, 1 : 1 + n_items_cols],
            ints[:, 0],
            users,
            ints[:, 1 + n_items_cols],
            {t: ints[:, 2 + n_items_cols + k] for k, t in enumerate(tasks)},
            segmentation,
        )


def _segment_bounds(offsets, counts, seq_len, segmentation):
    """Global (start, length, target_pos) arrays for every emitted row."""
    if segmentation == "sliding":
        per_user = counts - 1
        owner_off = np.repeat(offsets, per_user)
        local_t = np.arange(per_user.sum()) - np.repeat(np.cumsum(per_user) - per_user, per_user) + 1
        start = np.maximum(local_t - seq_len, 0)
        return owner_off + start, local_t - start, owner_off + local_t
    if segmentation == "chunk":
        per_user = -(-counts // seq_len)
        owner_off = np.repeat(offsets, per_user)
        owner_n = np.repeat(counts, per_user)
        k = np.arange(per_user.sum()) - np.repeat(np.cumsum(per_user) - per_user, per_user)
        start = k * seq_len
        length = np.minimum(seq_len, owner_n - start)
        return owner_off + start, length, owner_off + start + length - 1
    raise DataError(f"unknown segmentation {segmentation!r}")


def build_sequences(
    log: InteractionLog,
    vocab: Vocabulary,
    seq_len: int = SEQ_LEN,
    min_actions: int = MIN_ACTIONS,
    segmentation: str = "sliding",
    user_attributes: dict[str, dict[str, str]] | None = None,
) -> SequenceStore:
    """Segment every retained user's time-ordered history into rows.

    Users with fewer than ``min_actions`` interactions are dropped. Rows are
    emitted in user order, then time order.
    """
    idx = np.fromiter((vocab.item_to_index[i] for i in log.item_ids), dtype=np.int64, count=len(log))
    users = log.user_ids
    change = np.flatnonzero(users[1:] != users[:-1]) + 1
    offsets = np.concatenate([[0], change]).astype(np.int64)
    counts = np.diff(np.concatenate([offsets, [len(users)]])).astype(np.int64)
    keep = counts >= min_actions
    offsets, counts = offsets[keep], counts[keep]

    start, length, target = _segment_bounds(offsets, counts, seq_len, segmentation)
    pos = np.arange(seq_len)
    valid = pos[None, :] < length[:, None]
    gather = np.where(valid, start[:, None] + pos[None, :], 0)
    items = np.where(valid, idx[gather], MASK_INDEX) if len(start) else np.zeros((0, seq_len), np.int64)
    next_item = idx[target] if len(start) else np.zeros(0, np.int64)
    store = SequenceStore(
        items.astype(np.int64),
        length.astype(np.int64),
        users[start] if len(start) else np.zeros(0, dtype=object),
        next_item.astype(np.int64),
        segmentation=segmentation,
    )
    store.labels["favorite_category"] = favorite_categories(store.items, vocab)
    if user_attributes:
        for task in ("age_group", "occupation"):
            codes = sorted({a[task] for a in user_attributes.values()}, key=natural_key)
            lookup = {c: k for k, c in enumerate(codes)}
            vocab.label_classes[task] = codes
            store.labels[task] = np.array(
                [lookup[user_attributes[u][task]] if u in user_attributes else UNDEFINED_LABEL
                 for u in store.user_ids],
                dtype=np.int64,
            )
    vocab.label_classes["favorite_category"] = list(vocab.categories)
    return store


def favorite_categories(items: np.ndarray, vocab: Vocabulary, chunk: int = 65536) -> np.ndarray:
    """Most frequent category per row (ties to the lowest index).

    Rows whose items carry no category get :data:`UNDEFINED_LABEL`.
    """
    n = len(items)
    out = np.full(n, UNDEFINED_LABEL, dtype=np.int64)
    if not vocab.categories or n == 0:
        return out
    m = vocab.category_matrix()
    width = items.shape[1]
    for lo in range(0, n, chunk):
        block = items[lo : lo + chunk]
        b = len(block)
        s = sparse.csr_matrix(
            ((block > 0).ravel().astype(np.float64), (np.repeat(np.arange(b), width), block.ravel())),
            shape=(b, m.shape[0]),
        )
        counts = (s @ m).toarray()
        best = counts.argmax(axis=1)
        out[lo : lo + b] = np.where(counts.max(axis=1) > 0, best, UNDEFINED_LABEL)
    return out


def derive_favorite_category(seq: UserSequence, vocab: Vocabulary) -> int:
    counts: dict[int, int] = {}
    for item in seq.items[: seq.real_length]:
        for c in vocab.item_categories[int(item)]:
            counts[c] = counts.get(c, 0) + 1
    if not counts:
        return UNDEFINED_LABEL
    top = max(counts.values())
    return min(c for c, v in counts.items() if v == top)


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitManifest:
    train: list[int]
    val: list[int]
    test: list[int]
    seed: int
    fractions: tuple[float, float, float] = SPLIT_FRACTIONS

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "fractions": list(self.fractions),
            "train": self.train,
            "val": self.val,
            "test": self.test,
        }

    @classmethod
    def from_json(cls, obj: dict) -> SplitManifest:
        return cls(
            [int(i) for i in obj["train"]],
            [int(i) for i in obj["val"]],
            [int(i) for i in obj["test"]],
            int(obj["seed"]),
            tuple(obj.get("fractions", SPLIT_FRACTIONS)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> SplitManifest:
        return cls.from_json(json.loads(Path(path).read_text()))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(n_sequences: int, seed: int, fractions=SPLIT_FRACTIONS) -> SplitManifest:
    """Seeded shuffle of ``range(n_sequences)`` cut into train/val/test."""
    if n_sequences < 10:
        raise DataError(f"need at least 10 sequences to split, got {n_sequences}")
    perm = np.random.default_rng(seed).permutation(n_sequences)
    n_train = _round_half_up(fractions[0] * n_sequences)
    n_val = _round_half_up(fractions[1] * n_sequences)
    return SplitManifest(
        perm[:n_train].tolist(),
        perm[n_train : n_train + n_val].tolist(),
        perm[n_train + n_val :].tolist(),
        seed,
        tuple(fractions),
    )


def subsample_labeled(manifest: SplitManifest, fraction: float, seed: int) -> list[int]:
    """Uniform sample of ceil(fraction * |train|) training ids, sorted."""
    if not 0 < fraction <= 1:
        raise DataError(f"label fraction must be in (0, 1], got {fraction}")
    n = len(manifest.train)
    k = math.ceil(round(fraction * n, 9))
    if k >= n:
        return sorted(manifest.train)
    picked = np.random.default_rng(seed).choice(np.asarray(manifest.train), size=k, replace=False)
    return sorted(picked.tolist())


# ---------------------------------------------------------------------------
# one-call loading


@dataclass
class PreparedData:
    store: SequenceStore
    vocab: Vocabulary
    manifest: SplitManifest
    stats: dict


def load_raw(fmt: str, data_dir) -> tuple[InteractionLog, ItemCatalog | None, dict | None]:
    data_dir = Path(data_dir)
    if fmt not in FORMATS:
        raise DataError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    files = DEFAULT_FILES[fmt]
    items_path = data_dir / files["items"]
    log, catalog = ingest(data_dir / files["ratings"], fmt, items_path if items_path.is_file() else None)
    users = None
    if "users" in files and (data_dir / files["users"]).is_file():
        users = read_movielens_users(data_dir / files["users"])
    return log, catalog, users


def prepare(
    fmt: str,
    data_dir,
    seq_len: int = SEQ_LEN,
    min_actions: int = MIN_ACTIONS,
    seed: int = 0,
    segmentation: str = "sliding",
) -> PreparedData:
    """Ingest, index, segment and split a dataset directory."""
    log, catalog, users = load_raw(fmt, data_dir)
    vocab = build_vocabulary(log, catalog, fmt)
    store = build_sequences(log, vocab, seq_len, min_actions, segmentation, users)
    manifest = split(len(store), seed)
    stats = {
        "format": fmt,
        "n_users": int(len(set(store.user_ids.tolist()))),
        "n_items": vocab.n_items,
        "n_actions": len(log),
        "n_categories": len(vocab.categories),
        "n_sequences": len(store),
        "n_train": len(manifest.train),
        "n_val": len(manifest.val),
        "n_test": len(manifest.test),
        "n_malformed": log.n_malformed,
        "segmentation": segmentation,
        "seq_len": seq_len,
        "min_actions": min_actions,
        "seed": seed,
    }
    return PreparedData(store, vocab, manifest, stats)


def save_prepared(prep: PreparedData, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prep.store.to_csv(out_dir / "sequences.csv")
    prep.manifest.save(out_dir / "split.json")
    (out_dir / "vocab.json").write_text(json.dumps(prep.vocab.to_json()))
    (out_dir / "stats.json").write_text(json.dumps(prep.stats, indent=2, sort_keys=True))


def load_prepared(data_dir) -> PreparedData:
    data_dir = Path(data_dir)
    for name in ("sequences.csv", "split.json", "vocab.json", "stats.json"):
        if not (data_dir / name).is_file():
            raise DataError(f"{data_dir} is missing {name}; run `prepare` first")
    stats = json.loads((data_dir / "stats.json").read_text())
    store = SequenceStore.from_csv(data_dir / "sequences.csv", stats.get("segmentation", "sliding"))
    vocab = Vocabulary.from_json(json.loads((data_dir / "vocab.json").read_text()))
    return PreparedData(store, vocab, SplitManifest.load(data_dir / "split.json"), stats)
