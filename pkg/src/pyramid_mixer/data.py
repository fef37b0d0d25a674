"""Interaction-log ingestion, vocabularies, splits, and batching.

Raw logs (several public layouts plus a canonical TSV) become
``InteractionRecord`` lists, which are grouped into chronological
per-user sequences, core-filtered, split leave-one-out (last interaction
is the test target, second-to-last the validation target), and padded
into fixed-length integer batches.
"""

from __future__ import annotations

import ast
import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError

log = logging.getLogger(__name__)

PAD_INDEX = 0
UNK_INDEX = 1
FIRST_REAL_INDEX = 2

# Characters that would break the one-line-per-record TSV layout.
_TSV_FORBIDDEN = ("\t", "\n", "\r", ",", "=")

_ML_GENRES = (
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
)


@dataclass(frozen=True)
class InteractionRecord:
    """One user-item event with its categorical side fields."""

    user_id: str
    item_id: str
    timestamp: int
    side_fields: tuple[tuple[str, str], ...] = ()


@dataclass
class Vocab:
    """Per-field value-to-index maps; 0 is padding, 1 is unknown."""

    fields: tuple[str, ...]
    values: dict[str, list[str]]

    def __post_init__(self):
        self._index = {f: {v: i + FIRST_REAL_INDEX for i, v in enumerate(vals)} for f, vals in self.values.items()}

    def size(self, field_name: str) -> int:
        return len(self.values[field_name]) + FIRST_REAL_INDEX

    def sizes(self) -> tuple[int, ...]:
        return tuple(self.size(f) for f in self.fields)

    def encode(self, field_name: str, value: str) -> int:
        return self._index[field_name].get(value, UNK_INDEX)

    def decode(self, field_name: str, index: int) -> str:
        if index == PAD_INDEX:
            return "<pad>"
        if index == UNK_INDEX:
            return "<unk>"
        return self.values[field_name][index - FIRST_REAL_INDEX]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"fields": list(self.fields), "values": self.values}, fh, indent=1)

    @classmethod
    def load(cls, path: str) -> "Vocab":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
            return cls(fields=tuple(raw["fields"]), values=raw["values"])
        except (OSError, KeyError, ValueError) as exc:
            raise FormatError(f"cannot load vocabulary from {path}: {exc}") from exc


@dataclass
class UserSequence:
    """One user's chronological behaviors as per-field index rows (n, F)."""

    user_id: str
    fields: np.ndarray
    timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.fields)


@dataclass
class Batch:
    """Fixed-length rows ready for the model.

    ``fields`` is (B, L, F) int32, left-padded with 0; ``mask`` is true at
    real positions; ``targets`` holds one item index per row; ``users``
    keeps the originating user ids for seen-item filtering.
    """

    fields: np.ndarray
    mask: np.ndarray
    targets: np.ndarray
    users: list[str]


@dataclass
class SplitView:
    """Leave-one-out views over the surviving user sequences.

    For each user: ``train_part`` rows feed autoregressive training (each
    prefix predicts its next row, starting from the empty prefix);
    ``valid_row``/``test_row`` are the held-out targets in order.
    """

    sequences: list[UserSequence]

    def train_rows(self, user_idx: int) -> np.ndarray:
        return self.sequences[user_idx].fields[:-2]

    def valid_row(self, user_idx: int) -> np.ndarray:
        return self.sequences[user_idx].fields[-2]

    def test_row(self, user_idx: int) -> np.ndarray:
        return self.sequences[user_idx].fields[-1]

    def __len__(self) -> int:
        return len(self.sequences)


# ---------------------------------------------------------------------------
# ingestion

FORMATS = ("movielens-100k", "movielens-1m", "amazon-beauty", "canonical-tsv")


def ingest(path: str, format: str) -> list[InteractionRecord]:
    """Parse an interaction log into records with a uniform field schema.

    Malformed lines are skipped and counted; more than 1% of them fails
    the whole file. An empty file yields an empty list with a warning.
    """
    if format not in FORMATS:
        raise ConfigError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    if not os.path.isfile(path):
        raise DataError(f"dataset file does not exist: {path}")
    parser = {
        "movielens-100k": _parse_ml100k,
        "movielens-1m": _parse_ml1m,
        "amazon-beauty": _parse_beauty,
        "canonical-tsv": _parse_canonical,
    }[format]
    records, malformed, total = parser(path)
    if total == 0:
        log.warning("dataset file %s contains no usable lines", path)
        return []
    if malformed > 0.01 * total:
        raise DataError(f"{malformed} of {total} lines malformed in {path} (over the 1% limit)")
    if malformed:
        log.warning("skipped %d malformed lines out of %d in %s", malformed, total, path)
    return records


def _iter_lines(path: str):
    with open(path, encoding="utf-8", errors="replace") as fh:
        for line in fh:
            line = line.rstrip("\n").rstrip("\r")
            if line:
                yield line


def _rating_bucket(value: str) -> str:
    try:
        return str(int(round(float(value))))
    except ValueError:
        return "unknown"


def _load_ml_genres(sidecar_path: str, sep: str, genre_mode: str) -> dict[str, str]:
    """Item-id to first-listed-genre map from an item-metadata sidecar file."""
    genres: dict[str, str] = {}
    if not os.path.isfile(sidecar_path):
        return genres
    with open(sidecar_path, encoding="latin-1") as fh:
        for line in fh:
            parts = line.rstrip("\n").split(sep)
            if genre_mode == "flags" and len(parts) >= 5 + len(_ML_GENRES):
                flags = parts[-len(_ML_GENRES):]
                first = next((g for g, f in zip(_ML_GENRES, flags) if f == "1"), "unknown")
                genres[parts[0]] = first
            elif genre_mode == "names" and len(parts) >= 3:
                listed = parts[2].split("|")
                genres[parts[0]] = listed[0] if listed and listed[0] else "unknown"
    return genres


def _parse_ml100k(path: str):
    genres = _load_ml_genres(os.path.join(os.path.dirname(path), "u.item"), "|", "flags")
    records, malformed, total = [], 0, 0
    for line in _iter_lines(path):
        total += 1
        parts = line.split("\t")
        if len(parts) != 4:
            malformed += 1
            continue
        user, item, rating, ts = parts
        try:
            timestamp = int(ts)
        except ValueError:
            malformed += 1
            continue
        records.append(InteractionRecord(
            user_id=user, item_id=item, timestamp=timestamp,
            side_fields=(("rating", _rating_bucket(rating)), ("genre", genres.get(item, "unknown"))),
        ))
    return records, malformed, total


def _parse_ml1m(path: str):
    genres = _load_ml_genres(os.path.join(os.path.dirname(path), "movies.dat"), "::", "names")
    records, malformed, total = [], 0, 0
    for line in _iter_lines(path):
        total += 1
        parts = line.split("::")
        if len(parts) != 4:
            malformed += 1
            continue
        user, item, rating, ts = parts
        try:
            timestamp = int(ts)
        except ValueError:
            malformed += 1
            continue
        records.append(InteractionRecord(
            user_id=user, item_id=item, timestamp=timestamp,
            side_fields=(("rating", _rating_bucket(rating)), ("genre", genres.get(item, "unknown"))),
        ))
    return records, malformed, total


def _load_beauty_categories(review_path: str) -> dict[str, str]:
    """Item-id to first-category map from a metadata JSON-lines sidecar, when
    one sits next to the review file."""
    directory = os.path.dirname(review_path) or "."
    candidates = [n for n in sorted(os.listdir(directory)) if n.startswith("meta") and n.endswith(".json")]
    categories: dict[str, str] = {}
    for name in candidates:
        with open(os.path.join(directory, name), encoding="utf-8", errors="replace") as fh:
            for line in fh:
                try:
                    obj = json.loads(line)
                except ValueError:
                    try:
                        obj = ast.literal_eval(line)  # the published metadata uses Python literals
                    except (ValueError, SyntaxError):
                        continue
                if not isinstance(obj, dict):
                    continue
                asin = obj.get("asin")
                cats = obj.get("categories") or obj.get("category")
                if not asin or not cats:
                    continue
                flat = cats[0] if cats and isinstance(cats[0], list) else cats
                leaf = next((c for c in reversed(flat) if isinstance(c, str) and c), None)
                if leaf:
                    categories[asin] = leaf
    return categories


def _parse_beauty(path: str):
    categories = _load_beauty_categories(path)
    records, malformed, total = [], 0, 0
    with open(path, encoding="utf-8", errors="replace") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            total += 1
            try:
                obj = json.loads(line)
                user = obj["reviewerID"]
                item = obj["asin"]
                timestamp = int(obj["unixReviewTime"])
            except (ValueError, KeyError, TypeError):
                malformed += 1
                continue
            records.append(InteractionRecord(
                user_id=user, item_id=item, timestamp=timestamp,
                side_fields=(("category", categories.get(item, "unknown")),),
            ))
    return records, malformed, total


def _parse_canonical(path: str):
    records, malformed, total = [], 0, 0
    for line in _iter_lines(path):
        total += 1
        parts = line.split("\t")
        if len(parts) != 4:
            malformed += 1
            continue
        user, item, ts, side = parts
        try:
            timestamp = int(ts)
        except ValueError:
            malformed += 1
            continue
        side_fields = []
        ok = True
        if side:
            for chunk in side.split(","):
                if "=" not in chunk:
                    ok = False
                    break
                name, value = chunk.split("=", 1)
                side_fields.append((name, value))
        if not ok:
            malformed += 1
            continue
        records.append(InteractionRecord(user, item, timestamp, tuple(side_fields)))
    return records, malformed, total


def export_canonical_tsv(records: list[InteractionRecord], path: str) -> None:
    """Write records in the canonical layout:
    ``user<TAB>item<TAB>timestamp<TAB>field=value[,field=value...]``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            for value in (rec.user_id, rec.item_id):
                if any(c in value for c in ("\t", "\n", "\r")):
                    raise DataError(f"id {value!r} contains a reserved TSV character")
            for pair in rec.side_fields:
                for value in pair:
                    if any(c in value for c in _TSV_FORBIDDEN):
                        raise DataError(f"side field part {value!r} contains a reserved TSV character")
            side = ",".join(f"{n}={v}" for n, v in rec.side_fields)
            fh.write(f"{rec.user_id}\t{rec.item_id}\t{rec.timestamp}\t{side}\n")


# ---------------------------------------------------------------------------
# filtering, vocabularies, splits


def core_filter(records: list[InteractionRecord], min_count: int = 5) -> list[InteractionRecord]:
    """Iteratively drop users and items with fewer than ``min_count``
    interactions until both constraints hold."""
    current = records
    while True:
        user_counts = Counter(r.user_id for r in current)
        item_counts = Counter(r.item_id for r in current)
        kept = [r for r in current if user_counts[r.user_id] >= min_count and item_counts[r.item_id] >= min_count]
        if len(kept) == len(current):
            return kept
        current = kept


def check_schema(records: list[InteractionRecord]) -> tuple[str, ...]:
    """The uniform field schema (item first); mixed schemas are an error."""
    if not records:
        raise DataError("no interaction records to process")
    side = tuple(n for n, _ in records[0].side_fields)
    for i, rec in enumerate(records):
        names = tuple(n for n, _ in rec.side_fields)
        if names != side:
            raise DataError(f"record {i} has side fields {names}, expected {side}")
    return ("item", *side)


def build_vocab(records: list[InteractionRecord]) -> Vocab:
    """First-appearance-ordered vocabularies for the item and side fields."""
    fields = check_schema(records)
    values: dict[str, list[str]] = {f: [] for f in fields}
    seen: dict[str, set] = {f: set() for f in fields}
    for rec in records:
        pairs = (("item", rec.item_id), *rec.side_fields)
        for name, value in pairs:
            if value not in seen[name]:
                seen[name].add(value)
                values[name].append(value)
    return Vocab(fields=fields, values=values)


def build_sequences(records: list[InteractionRecord], vocab: Vocab) -> list[UserSequence]:
    """Group records per user in chronological order (stable on ties) and
    encode every field."""
    by_user: dict[str, list[InteractionRecord]] = defaultdict(list)
    for rec in records:
        by_user[rec.user_id].append(rec)
    sequences = []
    for user_id, recs in by_user.items():
        recs = sorted(recs, key=lambda r: r.timestamp)
        rows = np.empty((len(recs), len(vocab.fields)), dtype=np.int32)
        for i, rec in enumerate(recs):
            rows[i, 0] = vocab.encode("item", rec.item_id)
            for f, (name, value) in enumerate(rec.side_fields, start=1):
                rows[i, f] = vocab.encode(name, value)
        sequences.append(UserSequence(user_id=user_id, fields=rows,
                                      timestamps=np.array([r.timestamp for r in recs], dtype=np.int64)))
    return sequences


@dataclass
class Dataset:
    """Everything the trainer and evaluator need for one prepared corpus."""

    vocab: Vocab
    split: SplitView
    dropped_users: int = 0


def split_leave_one_out(records: list[InteractionRecord], min_count: int = 5) -> Dataset:
    """Core-filter the log, build vocabularies on what survives, and carve
    per-user train/validation/test views.

    Users whose filtered history is shorter than 3 cannot supply both
    held-out targets and are dropped (counted in the result).
    """
    filtered = core_filter(records, min_count=min_count)
    if not filtered:
        raise DataError("no interactions survive core filtering")
    vocab = build_vocab(filtered)
    sequences = build_sequences(filtered, vocab)
    kept = [s for s in sequences if len(s) >= 3]
    dropped = len(sequences) - len(kept)
    if dropped:
        log.warning("dropped %d users with fewer than 3 surviving interactions", dropped)
    if not kept:
        raise DataError("every user is too short for leave-one-out splitting")
    kept.sort(key=lambda s: s.user_id)
    return Dataset(vocab=vocab, split=SplitView(kept), dropped_users=dropped)


# ---------------------------------------------------------------------------
# batching


def _pad_context(context: np.ndarray, length: int, n_fields: int) -> tuple[np.ndarray, np.ndarray]:
    """Left-pad (or truncate to the most recent ``length`` rows) one
    context; returns the (L, F) rows and the (L,) mask."""
    rows = np.zeros((length, n_fields), dtype=np.int32)
    mask = np.zeros(length, dtype=bool)
    tail = context[-length:] if len(context) > length else context
    if len(tail):
        rows[length - len(tail):] = tail
        mask[length - len(tail):] = True
    return rows, mask


def train_examples(split: SplitView) -> list[tuple[int, int]]:
    """All (user index, prefix length) training rows; prefix length k means
    the first k training behaviors predict behavior k (k=0 is the
    cold-start row)."""
    examples = []
    for u in range(len(split)):
        for k in range(len(split.train_rows(u))):
            examples.append((u, k))
    return examples


def batch_sequences(split: SplitView, L: int, B: int, seed: int,
                    rng: np.random.Generator | None = None):
    """Deterministically shuffled padded training batches.

    Passing ``rng`` continues an existing shuffle stream (used by the
    training loop so resumption can restore it); otherwise a fresh
    generator is seeded with ``seed``.
    """
    if L < 1 or B < 1:
        raise ConfigError(f"batching needs positive L and B, got L={L}, B={B}")
    order = np.array(train_examples(split), dtype=np.int64)
    if rng is None:
        rng = np.random.default_rng(seed)
    rng.shuffle(order, axis=0)
    n_fields = split.sequences[0].fields.shape[1]
    for start in range(0, len(order), B):
        chunk = order[start : start + B]
        fields = np.zeros((len(chunk), L, n_fields), dtype=np.int32)
        mask = np.zeros((len(chunk), L), dtype=bool)
        targets = np.zeros(len(chunk), dtype=np.int64)
        users = []
        for i, (u, k) in enumerate(chunk):
            train_part = split.train_rows(int(u))
            fields[i], mask[i] = _pad_context(train_part[:k], L, n_fields)
            targets[i] = train_part[k, 0]
            users.append(split.sequences[int(u)].user_id)
        yield Batch(fields=fields, mask=mask, targets=targets, users=users)


def eval_batches(split: SplitView, L: int, B: int, stage: str):
    """Padded evaluation batches in user order.

    ``stage`` 'valid' scores the second-to-last behavior given the
    training part; 'test' scores the last behavior given everything
    before it.
    """
    if stage not in ("valid", "test"):
        raise ConfigError(f"stage must be 'valid' or 'test', got {stage!r}")
    n_fields = split.sequences[0].fields.shape[1]
    for start in range(0, len(split), B):
        idx = range(start, min(start + B, len(split)))
        fields = np.zeros((len(idx), L, n_fields), dtype=np.int32)
        mask = np.zeros((len(idx), L), dtype=bool)
        targets = np.zeros(len(idx), dtype=np.int64)
        users = []
        for i, u in enumerate(idx):
            seq = split.sequences[u].fields
            context = seq[:-2] if stage == "valid" else seq[:-1]
            fields[i], mask[i] = _pad_context(context, L, n_fields)
            targets[i] = seq[-2, 0] if stage == "valid" else seq[-1, 0]
            users.append(split.sequences[u].user_id)
        yield Batch(fields=fields, mask=mask, targets=targets, users=users)


def synthetic_successor_records(n_users: int = 50, n_items: int = 60,
                                length: int = 21) -> list[InteractionRecord]:
    """A fully predictable log for sanity training: every user walks the
    item ring by the rule next = (current + 1) mod n_items, starting at a
    user-specific offset. The side field groups items into blocks of ten.
    """
    if length > n_items:
        raise ConfigError(f"walk length {length} would revisit items on a ring of {n_items}")
    records = []
    for u in range(n_users):
        start = (u * 7) % n_items
        for t in range(length):
            item = (start + t) % n_items
            records.append(InteractionRecord(
                user_id=f"u{u:03d}", item_id=f"i{item:03d}", timestamp=t,
                side_fields=(("block", f"b{item // 10}"),),
            ))
    return records


def seen_items(split: SplitView, user_idx: int, stage: str) -> np.ndarray:
    """Item indices to exclude when ranking a held-out target: everything
    the user interacted with before that target (never the target itself)."""
    seq = split.sequences[user_idx].fields
    history = seq[:-2, 0] if stage == "valid" else seq[:-1, 0]
    target = seq[-2, 0] if stage == "valid" else seq[-1, 0]
    return np.unique(history[history != target])
