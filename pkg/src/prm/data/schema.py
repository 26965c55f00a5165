"""Record types and the JSON-lines file formats used throughout the pipeline."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

__all__ = [
    "UserProfile", "ItemEntry", "RerankRecord", "PretrainRecord", "DatasetManifest",
    "ParseError", "ManifestError", "manifest_path", "parse_records", "write_records",
    "record_to_dict", "record_from_dict", "load_manifest", "save_manifest", "build_manifest",
    "dumps_canonical",
]

DEFAULT_N_MAX = 30
N_PRICE_LEVELS = 7


class ParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, field_name: Optional[str] = None):
        self.line = line
        self.field_name = field_name
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field_name is not None:
            where.append(f"field {field_name!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    gender: int = 0
    age_bucket: int = 0
    purchase_level: int = 0


@dataclass(frozen=True)
class ItemEntry:
    item_id: str
    category: int
    price_level: int
    features: tuple[float, ...]
    label: int = 0


@dataclass(frozen=True)
class RerankRecord:
    request_id: str
    user: UserProfile
    history: tuple[str, ...]
    items: tuple[ItemEntry, ...]


@dataclass(frozen=True)
class PretrainRecord:
    user: UserProfile
    history: tuple[str, ...]
    item: ItemEntry


@dataclass
class DatasetManifest:
    d_feature: int
    n_max: int = DEFAULT_N_MAX
    vocab: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(d_feature=int(d["d_feature"]), n_max=int(d.get("n_max", DEFAULT_N_MAX)),
                   vocab={k: int(v) for k, v in d.get("vocab", {}).items()},
                   counts={k: int(v) for k, v in d.get("counts", {}).items()})


VOCAB_KEYS = ("item_id", "category", "price_level", "gender", "age_bucket", "purchase_level")


def dumps_canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def manifest_path(data_path: Union[str, os.PathLike]) -> Path:
    p = Path(data_path)
    name = p.name
    for suffix in (".jsonl", ".json"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return p.with_name(name + ".manifest.json")


def load_manifest(path: Union[str, os.PathLike]) -> DatasetManifest:
    with open(path) as fh:
        return DatasetManifest.from_dict(json.load(fh))


def save_manifest(manifest: DatasetManifest, path: Union[str, os.PathLike]) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n")


# -- dict <-> record -------------------------------------------------------

def _user_to_dict(u: UserProfile) -> dict:
    return {"user_id": u.user_id, "gender": u.gender, "age_bucket": u.age_bucket,
            "purchase_level": u.purchase_level}


def _item_to_dict(it: ItemEntry, with_label: bool = True) -> dict:
    d = {"item_id": it.item_id, "category": it.category, "price_level": it.price_level,
         "features": list(it.features)}
    if with_label:
        d["label"] = it.label
    return d


def record_to_dict(rec: Union[RerankRecord, PretrainRecord]) -> dict:
    if isinstance(rec, RerankRecord):
        return {"request_id": rec.request_id, "user": _user_to_dict(rec.user),
                "history": list(rec.history), "items": [_item_to_dict(i) for i in rec.items]}
    return {"user": _user_to_dict(rec.user), "history": list(rec.history),
            "item": _item_to_dict(rec.item)}


def _need(d: dict, key: str, kind, line):
    if not isinstance(d, dict) or key not in d:
        raise ParseError("missing required field", line, key)
    v = d[key]
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ParseError(f"expected integer, got {type(v).__name__}", line, key)
    elif kind is str:
        if not isinstance(v, str):
            raise ParseError(f"expected string, got {type(v).__name__}", line, key)
    elif kind is list:
        if not isinstance(v, list):
            raise ParseError(f"expected list, got {type(v).__name__}", line, key)
    elif kind is dict:
        if not isinstance(v, dict):
            raise ParseError(f"expected object, got {type(v).__name__}", line, key)
    return v


def _user_from_dict(d, line) -> UserProfile:
    d = _need({"user": d}, "user", dict, line)
    return UserProfile(_need(d, "user_id", str, line), _need(d, "gender", int, line),
                       _need(d, "age_bucket", int, line), _need(d, "purchase_level", int, line))


def _item_from_dict(d, line, require_label: bool = True) -> ItemEntry:
    if not isinstance(d, dict):
        raise ParseError("item must be an object", line, "items")
    feats = _need(d, "features", list, line)
    for f in feats:
        if isinstance(f, bool) or not isinstance(f, (int, float)):
            raise ParseError("features must be numbers", line, "features")
    if require_label or "label" in d:
        label = _need(d, "label", int, line)
        if label not in (0, 1):
            raise ParseError(f"label must be 0 or 1, got {label}", line, "label")
    else:
        label = 0
    return ItemEntry(_need(d, "item_id", str, line), _need(d, "category", int, line),
                     _need(d, "price_level", int, line), tuple(float(f) for f in feats), label)


def record_from_dict(d: dict, kind: str = "rerank", line: Optional[int] = None,
                     require_label: bool = True):
    if not isinstance(d, dict):
        raise ParseError("record must be a JSON object", line)
    user = _user_from_dict(d.get("user"), line) if "user" in d else None
    if user is None:
        raise ParseError("missing required field", line, "user")
    history = _need(d, "history", list, line)
    if not all(isinstance(h, str) for h in history):
        raise ParseError("history entries must be strings", line, "history")
    if kind == "rerank":
        items = _need(d, "items", list, line)
        if not items:
            raise ParseError("items must be nonempty", line, "items")
        return RerankRecord(_need(d, "request_id", str, line), user, tuple(history),
                            tuple(_item_from_dict(i, line, require_label) for i in items))
    if kind == "pretrain":
        return PretrainRecord(user, tuple(history), _item_from_dict(d.get("item"), line, require_label))
    raise ValueError(f"unknown record kind {kind!r}")


# -- manifest ----------------------------------------------------------------

def _items_of(rec) -> tuple[ItemEntry, ...]:
    return rec.items if isinstance(rec, RerankRecord) else (rec.item,)


def build_manifest(records: Iterable, n_max: int = DEFAULT_N_MAX, kind: str = "rerank") -> DatasetManifest:
    """Infer a manifest from records; fails fast on mixed feature lengths."""
    d_feature = None
    item_ids, maxes = set(), {k: -1 for k in VOCAB_KEYS if k != "item_id"}
    n_rec = n_items = 0
    for rec in records:
        n_rec += 1
        u = rec.user
        for k in ("gender", "age_bucket", "purchase_level"):
            maxes[k] = max(maxes[k], getattr(u, k))
        item_ids.update(rec.history)
        for it in _items_of(rec):
            n_items += 1
            if d_feature is None:
                d_feature = len(it.features)
            elif len(it.features) != d_feature:
                raise ManifestError(f"mixed feature lengths: {d_feature} and {len(it.features)} "
                                    f"(record {n_rec})")
            item_ids.add(it.item_id)
            maxes["category"] = max(maxes["category"], it.category)
            maxes["price_level"] = max(maxes["price_level"], it.price_level)
    vocab = {k: v + 1 for k, v in maxes.items()}
    if n_rec:
        vocab["price_level"] = max(vocab["price_level"], N_PRICE_LEVELS + 1)
    vocab["item_id"] = len(item_ids)
    return DatasetManifest(d_feature=d_feature or 0, n_max=n_max, vocab=vocab,
                           counts={"records": n_rec, "items": n_items})


def validate_record(rec, manifest: DatasetManifest, line: Optional[int] = None) -> None:
    items = _items_of(rec)
    if isinstance(rec, RerankRecord) and len(items) > manifest.n_max:
        raise ManifestError(f"line {line}: list of {len(items)} items exceeds n_max={manifest.n_max}")
    for it in items:
        if len(it.features) != manifest.d_feature:
            raise ManifestError(f"line {line}: item {it.item_id!r} has {len(it.features)} features, "
                                f"manifest declares d_feature={manifest.d_feature}")
        for key in ("category", "price_level"):
            limit = manifest.vocab.get(key)
            v = getattr(it, key)
            if v < 0 or (limit is not None and v >= limit):
                raise ManifestError(f"line {line}: {key}={v} outside vocabulary of size {limit}")
    for key in ("gender", "age_bucket", "purchase_level"):
        limit = manifest.vocab.get(key)
        v = getattr(rec.user, key)
        if v < 0 or (limit is not None and v >= limit):
            raise ManifestError(f"line {line}: {key}={v} outside vocabulary of size {limit}")


# -- files -----------------------------------------------------------------

def parse_records(path: Union[str, os.PathLike], kind: str = "rerank",
                  manifest: Optional[DatasetManifest] = None, n_max: int = DEFAULT_N_MAX):
    """Read a JSON-lines file of records.

    The manifest is taken from the argument, else from ``<name>.manifest.json``
    beside the file, else inferred from the records.  Returns ``(records, manifest)``.
    """
    if manifest is None and manifest_path(path).exists():
        manifest = load_manifest(manifest_path(path))
    records = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                d = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            rec = record_from_dict(d, kind, lineno)
            if manifest is not None:
                validate_record(rec, manifest, lineno)
            records.append(rec)
    if manifest is None:
        manifest = build_manifest(records, n_max=n_max, kind=kind)
        for lineno, rec in enumerate(records, start=1):
            validate_record(rec, manifest, lineno)
    return records, manifest


def write_records(records: Iterable, path: Union[str, os.PathLike],
                  manifest: Optional[DatasetManifest] = None) -> None:
    """Write canonical JSON lines (sorted keys, compact separators)."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(dumps_canonical(record_to_dict(rec)) + "\n")
    if manifest is not None:
        save_manifest(manifest, manifest_path(path))
