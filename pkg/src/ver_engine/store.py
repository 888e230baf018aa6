"""Persistence of precomputed encoder features and query sets.

The "WCFT" binary holds one length-prefixed, CRC32-guarded record per
entity: description token embeddings (with a valid length), per-image
patch-feature matrices, and per-image pooled vectors. A JSON sidecar
manifest carries dims, record offsets, and per-record checksums so records
can be random-accessed and every byte of the file is integrity-checked.
Files are immutable after write; concurrent readers are safe.
"""

from __future__ import annotations

import base64
import os
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .adaptor import PatchFeatures, TokenEmbeddings
from .errors import FormatError, IngestionError, NotFoundError

STORE_MAGIC = b"WCFT"
STORE_VERSION = 1
DEFAULT_N_T_MAX = 256

_U32 = struct.Struct("<I")


@dataclass
class FeatureBundle:
    """All ingested tensors of one entity. Image index 0 is the primary
    (lead) image; the adaptor's visual guidance always uses it, while
    retrieval's max-over-images may span all of them."""

    entity_id: str
    description_tokens: TokenEmbeddings
    image_features: list[PatchFeatures]
    pooled_image_vectors: list[np.ndarray]

    def __post_init__(self):
        if len(self.image_features) < 1:
            raise IngestionError(f"{self.entity_id}: at least one entity image required")
        if len(self.image_features) != len(self.pooled_image_vectors):
            raise IngestionError(
                f"{self.entity_id}: {len(self.image_features)} images but "
                f"{len(self.pooled_image_vectors)} pooled vectors"
            )


@dataclass
class StoreManifest:
    version: int
    d: int
    d_t: int
    n_t_max: int
    entity_count: int
    records: list[dict]  # {"entity_id", "offset", "length", "crc32"}

    def to_json(self) -> dict:
        return {
            "format": "WCFT",
            "version": self.version,
            "d": self.d,
            "d_t": self.d_t,
            "n_t_max": self.n_t_max,
            "entity_count": self.entity_count,
            "records": self.records,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StoreManifest":
        return cls(
            version=obj["version"],
            d=obj["d"],
            d_t=obj["d_t"],
            n_t_max=obj["n_t_max"],
            entity_count=obj["entity_count"],
            records=obj["records"],
        )


def manifest_path(store_path: str | Path) -> Path:
    p = Path(store_path)
    return p.with_suffix(p.suffix + ".manifest.json")


def truncate_tokens(t: TokenEmbeddings, n_t_max: int) -> TokenEmbeddings:
    """Keep the first ``n_t_max`` token rows (and cap the valid length)."""
    if t.tokens.shape[0] <= n_t_max:
        return TokenEmbeddings(t.tokens, min(t.valid_len, n_t_max))
    return TokenEmbeddings(t.tokens[:n_t_max], min(t.valid_len, n_t_max))


def _f32_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _encode_record(bundle: FeatureBundle, d: int, d_t: int) -> bytes:
    eid = bundle.entity_id.encode("utf-8")
    toks = bundle.description_tokens
    out = bytearray()
    out += _U32.pack(len(eid))
    out += eid
    out += _U32.pack(toks.valid_len)
    out += _U32.pack(toks.tokens.shape[0])
    out += _f32_bytes(toks.tokens)
    out += _U32.pack(len(bundle.image_features))
    for img, pooled in zip(bundle.image_features, bundle.pooled_image_vectors):
        out += _U32.pack(img.patches.shape[0])
        out += _f32_bytes(img.patches)
        out += _f32_bytes(pooled.reshape(1, d))
    return bytes(out)


def write_store(
    bundles: list[FeatureBundle],
    path: str | Path,
    n_t_max: int = DEFAULT_N_T_MAX,
) -> StoreManifest:
    """Write a WCFT file plus its JSON manifest sidecar.

    Dim consistency and entity-id uniqueness are enforced before any byte
    hits disk; token matrices longer than ``n_t_max`` are rejected (truncate
    first with :func:`truncate_tokens`).
    """
    if bundles:
        d = bundles[0].image_features[0].patches.shape[1]
        d_t = bundles[0].description_tokens.tokens.shape[1]
    else:
        d, d_t = 0, 0

    seen: set[str] = set()
    for b in bundles:
        if b.entity_id in seen:
            raise IngestionError(f"duplicate entity id {b.entity_id!r}")
        seen.add(b.entity_id)
        if b.description_tokens.tokens.shape[1] != d_t:
            raise IngestionError(f"{b.entity_id}: token dim != {d_t}")
        if b.description_tokens.tokens.shape[0] > n_t_max:
            raise IngestionError(
                f"{b.entity_id}: {b.description_tokens.tokens.shape[0]} token rows "
                f"exceed n_t_max={n_t_max}"
            )
        if b.description_tokens.valid_len > b.description_tokens.tokens.shape[0]:
            raise IngestionError(f"{b.entity_id}: valid_len exceeds token rows")
        for img, pooled in zip(b.image_features, b.pooled_image_vectors):
            if img.patches.shape[1] != d or pooled.shape != (d,):
                raise IngestionError(f"{b.entity_id}: image feature dim != {d}")

    path = Path(path)
    records = []
    with open(path, "wb") as f:
        f.write(STORE_MAGIC)
        f.write(_U32.pack(STORE_VERSION))
        f.write(struct.pack("<3I", d, d_t, n_t_max))
        for b in bundles:
            payload = _encode_record(b, d, d_t)
            offset = f.tell()
            f.write(_U32.pack(len(payload)))
            f.write(payload)
            crc = zlib.crc32(payload)
            f.write(_U32.pack(crc))
            records.append(
                {
                    "entity_id": b.entity_id,
                    "offset": offset,
                    "length": len(payload),
                    "crc32": crc,
                }
            )

    manifest = StoreManifest(STORE_VERSION, d, d_t, n_t_max, len(bundles), records)
    with open(manifest_path(path), "w") as f:
        json.dump(manifest.to_json(), f, indent=2)
        f.write("\n")
    return manifest


def _decode_record(payload: bytes, d: int, d_t: int, entity_id: str | None = None) -> FeatureBundle:
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(payload):
            raise FormatError(
                f"record {entity_id or '?'}: truncated at payload byte {off}"
            )
        chunk = payload[off : off + n]
        off += n
        return chunk

    def take_u32() -> int:
        return _U32.unpack(take(4))[0]

    def take_f32(rows: int, cols: int) -> np.ndarray:
        raw = take(4 * rows * cols)
        return np.frombuffer(raw, dtype="<f4").reshape(rows, cols).copy()

    id_len = take_u32()
    eid = take(id_len).decode("utf-8")
    valid_len = take_u32()
    token_rows = take_u32()
    tokens = take_f32(token_rows, d_t)
    image_count = take_u32()
    images, pooled = [], []
    for _ in range(image_count):
        n_patches = take_u32()
        images.append(PatchFeatures(take_f32(n_patches, d)))
        pooled.append(take_f32(1, d).reshape(d))
    if off != len(payload):
        raise FormatError(f"record {eid}: {len(payload) - off} trailing payload bytes")
    return FeatureBundle(eid, TokenEmbeddings(tokens, valid_len), images, pooled)


class FeatureStore:
    """Random-access reader over a WCFT file via its manifest offsets."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists():
            raise NotFoundError(f"store file not found: {self.path}")
        mpath = manifest_path(self.path)
        if not mpath.exists():
            raise NotFoundError(f"store manifest not found: {mpath}")
        with open(mpath) as f:
            self.manifest = StoreManifest.from_json(json.load(f))
        self._offsets = {r["entity_id"]: r for r in self.manifest.records}
        self._file = open(self.path, "rb")
        header = self._file.read(20)
        if header[:4] != STORE_MAGIC:
            raise FormatError(f"{self.path}: bad magic {header[:4]!r}")
        (version,) = _U32.unpack_from(header, 4)
        if version != STORE_VERSION:
            raise FormatError(f"{self.path}: unsupported store version {version}")
        self.d, self.d_t, self.n_t_max = struct.unpack_from("<3I", header, 8)

    @property
    def entity_ids(self) -> list[str]:
        return [r["entity_id"] for r in self.manifest.records]

    def read_entity(self, entity_id: str) -> FeatureBundle:
        rec = self._offsets.get(entity_id)
        if rec is None:
            raise NotFoundError(f"entity {entity_id!r} not in store {self.path}")
        # positionless reads keep concurrent readers safe on one handle
        fd = self._file.fileno()
        header = os.pread(fd, 4, rec["offset"])
        (length,) = _U32.unpack(header)
        block = os.pread(fd, length + 4, rec["offset"] + 4)
        payload, (crc,) = block[:length], _U32.unpack(block[length:])
        if zlib.crc32(payload) != crc:
            raise FormatError(
                f"record {entity_id}: CRC mismatch at offset {rec['offset']}"
            )
        return _decode_record(payload, self.d, self.d_t, entity_id)

    def iter_entities(self) -> Iterator[FeatureBundle]:
        for eid in self.entity_ids:
            yield self.read_entity(eid)

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "FeatureStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass
class Finding:
    record_id: str  # entity id, or a structural location like "<header>"
    offset: int
    message: str

    def to_json(self) -> dict:
        return {"record_id": self.record_id, "offset": self.offset, "message": self.message}


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def add(self, record_id: str, offset: int, message: str) -> None:
        self.findings.append(Finding(record_id, offset, message))

    def to_json(self) -> dict:
        return {"ok": self.ok, "findings": [f.to_json() for f in self.findings]}


def validate_store(path: str | Path) -> ValidationReport:
    """Structural + numerical validation of a WCFT file against its manifest.

    Accepts exactly the files :func:`write_store` produces; every finding
    names the offending record and byte offset.
    """
    report = ValidationReport()
    path = Path(path)
    if not path.exists():
        report.add("<file>", 0, f"store file not found: {path}")
        return report
    mpath = manifest_path(path)
    if not mpath.exists():
        report.add("<manifest>", 0, f"manifest not found: {mpath}")
        return report
    try:
        with open(mpath) as f:
            manifest = StoreManifest.from_json(json.load(f))
    except (json.JSONDecodeError, KeyError) as exc:
        report.add("<manifest>", 0, f"unreadable manifest: {exc}")
        return report

    raw = path.read_bytes()
    if len(raw) < 20:
        report.add("<header>", 0, "file shorter than the fixed header")
        return report
    if raw[:4] != STORE_MAGIC:
        report.add("<header>", 0, f"bad magic {raw[:4]!r}, expected {STORE_MAGIC!r}")
        return report
    (version,) = _U32.unpack_from(raw, 4)
    if version != STORE_VERSION:
        report.add("<header>", 4, f"unsupported version {version}")
        return report
    d, d_t, n_t_max = struct.unpack_from("<3I", raw, 8)
    if (d, d_t, n_t_max) != (manifest.d, manifest.d_t, manifest.n_t_max):
        report.add(
            "<header>", 8,
            f"header dims ({d},{d_t},{n_t_max}) disagree with manifest "
            f"({manifest.d},{manifest.d_t},{manifest.n_t_max})",
        )
        return report
    if manifest.entity_count != len(manifest.records):
        report.add("<manifest>", 0, "entity_count disagrees with record list")

    expected_offset = 20
    seen_ids: set[str] = set()
    for rec in manifest.records:
        eid, offset, length, crc = (
            rec["entity_id"], rec["offset"], rec["length"], rec["crc32"],
        )
        if eid in seen_ids:
            report.add(eid, offset, "duplicate entity id")
        seen_ids.add(eid)
        if offset != expected_offset:
            report.add(eid, offset, f"offset {offset} != expected {expected_offset}")
            return report
        if offset + 8 + length > len(raw):
            report.add(eid, offset, "record extends past end of file")
            return report
        (stored_len,) = _U32.unpack_from(raw, offset)
        if stored_len != length:
            report.add(eid, offset, f"length prefix {stored_len} != manifest {length}")
            return report
        payload = raw[offset + 4 : offset + 4 + length]
        (stored_crc,) = _U32.unpack_from(raw, offset + 4 + length)
        actual_crc = zlib.crc32(payload)
        if stored_crc != actual_crc or crc != actual_crc:
            report.add(eid, offset, "record CRC mismatch")
            expected_offset = offset + 8 + length
            continue
        try:
            bundle = _decode_record(payload, d, d_t, eid)
        except FormatError as exc:
            report.add(eid, offset, str(exc))
            expected_offset = offset + 8 + length
            continue
        if bundle.entity_id != eid:
            report.add(eid, offset, f"record id {bundle.entity_id!r} != manifest id")
        toks = bundle.description_tokens
        if toks.tokens.shape[0] > n_t_max:
            report.add(eid, offset, f"{toks.tokens.shape[0]} token rows exceed n_t_max")
        if toks.valid_len > toks.tokens.shape[0]:
            report.add(eid, offset, "valid_len exceeds token rows")
        if not np.isfinite(toks.tokens).all():
            report.add(eid, offset, "non-finite token values")
        for i, (img, pooled) in enumerate(
            zip(bundle.image_features, bundle.pooled_image_vectors)
        ):
            if not np.isfinite(img.patches).all():
                report.add(eid, offset, f"image {i}: non-finite patch values")
            if not np.isfinite(pooled).all():
                report.add(eid, offset, f"image {i}: non-finite pooled vector")
            else:
                norm = float(np.linalg.norm(pooled))
                if abs(norm - 1.0) > 1e-4:
                    report.add(eid, offset, f"image {i}: pooled norm {norm:.6f} not unit")
        expected_offset = offset + 8 + length

    if expected_offset != len(raw):
        report.add("<trailer>", expected_offset,
                   f"{len(raw) - expected_offset} unexpected trailing bytes")
    return report


# ---------------------------------------------------------------------------
# Query sets — JSON lines with base64-embedded f32 vectors
# ---------------------------------------------------------------------------

SPLITS = ("seen", "unseen")


@dataclass
class QueryRecord:
    query_id: str
    vector: np.ndarray
    entity_id: str
    split: str


@dataclass
class QuerySet:
    records: list[QueryRecord]

    def __len__(self) -> int:
        return len(self.records)

    def split_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in SPLITS}
        for r in self.records:
            counts[r.split] = counts.get(r.split, 0) + 1
        return counts


def encode_vector(v: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(v, dtype="<f4").tobytes()).decode("ascii")


def decode_vector(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f4").copy()


def save_queries(queries: QuerySet, path: str | Path) -> None:
    with open(path, "w") as f:
        for r in queries.records:
            f.write(
                json.dumps(
                    {
                        "query_id": r.query_id,
                        "vector": encode_vector(r.vector),
                        "entity_id": r.entity_id,
                        "split": r.split,
                    }
                )
            )
            f.write("\n")


def load_queries(path: str | Path, known_ids: set[str] | None = None) -> QuerySet:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"query file not found: {path}")
    records = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = QueryRecord(
                    query_id=obj["query_id"],
                    vector=decode_vector(obj["vector"]),
                    entity_id=obj["entity_id"],
                    split=obj["split"],
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise FormatError(f"{path}:{line_no}: bad query record: {exc}") from exc
            if rec.split not in SPLITS:
                raise FormatError(f"{path}:{line_no}: unknown split {rec.split!r}")
            if known_ids is not None and rec.entity_id not in known_ids:
                raise FormatError(
                    f"{path}:{line_no}: ground-truth entity {rec.entity_id!r} not in KB"
                )
            records.append(rec)
    return QuerySet(records)
