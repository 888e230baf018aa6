"""Entity-embedding indexes and max-over-images retrieval.

One index row per (entity, image) pair; an entity's score against a query
is the maximum dot product over its image rows, and entities are ranked by
that score with lexicographic entity-id tie-breaking. The flat exact scan
is the reference path; IVF-flat (coarse k-means lists, probe the nearest
``n_probe``) is an optional speedup that recovers exactness at full
probing. Indexes persist as "WCIX" files: CRC-guarded named sections, so
any single-byte corruption is rejected with a located error.
"""

from __future__ import annotations

import json
import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import batching
from .adaptor import AdaptorParams, adaptor_forward_cached
from .errors import ConfigError, DegenerateInputError, FormatError, NotFoundError
from .store import FeatureStore

INDEX_MAGIC = b"WCIX"
INDEX_VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass
class IndexShard:
    """Unit-row embedding matrix plus the row -> (entity, image) map.

    Entities are stored contiguously in lexicographic id order, which makes
    per-entity maxima a segmented reduction and tie-breaking deterministic.
    """

    matrix: np.ndarray  # M x D, unit rows, f32
    entity_ids: list[str]  # sorted lexicographically
    row_entity: np.ndarray  # int32, row -> index into entity_ids
    row_image: np.ndarray  # int32, row -> image id
    mode: str = "exact"  # "exact" | "ivf"
    n_lists: int = 0
    n_probe: int = 0
    seed: int = 0
    centroids: np.ndarray | None = None  # n_lists x D
    row_list: np.ndarray | None = None  # int32, row -> list id
    _group_starts: np.ndarray | None = field(default=None, repr=False)
    _entity_index: "dict[str, int] | None" = field(default=None, repr=False)

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_entities(self) -> int:
        return len(self.entity_ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def group_starts(self) -> np.ndarray:
        if self._group_starts is None:
            changes = np.flatnonzero(np.diff(self.row_entity)) + 1
            self._group_starts = np.concatenate(([0], changes)).astype(np.int64)
        return self._group_starts

    def entity_index(self) -> dict[str, int]:
        if self._entity_index is None:
            self._entity_index = {eid: i for i, eid in enumerate(self.entity_ids)}
        return self._entity_index


def build_shard(
    rows: list[tuple[str, int, np.ndarray]],
    seed: int = 0,
) -> IndexShard:
    """Assemble a flat exact shard from (entity_id, image_id, unit_vec) rows."""
    if not rows:
        raise ConfigError("cannot build an index from zero rows")
    rows = sorted(rows, key=lambda r: (r[0], r[1]))
    entity_ids = sorted({eid for eid, _, _ in rows})
    eidx = {eid: i for i, eid in enumerate(entity_ids)}
    matrix = np.ascontiguousarray(
        np.stack([vec for _, _, vec in rows]).astype(np.float32)
    )
    return IndexShard(
        matrix=matrix,
        entity_ids=entity_ids,
        row_entity=np.array([eidx[eid] for eid, _, _ in rows], dtype=np.int32),
        row_image=np.array([img for _, img, _ in rows], dtype=np.int32),
        seed=seed,
    )


@dataclass
class EmbedReport:
    n_entities: int
    n_rows: int
    skipped: list[str] = field(default_factory=list)


def embed_kb(
    store: FeatureStore,
    params: AdaptorParams,
    workers: int = 1,
    all_images: bool = True,
    modality: str = "both",
    progress: "callable | None" = None,
    skip_ids: set[str] | None = None,
) -> tuple[list[tuple[str, int, np.ndarray]], EmbedReport]:
    """Embed every (entity, image) pair through the adaptor.

    Embarrassingly parallel across entities; per-entity outputs depend only
    on that entity's features, so worker count never changes the bits.
    Entities with fully-padded text are skipped with a warning entry.
    ``skip_ids`` supports resuming a previous partial run.
    """
    entity_ids = sorted(store.entity_ids)
    report = EmbedReport(n_entities=len(entity_ids), n_rows=0)
    todo = [eid for eid in entity_ids if not (skip_ids and eid in skip_ids)]

    def embed_one(eid: str) -> tuple[str, list[tuple[int, np.ndarray]]] | None:
        bundle = store.read_entity(eid)
        toks = bundle.description_tokens
        if toks.valid_len < 1:
            return None
        images = bundle.image_features if all_images else bundle.image_features[:1]
        out = []
        for image_id, img in enumerate(images):
            unit, _ = adaptor_forward_cached(
                img.patches, toks.tokens, toks.valid_len, params, modality=modality
            )
            out.append((image_id, unit.astype(np.float32)))
        return eid, out

    rows: list[tuple[str, int, np.ndarray]] = []
    if workers <= 1:
        results = map(embed_one, todo)
    else:
        pool = ThreadPoolExecutor(max_workers=workers)
        results = pool.map(embed_one, todo)
    for eid, result in zip(todo, results):
        if result is None:
            report.skipped.append(eid)
        else:
            _, pairs = result
            rows.extend((eid, image_id, vec) for image_id, vec in pairs)
        if progress is not None:
            progress(eid)
    if workers > 1:
        pool.shutdown()
    report.n_rows = len(rows)
    return rows, report


@dataclass
class RetrievalResult:
    entries: list[tuple[str, float, int]]  # (entity_id, score, best image id)
    latency_ns: int

    def to_json(self) -> dict:
        return {
            "results": [
                {"entity_id": eid, "score": score, "image_id": img}
                for eid, score, img in self.entries
            ],
            "latency_ns": self.latency_ns,
        }


def _rank_entities(
    shard: IndexShard, entity_scores: np.ndarray, k: int
) -> list[tuple[int, float]]:
    """Top-k entity indices by score, ties broken toward the lower id.

    Entity ids are pre-sorted lexicographically, so a stable sort on the
    negated scores yields the tie rule. For large KBs a partition first
    narrows to the candidates with score >= the k-th largest (boundary ties
    included), which is exactly the set the full sort would pick from.
    """
    present = np.flatnonzero(entity_scores > -np.inf)
    k_eff = min(k, present.size)
    if k_eff == 0:
        return []
    cand = present
    if present.size > 4 * k_eff:
        scores_p = entity_scores[present]
        kth = np.partition(scores_p, present.size - k_eff)[present.size - k_eff]
        cand = present[scores_p >= kth]
    order = cand[np.argsort(-entity_scores[cand], kind="stable")][:k_eff]
    return [(int(e), float(entity_scores[int(e)])) for e in order]


def _best_image(shard: IndexShard, eidx: int, scores_rows: np.ndarray) -> int:
    starts = shard.group_starts()
    start = int(starts[eidx])
    end = int(starts[eidx + 1]) if eidx + 1 < starts.size else shard.n_rows
    local = scores_rows[start:end]
    return int(shard.row_image[start + int(np.argmax(local))])


def query(shard: IndexShard, query_vec: np.ndarray, k: int) -> RetrievalResult:
    """Exact scan: dot products against all rows, per-entity max, top-k."""
    if shard.n_rows == 0:
        raise ConfigError("index is empty")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    t0 = time.perf_counter_ns()
    h = _normalized_query(shard, query_vec)
    scores = shard.matrix @ h
    starts = shard.group_starts()
    entity_scores = np.maximum.reduceat(scores, starts)
    ranked = _rank_entities(shard, entity_scores, k)
    entries = [
        (shard.entity_ids[e], score, _best_image(shard, e, scores))
        for e, score in ranked
    ]
    return RetrievalResult(entries, time.perf_counter_ns() - t0)


def _normalized_query(shard: IndexShard, query_vec: np.ndarray) -> np.ndarray:
    h = np.asarray(query_vec, dtype=np.float32)
    if h.shape != (shard.dim,):
        raise ConfigError(f"query dim {h.shape} != index dim {shard.dim}")
    norm = float(np.linalg.norm(h))
    if norm == 0.0:
        raise DegenerateInputError("zero query vector")
    return h / np.float32(norm)


def build_ivf(shard: IndexShard, n_lists: int, seed: int) -> IndexShard:
    """Attach a coarse k-means quantizer over the rows."""
    if n_lists < 1 or n_lists > shard.n_rows:
        raise ConfigError(f"n_lists={n_lists} outside [1, {shard.n_rows}]")
    plan = batching.kmeans_cluster(shard.matrix, n_lists, seed)
    return IndexShard(
        matrix=shard.matrix,
        entity_ids=shard.entity_ids,
        row_entity=shard.row_entity,
        row_image=shard.row_image,
        mode="ivf",
        n_lists=n_lists,
        n_probe=max(1, n_lists // 8),
        seed=seed,
        centroids=plan.centroids.astype(np.float32),
        row_list=plan.assignments.astype(np.int32),
    )


def query_ivf(
    shard: IndexShard, query_vec: np.ndarray, k: int, n_probe: int | None = None
) -> RetrievalResult:
    """Scan only the rows in the ``n_probe`` nearest coarse lists."""
    if shard.mode != "ivf" or shard.centroids is None or shard.row_list is None:
        raise ConfigError("index has no IVF quantizer; build_ivf first")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    n_probe = shard.n_probe if n_probe is None else n_probe
    if not 1 <= n_probe <= shard.n_lists:
        raise ConfigError(f"n_probe={n_probe} outside [1, {shard.n_lists}]")
    t0 = time.perf_counter_ns()
    h = _normalized_query(shard, query_vec)

    d2 = np.sum((shard.centroids - h) ** 2, axis=1)
    probe = np.argsort(d2, kind="stable")[:n_probe]
    candidate_mask = np.isin(shard.row_list, probe)
    candidates = np.flatnonzero(candidate_mask)
    if candidates.size == 0:
        return RetrievalResult([], time.perf_counter_ns() - t0)

    scores = shard.matrix[candidates] @ h
    entity_scores = np.full(shard.n_entities, -np.inf, dtype=np.float32)
    np.maximum.at(entity_scores, shard.row_entity[candidates], scores)
    ranked = _rank_entities(shard, entity_scores, k)

    entries = []
    for e, score in ranked:
        rows_of_e = candidates[shard.row_entity[candidates] == e]
        local = shard.matrix[rows_of_e] @ h
        entries.append(
            (shard.entity_ids[e], score,
             int(shard.row_image[rows_of_e[int(np.argmax(local))]]))
        )
    return RetrievalResult(entries, time.perf_counter_ns() - t0)


# ---------------------------------------------------------------------------
# WCIX persistence — named, CRC-guarded sections
# ---------------------------------------------------------------------------


def _pack_section(name: str, payload: bytes) -> bytes:
    nb = name.encode("ascii")
    frame = _U32.pack(len(nb)) + nb + _U64.pack(len(payload)) + payload
    # the CRC covers the whole frame so name and length corruption is caught
    return frame + _U32.pack(zlib.crc32(frame))


def save_index(shard: IndexShard, path: str | Path) -> None:
    header = {
        "d": shard.dim,
        "rows": shard.n_rows,
        "entities": shard.n_entities,
        "mode": shard.mode,
        "n_lists": shard.n_lists,
        "n_probe": shard.n_probe,
        "seed": shard.seed,
    }
    sections: list[tuple[str, bytes]] = [
        ("header", json.dumps(header, sort_keys=True).encode("utf-8")),
        ("ids", "\n".join(shard.entity_ids).encode("utf-8")),
        (
            "rowmap",
            np.ascontiguousarray(
                np.stack([shard.row_entity, shard.row_image], axis=1), dtype="<i4"
            ).tobytes(),
        ),
        ("matrix", np.ascontiguousarray(shard.matrix, dtype="<f4").tobytes()),
    ]
    if shard.mode == "ivf":
        sections.append(
            ("centroids", np.ascontiguousarray(shard.centroids, dtype="<f4").tobytes())
        )
        sections.append(
            ("listmap", np.ascontiguousarray(shard.row_list, dtype="<i4").tobytes())
        )
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        f.write(_U32.pack(INDEX_VERSION))
        f.write(_U32.pack(len(sections)))
        for name, payload in sections:
            f.write(_pack_section(name, payload))


def _walk_sections(raw: bytes) -> list[tuple[str, bytes, int]]:
    """Parse (name, payload, offset) triples, CRC-checking each section."""
    if len(raw) < 12 or raw[:4] != INDEX_MAGIC:
        raise FormatError(f"bad index magic at offset 0: {raw[:4]!r}")
    (version,) = _U32.unpack_from(raw, 4)
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version} at offset 4")
    (n_sections,) = _U32.unpack_from(raw, 8)
    out = []
    off = 12
    for _ in range(n_sections):
        start = off
        if off + 4 > len(raw):
            raise FormatError(f"truncated section frame at offset {start}")
        (name_len,) = _U32.unpack_from(raw, off)
        off += 4
        if name_len > 64 or off + name_len + 8 > len(raw):
            raise FormatError(f"corrupt section frame at offset {start}")
        name = raw[off : off + name_len].decode("ascii", errors="replace")
        off += name_len
        (payload_len,) = _U64.unpack_from(raw, off)
        off += 8
        if off + payload_len + 4 > len(raw):
            raise FormatError(f"section {name!r} at offset {start} extends past end of file")
        payload = raw[off : off + payload_len]
        off += payload_len
        (crc,) = _U32.unpack_from(raw, off)
        off += 4
        if zlib.crc32(raw[start : off - 4]) != crc:
            raise FormatError(f"section {name!r} at offset {start} fails its CRC")
        out.append((name, payload, start))
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes after offset {off}")
    return out


def load_index(path: str | Path) -> IndexShard:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"index file not found: {path}")
    raw = path.read_bytes()
    sections = {name: (payload, off) for name, payload, off in _walk_sections(raw)}
    for required in ("header", "ids", "rowmap", "matrix"):
        if required not in sections:
            raise FormatError(f"{path}: missing section {required!r}")

    header = json.loads(sections["header"][0].decode("utf-8"))
    d, rows = header["d"], header["rows"]
    entity_ids = sections["ids"][0].decode("utf-8").split("\n") if sections["ids"][0] else []
    rowmap = np.frombuffer(sections["rowmap"][0], dtype="<i4").reshape(rows, 2)
    matrix = np.frombuffer(sections["matrix"][0], dtype="<f4").reshape(rows, d).copy()
    if len(entity_ids) != header["entities"]:
        raise FormatError(f"{path}: id section count != header entity count")

    shard = IndexShard(
        matrix=matrix,
        entity_ids=entity_ids,
        row_entity=rowmap[:, 0].copy(),
        row_image=rowmap[:, 1].copy(),
        mode=header["mode"],
        n_lists=header["n_lists"],
        n_probe=header["n_probe"],
        seed=header["seed"],
    )
    if header["mode"] == "ivf":
        if "centroids" not in sections or "listmap" not in sections:
            raise FormatError(f"{path}: ivf index missing quantizer sections")
        shard.centroids = (
            np.frombuffer(sections["centroids"][0], dtype="<f4")
            .reshape(header["n_lists"], d)
            .copy()
        )
        shard.row_list = np.frombuffer(sections["listmap"][0], dtype="<i4").copy()
    return shard


def validate_index(path: str | Path) -> "ValidationReport":
    """Format validation; every finding carries a section name and offset."""
    from .store import ValidationReport

    report = ValidationReport()
    path = Path(path)
    if not path.exists():
        report.add("<file>", 0, f"index file not found: {path}")
        return report
    raw = path.read_bytes()
    try:
        sections = _walk_sections(raw)
    except FormatError as exc:
        report.add("<frame>", 0, str(exc))
        return report
    by_name = {name: (payload, off) for name, payload, off in sections}
    for required in ("header", "ids", "rowmap", "matrix"):
        if required not in by_name:
            report.add("<frame>", 0, f"missing section {required!r}")
            return report
    try:
        header = json.loads(by_name["header"][0].decode("utf-8"))
    except json.JSONDecodeError as exc:
        report.add("header", by_name["header"][1], f"unreadable header: {exc}")
        return report
    expected = {"header", "ids", "rowmap", "matrix"}
    if header.get("mode") == "ivf":
        expected |= {"centroids", "listmap"}
    for name, _, off in sections:
        if name not in expected:
            report.add(name, off, f"unexpected section {name!r}")
    for name in sorted(expected - set(by_name)):
        report.add(name, 0, f"missing section {name!r} for mode {header.get('mode')!r}")
    if not report.ok:
        return report
    d, rows = header.get("d", 0), header.get("rows", 0)
    if len(by_name["matrix"][0]) != 4 * d * rows:
        report.add("matrix", by_name["matrix"][1], "matrix byte length != rows*d*4")
        return report
    if len(by_name["rowmap"][0]) != 8 * rows:
        report.add("rowmap", by_name["rowmap"][1], "rowmap byte length != rows*8")
        return report
    matrix = np.frombuffer(by_name["matrix"][0], dtype="<f4").reshape(rows, d)
    if not np.isfinite(matrix).all():
        report.add("matrix", by_name["matrix"][1], "non-finite embedding values")
    else:
        norms = np.linalg.norm(matrix, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-5)
        if bad.size:
            report.add(
                "matrix", by_name["matrix"][1],
                f"{bad.size} rows not unit-norm (first: row {int(bad[0])})",
            )
    rowmap = np.frombuffer(by_name["rowmap"][0], dtype="<i4").reshape(rows, 2)
    n_entities = header.get("entities", 0)
    if rows and (rowmap[:, 0].min() < 0 or rowmap[:, 0].max() >= n_entities):
        report.add("rowmap", by_name["rowmap"][1], "entity index out of range")
    return report


# ---------------------------------------------------------------------------
# Latency benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchStats:
    reps: int
    threads: int
    p50_ns: int = 0
    p95_ns: int = 0
    mean_ns: float = 0.0
    wall_s: float = 0.0
    qps: float = 0.0

    def to_json(self) -> dict:
        return {
            "reps": self.reps,
            "threads": self.threads,
            "p50_ms": self.p50_ns / 1e6,
            "p95_ms": self.p95_ns / 1e6,
            "mean_ms": self.mean_ns / 1e6,
            "wall_s": self.wall_s,
            "qps": self.qps,
        }


def bench_query(
    shard: IndexShard,
    query_vectors: np.ndarray,
    reps: int,
    threads: int = 1,
    k: int = 10,
    n_probe: int | None = None,
) -> BenchStats:
    """Wall-clock the full query path (normalize, scan/probe, per-entity
    max, top-k) over ``reps`` queries spread across ``threads`` workers."""
    if reps == 0:
        return BenchStats(reps=0, threads=threads)
    qn = query_vectors.shape[0]
    picks = [query_vectors[i % qn] for i in range(reps)]
    use_ivf = shard.mode == "ivf" and n_probe is not None

    def run_one(vec: np.ndarray) -> int:
        if use_ivf:
            return query_ivf(shard, vec, k, n_probe).latency_ns
        return query(shard, vec, k).latency_ns

    # cap BLAS to one thread per worker so `threads` measures our own
    # parallelism rather than the library's internal pool
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional speed-measurement aid
        from contextlib import nullcontext

        def threadpool_limits(_n):
            return nullcontext()

    with threadpool_limits(1):
        # warm the cache lines once before timing
        run_one(picks[0])
        t0 = time.perf_counter()
        if threads <= 1:
            latencies = [run_one(v) for v in picks]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                latencies = list(pool.map(run_one, picks))
        wall = time.perf_counter() - t0
    lat = np.array(latencies, dtype=np.int64)
    return BenchStats(
        reps=reps,
        threads=threads,
        p50_ns=int(np.percentile(lat, 50)),
        p95_ns=int(np.percentile(lat, 95)),
        mean_ns=float(lat.mean()),
        wall_s=wall,
        qps=reps / wall if wall > 0 else 0.0,
    )
