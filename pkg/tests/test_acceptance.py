"""Acceptance suite: every release criterion as one test, at its stated
tolerance. Ordered roughly cheap-to-expensive; the planted-recovery and
latency criteria dominate the runtime.
"""

import json
import math
import shutil
import subprocess
import time
import zlib
from pathlib import Path

import numpy as np
import psutil
import pytest

from ver_engine.adaptor import AdaptorConfig, init_params
from ver_engine.batching import select_hard_negatives
from ver_engine.cli import main as cli_main
from ver_engine.evalbench import (
    SynthSpec,
    bundle_features,
    compare_full_vs_vanilla,
    desk_confusable_config,
    desk_recovery_config,
    embed_bundles,
    eval_retrieval,
    gen_synthetic_kb,
    harmonic_mean,
    pooled_nn_top1,
)
from ver_engine.gradcheck import check_full_objective
from ver_engine.index import (
    bench_query,
    build_ivf,
    build_shard,
    load_index,
    query,
    query_ivf,
    save_index,
    validate_index,
)
from ver_engine.store import FeatureStore, validate_store, write_store
from ver_engine.training import infonce_loss, train

from reference_impl import ref_infonce
from test_batching import exhaustive_selection_oracle

PHYSICAL_CORES = psutil.cpu_count(logical=False) or 1


def unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return (m / np.linalg.norm(m, axis=1, keepdims=True)).astype(np.float32)


def test_criterion_01_gradient_suite():
    """Full-objective analytic gradients vs central finite differences at
    double precision: B=3, D=8, D_t=12, N_p=2, N_t=4, 1 head, 2 layers."""
    t0 = time.perf_counter()
    report = check_full_objective(
        tolerance=1e-4, batch=3, d=8, d_t=12, n_p=2, n_t=4, heads=1, layers=2
    )
    elapsed = time.perf_counter() - t0
    worst = report.worst()
    print(f"\n[criterion 1] worst rel err {worst:.3e} over {len(report.results)} "
          f"tensors in {elapsed:.1f}s")
    assert report.ok, f"worst relative error {worst:.3e} > 1e-4"
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s (budget 60s)"


def test_criterion_02_loss_oracle():
    """InfoNCE equals an independent direct softmax cross-entropy within
    1e-9 (double) on 100 random instances; uniform logits give ln(B)."""
    rng = np.random.default_rng(20)
    worst = 0.0
    for _ in range(100):
        b = int(rng.integers(2, 9))
        d = int(rng.integers(3, 12))
        h = [unit_rows(rng, 1, d)[0].astype(np.float64) for _ in range(b)]
        pos = [unit_rows(rng, 1, d)[0].astype(np.float64) for _ in range(b)]
        negs = [
            [unit_rows(rng, 1, d)[0].astype(np.float64) for _ in range(b - 1)]
            for _ in range(b)
        ]
        tau = float(rng.uniform(0.03, 1.5))
        loss, *_ = infonce_loss(h, pos, negs, tau)
        worst = max(worst, abs(loss - ref_infonce(h, pos, negs, tau)))
    assert worst <= 1e-9, f"worst |delta| {worst:.2e}"

    for b in (2, 5, 16, 128):
        h = [np.array([1.0, 0.0])] * b
        same = [np.array([0.0, 1.0])] * b
        loss, *_ = infonce_loss(h, same, [[same[0]] * (b - 1)] * b, tau=0.07)
        assert abs(loss - math.log(b)) <= 1e-9
    print(f"\n[criterion 2] worst oracle delta {worst:.2e}; ln(B) anchors exact")


def test_criterion_03_hard_negative_invariants():
    """1000 random selection instances: replaced slots strictly increase
    similarity, count preserved, substituted loss >= vanilla loss; greedy
    equals the exhaustive-pattern oracle for B <= 6, n_sync <= 3."""
    rng = np.random.default_rng(30)
    oracle_checked = 0
    for trial in range(1000):
        b = int(rng.integers(2, 7))
        n_syn = int(rng.integers(0, 4))
        d = 8
        h = unit_rows(rng, 1, d)[0]
        pos = unit_rows(rng, 1, d)[0]
        originals = [(j, unit_rows(rng, 1, d)[0]) for j in range(b - 1)]
        synths = [unit_rows(rng, 1, d)[0] for _ in range(n_syn)]
        sel = select_hard_negatives(h, originals, synths)

        assert len(sel.slots) == b - 1
        orig_sims = [float(np.dot(h, v)) for _, v in originals]
        for slot, before in zip(sel.slots, orig_sims):
            assert slot.sim >= before
        for rep in sel.replacements:
            assert rep["new_sim"] > rep["old_sim"]

        final_vecs = [
            dict(originals)[s.index] if s.kind == "orig" else synths[s.index]
            for s in sel.slots
        ]
        base, *_ = infonce_loss([h], [pos], [[v for _, v in originals]], 0.1)
        harder, *_ = infonce_loss([h], [pos], [final_vecs], 0.1)
        assert harder >= base - 1e-12

        synth_sims = [float(np.dot(h, v)) for v in synths]
        best_final, best_slots = exhaustive_selection_oracle(orig_sims, synth_sims)
        assert np.allclose(sorted(s.sim for s in sel.slots), best_final, atol=1e-12)
        assert frozenset(r["slot"] for r in sel.replacements) == best_slots
        oracle_checked += 1
    print(f"\n[criterion 3] 1000 instances pass; exhaustive oracle on {oracle_checked}")


def test_criterion_04_metric_anchors():
    """Harmonic-mean arithmetic anchors from the reported results table."""
    a = harmonic_mean(36.8, 27.0)
    b = harmonic_mean(61.5, 21.7)
    print(f"\n[criterion 4] hm(36.8, 27.0)={a:.3f}  hm(61.5, 21.7)={b:.3f}")
    assert abs(a - 31.1) <= 0.05
    assert abs(b - 32.1) <= 0.05


@pytest.mark.parametrize("seed", [7, 11, 13])
def test_criterion_05_planted_recovery(tmp_path, seed):
    """End-to-end planted-signal recovery through store round trip, one
    training epoch, and index-based evaluation. Thresholds: seen >= 0.85,
    unseen >= 0.50 (chance ~ 0.004); untrained adaptor <= 0.05 on both."""
    t0 = time.perf_counter()
    spec = SynthSpec.desk_recovery(seed)
    bundles, train_q, eval_q = gen_synthetic_kb(spec)

    # full persistence round trip: the trainer consumes the on-disk store
    store_path = tmp_path / "store.wcft"
    write_store(bundles, store_path, n_t_max=spec.n_t)
    with FeatureStore(store_path) as fs:
        stored = list(fs.iter_entities())
    features = bundle_features(stored)

    dims = AdaptorConfig(d_t=spec.d_t, d=spec.d)
    untrained = init_params(seed, dims)
    rep0 = eval_retrieval(embed_bundles(stored, untrained), eval_q, ks=(1,))
    assert rep0.top1_seen <= 0.05 and rep0.top1_unseen <= 0.05, (
        f"untrained adaptor above chance band: {rep0.top1_seen:.3f}/{rep0.top1_unseen:.3f}"
    )

    params = init_params(seed, dims)
    config = desk_recovery_config(seed)
    qv = np.stack([r.vector for r in train_q.records])
    qids = [r.entity_id for r in train_q.records]
    train(features, qv, qids, params, config)

    shard = embed_bundles(stored, params)
    rep = eval_retrieval(shard, eval_q, ks=(1,))
    elapsed = time.perf_counter() - t0
    print(f"\n[criterion 5 seed={seed}] untrained {rep0.top1_seen:.3f}/"
          f"{rep0.top1_unseen:.3f} -> trained seen={rep.top1_seen:.3f} "
          f"unseen={rep.top1_unseen:.3f} in {elapsed:.0f}s")
    assert elapsed <= 600.0, f"run took {elapsed:.0f}s (budget 10 min)"
    assert rep.top1_seen >= 0.85, f"seen top-1 {rep.top1_seen:.3f} < 0.85"
    assert rep.top1_unseen >= 0.50, f"unseen top-1 {rep.top1_unseen:.3f} < 0.50"


def test_criterion_06_ablation_direction():
    """Confusable-pairs spec: the full method (cluster + synthetic) beats
    vanilla in-batch InfoNCE on top-1 and eval-set silhouette in >= 4 of 5
    seeds. The comparison table is emitted regardless of the outcome."""
    spec = SynthSpec.desk_confusable(0)
    assert pooled_nn_top1(*_confusable_baseline(spec)) <= 0.55
    seeds = [0, 1, 2, 3, 4]
    report = compare_full_vs_vanilla(spec, desk_confusable_config(0), seeds)
    print("\n[criterion 6] full vs vanilla on confusable pairs")
    print(f"{'seed':>4s}  {'config':12s}  {'top1':>6s}  {'silhouette':>10s}")
    for row in report.rows:
        print(f"{row.seed:>4d}  {row.name:12s}  {row.top1_overall:>6.3f}  "
              f"{row.silhouette:>10.4f}")
    print(f"top-1 wins {report.top1_wins}/{report.n_seeds}, "
          f"silhouette wins {report.silhouette_wins}/{report.n_seeds}")
    assert report.top1_wins >= 4, f"top-1 wins {report.top1_wins}/5"
    assert report.silhouette_wins >= 4, f"silhouette wins {report.silhouette_wins}/5"


def _confusable_baseline(spec):
    bundles, _, eval_q = gen_synthetic_kb(spec)
    return bundles, eval_q


def test_criterion_07_retrieval_exactness():
    """Exact scan equals the brute-force double-loop oracle on 200 queries
    over a 10k-row index; per-entity max verified per entity; IVF at full
    probing is identical and at n_lists/8 probes reaches recall@1 >= 0.95."""
    rng = np.random.default_rng(70)
    d = 32
    centers = unit_rows(rng, 48, d)
    spread = 0.2
    rows = []
    e = 0
    while len(rows) < 10_000:
        c = centers[e % len(centers)]
        n_img = int(rng.integers(1, 4))
        for img in range(n_img):
            v = c + spread * rng.standard_normal(d)
            rows.append((f"ent-{e:05d}", img, (v / np.linalg.norm(v)).astype(np.float32)))
        e += 1
    rows = rows[:10_000]
    shard = build_shard(rows)
    assert shard.n_rows == 10_000

    worst = 0.0
    for t in range(200):
        h = rng.standard_normal(d)
        got = query(shard, h, k=10)
        hn = (h / np.linalg.norm(h)).astype(np.float32)
        best: dict[str, tuple[float, int]] = {}
        for r in range(shard.n_rows):
            eid = shard.entity_ids[int(shard.row_entity[r])]
            s = float(np.dot(shard.matrix[r], hn))
            if eid not in best or s > best[eid][0]:
                best[eid] = (s, int(shard.row_image[r]))
        ranked = sorted(best.items(), key=lambda kv: (-kv[1][0], kv[0]))[:10]
        assert [g[0] for g in got.entries] == [e for e, _ in ranked]
        worst = max(worst, max(abs(g[1] - s[0]) for g, (_, s) in zip(got.entries, ranked)))
        for (eid, score, _img) in got.entries:
            assert score >= max(
                sim for e2, (sim, _) in best.items() if e2 == eid
            ) - 1e-6  # per-entity max dominates each single image
    assert worst <= 1e-6, f"score deviation {worst:.2e}"

    ivf = build_ivf(shard, n_lists=64, seed=1)
    for t in range(25):
        h = rng.standard_normal(d)
        exact = query(shard, h, k=10)
        full = query_ivf(ivf, h, k=10, n_probe=64)
        assert exact.entries == full.entries

    hits = 0
    for t in range(200):
        c = centers[int(rng.integers(len(centers)))]
        h = c + spread * rng.standard_normal(d)
        exact_top = query(shard, h, k=1).entries[0][0]
        approx_top = query_ivf(ivf, h, k=1, n_probe=8).entries[0][0]
        hits += exact_top == approx_top
    recall = hits / 200
    print(f"\n[criterion 7] oracle max score dev {worst:.1e}; "
          f"ivf recall@1 at n_probe=8: {recall:.3f}")
    assert recall >= 0.95


def test_criterion_08_persistence(tmp_path):
    """WCFT and WCIX round-trips are bit-identical; 100 random single-byte
    flips per format are all rejected with located errors."""
    rng = np.random.default_rng(80)
    spec = SynthSpec(n_entities=16, n_seen=8, queries_per_entity=1, d=16, d_t=24,
                     n_p=4, n_t=8, images_per_entity=2, seed=3)
    bundles, _, _ = gen_synthetic_kb(spec)
    store_a = tmp_path / "a.wcft"
    store_b = tmp_path / "b.wcft"
    write_store(bundles, store_a, n_t_max=8)
    write_store(bundles, store_b, n_t_max=8)
    assert store_a.read_bytes() == store_b.read_bytes()
    assert validate_store(store_a).ok

    shard = build_ivf(
        build_shard([
            (f"e{r:04d}", 0, unit_rows(rng, 1, 16)[0]) for r in range(300)
        ]),
        n_lists=8, seed=0,
    )
    idx_a, idx_b = tmp_path / "a.wcix", tmp_path / "b.wcix"
    save_index(shard, idx_a)
    save_index(load_index(idx_a), idx_b)
    assert idx_a.read_bytes() == idx_b.read_bytes()
    assert validate_index(idx_a).ok

    for path, validator in ((store_a, validate_store), (idx_a, validate_index)):
        clean = path.read_bytes()
        for flip in range(100):
            raw = bytearray(clean)
            pos = int(rng.integers(len(raw)))
            raw[pos] ^= int(rng.integers(1, 256))
            path.write_bytes(bytes(raw))
            report = validator(path)
            assert not report.ok, f"{path.name}: flip at byte {pos} undetected"
            finding = report.findings[0]
            assert finding.message and finding.record_id is not None
        path.write_bytes(clean)
        assert validator(path).ok
    print("\n[criterion 8] round-trips bit-identical; 200/200 flips rejected")


def _latency_shard():
    rng = np.random.default_rng(90)
    d = 256
    block = 10_000
    rows = []
    e = 0
    for start in range(0, 100_000, block):
        mat = rng.standard_normal((block, d)).astype(np.float32)
        mat /= np.linalg.norm(mat, axis=1, keepdims=True)
        for i in range(0, block, 2):  # two images per entity
            rows.append((f"ent-{e:06d}", 0, mat[i]))
            rows.append((f"ent-{e:06d}", 1, mat[i + 1]))
            e += 1
    return build_shard(rows), unit_rows(rng, 32, d)


def test_criterion_09a_latency_target():
    """Bench over a 100k-row, D=256 index: p50 <= 100 ms per query."""
    shard, queries = _latency_shard()
    single = bench_query(shard, queries, reps=40, threads=1, k=10)
    print(f"\n[criterion 9a] p50={single.p50_ns / 1e6:.2f}ms "
          f"p95={single.p95_ns / 1e6:.2f}ms mean={single.mean_ns / 1e6:.2f}ms "
          f"qps={single.qps:.0f}")
    assert single.p50_ns <= 100e6, f"p50 {single.p50_ns / 1e6:.1f}ms > 100ms"


def test_criterion_09b_thread_scaling():
    """>= 3x throughput from 1 -> 8 threads; the clause presumes an 8-core
    host, so on smaller machines the measured scaling is reported and the
    assertion is skipped."""
    shard, queries = _latency_shard()
    single = bench_query(shard, queries, reps=40, threads=1, k=10)
    eight = bench_query(shard, queries, reps=80, threads=8, k=10)
    scaling = eight.qps / single.qps if single.qps else 0.0
    print(f"\n[criterion 9b] qps 1T={single.qps:.0f} 8T={eight.qps:.0f} "
          f"scaling={scaling:.2f}x on {PHYSICAL_CORES} physical cores")
    if PHYSICAL_CORES < 8:
        pytest.skip(
            f"thread-scaling clause needs 8 physical cores, host has "
            f"{PHYSICAL_CORES}; measured {scaling:.2f}x"
        )
    assert scaling >= 3.0, f"throughput scaling {scaling:.2f}x < 3x"


def test_criterion_10_determinism(tmp_path):
    """CLI train twice with one seed/thread count gives bit-identical
    checkpoints; embed-kb serial vs parallel gives bit-identical shards."""
    spec_file = tmp_path / "spec.toml"
    spec_file.write_text(
        "n_entities = 20\nn_seen = 10\nqueries_per_entity = 4\nd = 16\nd_t = 24\n"
        "n_p = 4\nn_t = 8\neval_queries_per_entity = 2\nseed = 9\n"
    )
    kb = tmp_path / "kb"
    assert cli_main(["gen-synth", "--spec", str(spec_file), "--out", str(kb)]) == 0

    ckpts = []
    for name in ("c1.wkck", "c2.wkck"):
        code = cli_main([
            "train", "--store", str(kb),
            "--queries", str(kb / "train_queries.jsonl"),
            "--out", str(tmp_path / name),
            "--batch-size", "8", "--n-sync", "3", "--heads", "4",
            "--seed", "9", "--threads", "1",
        ])
        assert code == 0
        ckpts.append((tmp_path / name).read_bytes())
    assert ckpts[0] == ckpts[1], "checkpoints differ between identical runs"

    shards = []
    for name, threads in (("s1.wcix", "1"), ("s4.wcix", "4")):
        code = cli_main([
            "embed-kb", "--store", str(kb), "--ckpt", str(tmp_path / "c1.wkck"),
            "--out", str(tmp_path / name), "--threads", threads,
        ])
        assert code == 0
        shards.append((tmp_path / name).read_bytes())
    assert shards[0] == shards[1], "parallel embed differs from serial"
    print("\n[criterion 10] train and embed-kb runs bit-identical")


# ---------------------------------------------------------------------------
# Secondary component: the offline feature-export adapter
# ---------------------------------------------------------------------------

FRONTEND_CLI = Path(__file__).resolve().parents[1] / "frontend" / "dist" / "cli.js"

requires_exporter = pytest.mark.skipif(
    shutil.which("node") is None or not FRONTEND_CLI.exists(),
    reason="feature-export adapter not built (run `npm install && npm run build` "
    "in frontend/)",
)


def _block_png(path, rng):
    """64x64 image of random 16-px colour blocks (one block per encoder
    patch at the 4x4 grid), so images are visually distinctive."""
    from PIL import Image

    blocks = rng.integers(0, 256, size=(4, 4, 3), dtype=np.uint8)
    img = np.repeat(np.repeat(blocks, 16, axis=0), 16, axis=1)
    Image.fromarray(img, "RGB").save(path)


WORDS = (
    "amber basalt cedar delta ember fjord granite harbor iris juniper krill "
    "lumen marble nectar onyx prairie quartz reef sierra tundra umber vale "
    "willow xenon yarrow zephyr"
).split()


@requires_exporter
def test_criterion_11_export_roundtrip(tmp_path):
    """Exported store validates with zero findings; tensors round-trip with
    matching sidecar checksums; a 20-entity export -> embed-kb -> query run
    returns each entity's own primary image when queried with its own
    pooled vector."""
    rng = np.random.default_rng(110)
    lines = []
    for e in range(20):
        imgs = []
        for i in range(2):  # image 0 is the primary
            p = tmp_path / f"ent{e:02d}-img{i}.png"
            _block_png(p, rng)
            imgs.append(str(p))
        words = rng.choice(WORDS, size=8, replace=False)
        desc = f"Entity {e}: " + " ".join(words) + f" variant {e}"
        lines.append(json.dumps({
            "entity_id": f"ent-{e:03d}", "images": imgs,
            "description": desc, "split": "seen" if e < 12 else "unseen",
        }))
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")

    store_path = tmp_path / "real.wcft"
    proc = subprocess.run(
        ["node", str(FRONTEND_CLI), "--manifest", str(manifest),
         "--out", str(store_path), "--d", "64", "--d-t", "96", "--n-p", "16",
         "--n-t-max", "32", "--seed", "7", "--pooled-mode", "mean"],
        capture_output=True, text=True, timeout=300,
    )
    assert proc.returncode == 0, proc.stderr
    head = json.loads(proc.stdout.splitlines()[0])
    assert head["exported"] == 20 and head["skipped"] == []

    report = validate_store(store_path)
    assert report.ok, f"validator findings: {[f.message for f in report.findings]}"

    sidecar = json.loads((tmp_path / "real.wcft.checksums.json").read_text())
    with FeatureStore(store_path) as fs:
        assert len(fs.entity_ids) == 20
        for eid in fs.entity_ids:
            bundle = fs.read_entity(eid)
            expect = sidecar[eid]
            toks = np.ascontiguousarray(bundle.description_tokens.tokens, dtype="<f4")
            assert zlib.crc32(toks.tobytes()) == expect["tokens"]
            for i, (img, pooled) in enumerate(
                zip(bundle.image_features, bundle.pooled_image_vectors)
            ):
                patches = np.ascontiguousarray(img.patches, dtype="<f4")
                assert zlib.crc32(patches.tobytes()) == expect["patches"][i]
                pooled_b = np.ascontiguousarray(pooled, dtype="<f4")
                assert zlib.crc32(pooled_b.tobytes()) == expect["pooled"][i]

    # mini end-to-end: init checkpoint, embed all images, self-query
    ckpt = tmp_path / "init.wkck"
    from ver_engine.adaptor import save_checkpoint

    save_checkpoint(init_params(7, AdaptorConfig(d_t=96, d=64)), ckpt,
                    metadata={"seed": 7})
    index_path = tmp_path / "real.wcix"
    assert cli_main(["embed-kb", "--store", str(store_path), "--ckpt", str(ckpt),
                     "--out", str(index_path), "--threads", "1"]) == 0
    shard = load_index(index_path)
    assert shard.n_rows == 40

    hits = 0
    primary_hits = 0
    with FeatureStore(store_path) as fs:
        for eid in fs.entity_ids:
            pooled = fs.read_entity(eid).pooled_image_vectors[0]
            top = query(shard, pooled, k=1).entries[0]
            hits += top[0] == eid
            primary_hits += top[0] == eid and top[2] == 0
    print(f"\n[criterion 11] exported store valid; self-retrieval {hits}/20, "
          f"primary-image attribution {primary_hits}/20")
    assert hits == 20, f"self-retrieval only {hits}/20"
    assert primary_hits == 20, f"primary image attribution only {primary_hits}/20"
