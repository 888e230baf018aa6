"""Command-line interface: generate, train, embed, index, query, evaluate,
benchmark, gradient-check, validate.

Exit codes: 0 ok, 1 usage, 2 validation failure, 3 runtime error. Errors go
to stderr as single-line JSON. Stdout carries one machine-readable JSON
line first, then human-readable tables; report paths also write JSON/CSV
files and PNG figures. Every command echoes its seed and is deterministic
given (seed, thread count).
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import click
import numpy as np
import psutil

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - 3.10 fallback
    import tomli as tomllib

from . import evalbench, gradcheck, index as index_mod, reporting, store as store_mod
from .adaptor import (
    AdaptorConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .errors import (
    ConfigError,
    EngineError,
    NotFoundError,
    ValidationFailure,
)
from .evalbench import SynthSpec
from .training import EntityFeatures, TrainConfig, train

THREADS_ENV = "VER_ENGINE_THREADS"


def resolve_threads(threads: int | None) -> int:
    """Flag wins, then the env var, then the physical core count."""
    import os

    if threads is not None and threads > 0:
        return threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            v = int(env)
            if v > 0:
                return v
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={env!r} is not a positive integer")
    return psutil.cpu_count(logical=False) or psutil.cpu_count() or 1


def _echo_machine(obj: dict) -> None:
    click.echo(json.dumps(obj, sort_keys=True))


def _read_config_file(path: Path) -> dict:
    if not path.exists():
        raise NotFoundError(f"config file not found: {path}")
    if path.suffix == ".json":
        with open(path) as f:
            return json.load(f)
    with open(path, "rb") as f:
        return tomllib.load(f)


def _dump_toml(values: dict, path: Path) -> None:
    lines = []
    for k, v in sorted(values.items()):
        if v is None:
            continue
        if isinstance(v, bool):
            lines.append(f"{k} = {'true' if v else 'false'}")
        elif isinstance(v, (int, float)):
            lines.append(f"{k} = {v}")
        else:
            lines.append(f'{k} = "{v}"')
    path.write_text("\n".join(lines) + "\n")


def _merge_config(ctx: click.Context, config_path: str | None, values: dict) -> dict:
    """Config file fills anything not set explicitly on the command line;
    unknown keys are rejected before any work happens."""
    if not config_path:
        return values
    file_vals = _read_config_file(Path(config_path))
    unknown = sorted(set(file_vals) - set(values))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = dict(values)
    for key, val in file_vals.items():
        src = ctx.get_parameter_source(key)
        if src is None or src.name != "COMMANDLINE":
            merged[key] = val
    return merged


def _resolve_store(path_arg: str) -> Path:
    p = Path(path_arg)
    if p.is_dir():
        candidate = p / "store.wcft"
        if not candidate.exists():
            raise NotFoundError(f"no store.wcft inside directory {p}")
        return candidate
    if not p.exists():
        raise NotFoundError(f"store not found: {p}")
    return p


def _load_features(fstore: store_mod.FeatureStore) -> dict[str, EntityFeatures]:
    out = {}
    for bundle in fstore.iter_entities():
        toks = bundle.description_tokens
        out[bundle.entity_id] = EntityFeatures(
            bundle.image_features[0].patches, toks.tokens, toks.valid_len
        )
    return out


@click.group()
def cli() -> None:
    """Entity-retrieval engine over precomputed encoder features."""


# ---------------------------------------------------------------------------
# gen-synth
# ---------------------------------------------------------------------------


@cli.command("gen-synth")
@click.option("--spec", "spec_path", required=True, help="SynthSpec TOML/JSON file")
@click.option("--out", "out_dir", required=True, help="output directory")
@click.option("--seed", type=int, default=None, help="override the spec seed")
def gen_synth(spec_path: str, out_dir: str, seed: int | None) -> None:
    """Generate a planted-signal store plus train/eval query sets."""
    spec_fields = {f.name for f in fields(SynthSpec)}
    raw = _read_config_file(Path(spec_path))
    unknown = sorted(set(raw) - spec_fields)
    if unknown:
        raise ConfigError(f"unknown spec keys: {', '.join(unknown)}")
    spec = SynthSpec(**raw)
    if seed is not None:
        spec = replace(spec, seed=seed)

    bundles, train_q, eval_q = evalbench.gen_synthetic_kb(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store_mod.write_store(bundles, out / "store.wcft", n_t_max=max(spec.n_t, 1))
    store_mod.save_queries(train_q, out / "train_queries.jsonl")
    store_mod.save_queries(eval_q, out / "eval_queries.jsonl")
    reporting.write_json(asdict(spec), out / "spec.json")
    _echo_machine(
        {
            "command": "gen-synth",
            "seed": spec.seed,
            "entities": spec.n_entities,
            "train_queries": len(train_q),
            "eval_queries": len(eval_q),
            "out": str(out),
        }
    )


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


@cli.command("train")
@click.option("--store", "store_path", required=True)
@click.option("--queries", "queries_path", required=True)
@click.option("--out", "ckpt_path", required=True)
@click.option("--config", "config_path", default=None, help="TOML/JSON defaults; flags win")
@click.option("--dump-config", "dump_config", default=None)
@click.option("--batch-size", type=int, default=128, show_default=True)
@click.option("--n-sync", type=int, default=8, show_default=True)
@click.option("--lr", type=float, default=1e-4, show_default=True)
@click.option("--epochs", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--cluster/--no-cluster", default=True, show_default=True)
@click.option("--synthetic/--no-synthetic", default=True, show_default=True)
@click.option("--detach-synthetics", is_flag=True, default=False)
@click.option("--modality", type=click.Choice(["both", "image_only", "text_only"]),
              default="both", show_default=True)
@click.option("--layers", type=int, default=2, show_default=True)
@click.option("--heads", type=int, default=16, show_default=True)
@click.option("--eval-queries", "eval_queries_path", default=None)
@click.option("--eval-interval", type=int, default=0, show_default=True)
@click.option("--patience", type=int, default=0, show_default=True)
@click.option("--report-dir", default=None, help="where to render figures and CSV")
@click.option("--threads", type=int, default=None)
@click.pass_context
def train_cmd(ctx: click.Context, **opts) -> None:
    """Contrastively train the adaptor on a store plus query set."""
    merged = _merge_config(
        ctx,
        opts.pop("config_path"),
        {
            k: v
            for k, v in opts.items()
            if k not in ("store_path", "queries_path", "ckpt_path",
                         "dump_config", "eval_queries_path", "report_dir", "threads")
        },
    )
    if opts["dump_config"]:
        _dump_toml(merged, Path(opts["dump_config"]))

    store_file = _resolve_store(opts["store_path"])
    with store_mod.FeatureStore(store_file) as fstore:
        features = _load_features(fstore)
        known = set(fstore.entity_ids)
        d, d_t = fstore.d, fstore.d_t
        bundles = list(fstore.iter_entities())
    queries = store_mod.load_queries(opts["queries_path"], known_ids=known)

    config = TrainConfig(
        batch_size=merged["batch_size"],
        n_sync=merged["n_sync"],
        lr=merged["lr"],
        epochs=merged["epochs"],
        seed=merged["seed"],
        cluster=merged["cluster"],
        synthetic=merged["synthetic"],
        detach_synthetics=merged["detach_synthetics"],
        modality=merged["modality"],
        eval_interval=merged["eval_interval"],
        early_stop_patience=merged["patience"],
    )
    dims = AdaptorConfig(d_t=d_t, d=d, layers=merged["layers"], heads=merged["heads"])
    params = init_params(config.seed, dims)

    eval_fn = None
    if opts["eval_queries_path"]:
        eval_set = store_mod.load_queries(opts["eval_queries_path"], known_ids=known)

        def eval_fn(p):  # noqa: F811 - intentional closure
            shard = evalbench.embed_bundles(bundles, p, modality=config.modality)
            return evalbench.eval_retrieval(shard, eval_set, ks=(1,)).top1_overall

    ckpt = Path(opts["ckpt_path"])
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log_path = ckpt.with_suffix(ckpt.suffix + ".log.jsonl")
    qvecs = np.stack([r.vector for r in queries.records])
    qids = [r.entity_id for r in queries.records]
    with open(log_path, "w") as log_file:

        def log_sink(row: dict) -> None:
            log_file.write(json.dumps(row) + "\n")

        result = train(
            features, qvecs, qids, params, config,
            eval_fn=eval_fn, log_sink=log_sink, dump_dir=ckpt.parent,
        )

    save_checkpoint(
        params,
        ckpt,
        opt_state=result.opt_state,
        metadata={"seed": config.seed, "train_config": merged,
                  "steps": len(result.history)},
    )
    if opts["report_dir"]:
        rdir = Path(opts["report_dir"])
        rdir.mkdir(parents=True, exist_ok=True)
        reporting.write_csv(result.history, rdir / "training_log.csv")
        reporting.plot_training_curves(result.history, rdir / "training_curves.png")

    final_loss = result.history[-1]["loss"] if result.history else None
    _echo_machine(
        {
            "command": "train",
            "seed": config.seed,
            "steps": len(result.history),
            "final_loss": final_loss,
            "best_metric": result.best_metric,
            "parameters": params.parameter_count(),
            "checkpoint": str(ckpt),
            "log": str(log_path),
        }
    )


# ---------------------------------------------------------------------------
# embed-kb / index
# ---------------------------------------------------------------------------


@cli.command("embed-kb")
@click.option("--store", "store_path", required=True)
@click.option("--ckpt", "ckpt_path", required=True)
@click.option("--out", "out_path", required=True)
@click.option("--threads", type=int, default=None)
@click.option("--all-images/--primary-only", default=True, show_default=True)
@click.option("--modality", type=click.Choice(["both", "image_only", "text_only"]),
              default="both", show_default=True)
@click.option("--resume/--no-resume", default=False, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def embed_kb_cmd(store_path, ckpt_path, out_path, threads, all_images, modality,
                 resume, seed) -> None:
    """Precompute one embedding per (entity, image) pair into a WCIX shard."""
    workers = resolve_threads(threads)
    store_file = _resolve_store(store_path)
    if not Path(ckpt_path).exists():
        raise NotFoundError(f"checkpoint not found: {ckpt_path}")
    params, _ = load_checkpoint(ckpt_path)

    part_path = Path(str(out_path) + ".part.npz")
    done_rows: list[tuple[str, int, np.ndarray]] = []
    skip_ids: set[str] = set()
    if resume and part_path.exists():
        part = np.load(part_path, allow_pickle=True)
        if str(part["store"]) == str(store_file) and str(part["ckpt"]) == str(ckpt_path):
            for eid, img, vec in zip(part["ids"], part["imgs"], part["vecs"]):
                done_rows.append((str(eid), int(img), np.asarray(vec, dtype=np.float32)))
                skip_ids.add(str(eid))

    with store_mod.FeatureStore(store_file) as fstore:
        progress_count = [0]

        def progress(_eid: str) -> None:
            progress_count[0] += 1
            if progress_count[0] % 256 == 0:
                click.echo(
                    f"embedded {progress_count[0]} entities", err=True
                )

        rows, report = index_mod.embed_kb(
            fstore, params, workers=workers, all_images=all_images,
            modality=modality, progress=progress, skip_ids=skip_ids or None,
        )
    rows = done_rows + rows
    shard = index_mod.build_shard(rows, seed=seed)
    index_mod.save_index(shard, out_path)
    if part_path.exists():
        part_path.unlink()
    for eid in report.skipped:
        click.echo(f"skipped degenerate entity {eid} (empty text)", err=True)
    _echo_machine(
        {
            "command": "embed-kb",
            "seed": seed,
            "threads": workers,
            "rows": shard.n_rows,
            "entities": shard.n_entities,
            "skipped": report.skipped,
            "parameters": params.parameter_count(),
            "out": str(out_path),
        }
    )


@cli.command("index")
@click.option("--in", "in_path", required=True)
@click.option("--out", "out_path", required=True)
@click.option("--mode", type=click.Choice(["exact", "ivf"]), default="exact",
              show_default=True)
@click.option("--n-lists", type=int, default=64, show_default=True)
@click.option("--n-probe", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def index_cmd(in_path, out_path, mode, n_lists, n_probe, seed) -> None:
    """Rebuild an index shard with different search options."""
    shard = index_mod.load_index(in_path)
    if mode == "ivf":
        shard = index_mod.build_ivf(shard, n_lists=n_lists, seed=seed)
        if not 1 <= n_probe <= n_lists:
            raise ConfigError(f"n_probe={n_probe} outside [1, {n_lists}]")
        shard.n_probe = n_probe
    else:
        shard = index_mod.IndexShard(
            matrix=shard.matrix,
            entity_ids=shard.entity_ids,
            row_entity=shard.row_entity,
            row_image=shard.row_image,
            seed=seed,
        )
    index_mod.save_index(shard, out_path)
    _echo_machine(
        {
            "command": "index",
            "seed": seed,
            "mode": mode,
            "n_lists": shard.n_lists,
            "n_probe": shard.n_probe,
            "rows": shard.n_rows,
            "out": str(out_path),
        }
    )


# ---------------------------------------------------------------------------
# query / eval / bench
# ---------------------------------------------------------------------------


def _parse_query_vec(arg: str) -> np.ndarray:
    try:
        is_file = Path(arg).exists()
    except OSError:  # inline vectors can exceed filename length limits
        is_file = False
    if is_file:
        with open(arg) as f:
            data = json.load(f)
        return np.asarray(data, dtype=np.float32)
    try:
        return np.asarray([float(x) for x in arg.split(",")], dtype=np.float32)
    except ValueError as exc:
        raise ConfigError(
            f"--query-vec must be a JSON file or comma-separated floats: {arg!r}"
        ) from exc


@cli.command("query")
@click.option("--index", "index_path", required=True)
@click.option("--query-vec", "query_vec", required=True,
              help="JSON file with a float array, or inline comma-separated floats")
@click.option("--k", type=int, default=10, show_default=True)
@click.option("--use-ivf/--exact", default=False, show_default=True)
@click.option("--n-probe", type=int, default=None)
@click.option("--seed", type=int, default=0, show_default=True)
def query_cmd(index_path, query_vec, k, use_ivf, n_probe, seed) -> None:
    """Retrieve the top-k entities for one query vector."""
    shard = index_mod.load_index(index_path)
    vec = _parse_query_vec(query_vec)
    if use_ivf:
        result = index_mod.query_ivf(shard, vec, k, n_probe)
    else:
        result = index_mod.query(shard, vec, k)
    out = {"command": "query", "seed": seed, "k": k}
    out.update(result.to_json())
    _echo_machine(out)


@cli.command("eval")
@click.option("--index", "index_path", required=True)
@click.option("--queries", "queries_path", required=True)
@click.option("--ks", default="1,5,10,20", show_default=True)
@click.option("--use-ivf/--exact", default=False, show_default=True)
@click.option("--n-probe", type=int, default=None)
@click.option("--report-dir", default=None)
@click.option("--seed", type=int, default=0, show_default=True)
def eval_cmd(index_path, queries_path, ks, use_ivf, n_probe, report_dir, seed) -> None:
    """Top-1 per split, harmonic mean, recall@K."""
    shard = index_mod.load_index(index_path)
    queries = store_mod.load_queries(queries_path, known_ids=set(shard.entity_ids))
    ks_list = [int(x) for x in ks.split(",") if x.strip()]
    report = evalbench.eval_retrieval(shard, queries, ks=ks_list,
                                      use_ivf=use_ivf, n_probe=n_probe)
    out = {"command": "eval", "seed": seed}
    out.update(report.to_json())
    _echo_machine(out)
    rows = [
        {"metric": "top1_seen", "value": report.top1_seen},
        {"metric": "top1_unseen", "value": report.top1_unseen},
        {"metric": "top1_overall", "value": report.top1_overall},
        {"metric": "hm", "value": report.hm},
    ] + [{"metric": f"recall@{k}", "value": v} for k, v in sorted(report.recall.items())]
    click.echo(reporting.format_table(rows))
    if report_dir:
        rdir = Path(report_dir)
        rdir.mkdir(parents=True, exist_ok=True)
        reporting.write_json(report.to_json(), rdir / "eval_report.json")
        reporting.write_csv(rows, rdir / "eval_report.csv")
        reporting.plot_recall_curve(report.recall, rdir / "recall_curve.png")


@cli.command("bench")
@click.option("--index", "index_path", required=True)
@click.option("--queries", "queries_path", required=True)
@click.option("--reps", type=int, default=100, show_default=True)
@click.option("--threads", type=int, default=None)
@click.option("--k", type=int, default=10, show_default=True)
@click.option("--use-ivf/--exact", default=False, show_default=True)
@click.option("--n-probe", type=int, default=None)
@click.option("--report-dir", default=None)
@click.option("--seed", type=int, default=0, show_default=True)
def bench_cmd(index_path, queries_path, reps, threads, k, use_ivf, n_probe,
              report_dir, seed) -> None:
    """Latency and throughput of the full query path over a warmed index."""
    shard = index_mod.load_index(index_path)
    queries = store_mod.load_queries(queries_path)
    qmat = np.stack([r.vector for r in queries.records])
    workers = resolve_threads(threads)
    stats = index_mod.bench_query(
        shard, qmat, reps=reps, threads=workers, k=k,
        n_probe=n_probe if use_ivf else None,
    )
    out = {"command": "bench", "seed": seed}
    out.update(stats.to_json())
    _echo_machine(out)
    if report_dir and reps > 0:
        rdir = Path(report_dir)
        rdir.mkdir(parents=True, exist_ok=True)
        reporting.write_json(out, rdir / "bench_stats.json")


@cli.command("gradcheck")
@click.option("--dims", type=click.Choice(["small"]), default="small", show_default=True)
@click.option("--tolerance", type=float, default=1e-4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def gradcheck_cmd(dims, tolerance, seed) -> None:
    """Finite-difference suite over the kernels and the full objective."""
    report = gradcheck.run_suite(tolerance=tolerance, seed=seed)
    _echo_machine(
        {
            "command": "gradcheck",
            "seed": seed,
            "ok": report.ok,
            "worst_rel_err": report.worst(),
            "checks": len(report.results),
        }
    )
    for r in report.results:
        status = "ok" if r.ok else "FAIL"
        click.echo(f"{status:4s} {r.name:28s} max_rel_err={r.max_rel_err:.3e}")
    if not report.ok:
        raise ValidationFailure(
            f"gradient check failed: worst relative error {report.worst():.3e}"
        )


@cli.command("validate")
@click.option("--store", "store_path", default=None)
@click.option("--index", "index_path", default=None)
@click.option("--seed", type=int, default=0, show_default=True)
def validate_cmd(store_path, index_path, seed) -> None:
    """Format validation of a store or index file."""
    if bool(store_path) == bool(index_path):
        raise click.UsageError("pass exactly one of --store or --index")
    if store_path:
        report = store_mod.validate_store(_resolve_store(store_path))
        target = str(store_path)
    else:
        if not Path(index_path).exists():
            raise NotFoundError(f"index file not found: {index_path}")
        report = index_mod.validate_index(index_path)
        target = str(index_path)
    out = {"command": "validate", "seed": seed, "target": target}
    out.update(report.to_json())
    _echo_machine(out)
    if not report.ok:
        raise ValidationFailure(
            f"{target}: {len(report.findings)} validation finding(s); "
            f"first: {report.findings[0].message}"
        )


@cli.command("ablate")
@click.option("--spec", "spec_path", required=True)
@click.option("--seeds", default="0,1,2,3,4", show_default=True)
@click.option("--batch-size", type=int, default=16, show_default=True)
@click.option("--n-sync", type=int, default=4, show_default=True)
@click.option("--lr", type=float, default=2e-3, show_default=True)
@click.option("--epochs", type=int, default=1, show_default=True)
@click.option("--out", "out_dir", default=None)
def ablate_cmd(spec_path, seeds, batch_size, n_sync, lr, epochs, out_dir) -> None:
    """Modality / training-strategy ablation grid on a synthetic spec."""
    spec_fields = {f.name for f in fields(SynthSpec)}
    raw = _read_config_file(Path(spec_path))
    unknown = sorted(set(raw) - spec_fields)
    if unknown:
        raise ConfigError(f"unknown spec keys: {', '.join(unknown)}")
    spec = SynthSpec(**raw)
    seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    config = TrainConfig(batch_size=batch_size, n_sync=n_sync, lr=lr, epochs=epochs)
    rows = evalbench.ablation_run(spec, config, seed_list)
    row_dicts = [r.to_json() for r in rows]
    _echo_machine(
        {"command": "ablate", "seed": seed_list, "rows": len(row_dicts)}
    )
    click.echo(
        reporting.format_table(
            row_dicts,
            ["name", "seed", "top1_seen", "top1_unseen", "top1_overall", "silhouette"],
        )
    )
    if out_dir:
        odir = Path(out_dir)
        odir.mkdir(parents=True, exist_ok=True)
        reporting.write_json({"rows": row_dicts}, odir / "ablation.json")
        reporting.write_csv(row_dicts, odir / "ablation.csv")
        reporting.plot_ablation(row_dicts, odir / "ablation.png")


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:  # --help and friends
        return int(exc.exit_code)
    except click.UsageError as exc:
        _emit_error("usage", str(exc))
        return 1
    except EngineError as exc:
        _emit_error(type(exc).__name__, str(exc))
        return exc.exit_code
    except Exception as exc:  # pragma: no cover - last resort
        _emit_error(type(exc).__name__, str(exc))
        return 3


if __name__ == "__main__":
    sys.exit(main())
