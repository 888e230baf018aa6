/** CLI: feature-export --manifest entities.jsonl --out store.wcft [dims]. */

import { parseArgs } from "node:util";

import { readManifest } from "./manifest.js";
import { runExport } from "./export.js";
import { PooledMode } from "./vision.js";

function usage(): never {
  process.stderr.write(
    "usage: feature-export --manifest <jsonl> --out <store.wcft> " +
      "[--d 64] [--d-t 96] [--n-p 16] [--n-t-max 32] [--seed 0] " +
      "[--pooled-mode mean|cls]\n",
  );
  process.exit(1);
}

export function main(argv: string[]): number {
  let parsed;
  try {
    parsed = parseArgs({
      args: argv,
      options: {
        manifest: { type: "string" },
        out: { type: "string" },
        d: { type: "string", default: "64" },
        "d-t": { type: "string", default: "96" },
        "n-p": { type: "string", default: "16" },
        "n-t-max": { type: "string", default: "32" },
        seed: { type: "string", default: "0" },
        "pooled-mode": { type: "string", default: "mean" },
      },
    });
  } catch (err) {
    process.stderr.write(`${err}\n`);
    usage();
  }
  const v = parsed.values;
  if (!v.manifest || !v.out) usage();
  const pooledMode = v["pooled-mode"];
  if (pooledMode !== "mean" && pooledMode !== "cls") usage();

  const entries = readManifest(v.manifest);
  const report = runExport({
    entries,
    d: Number(v.d),
    dT: Number(v["d-t"]),
    nP: Number(v["n-p"]),
    nTMax: Number(v["n-t-max"]),
    seed: Number(v.seed),
    pooledMode: pooledMode as PooledMode,
    outPath: v.out,
    log: (m) => process.stderr.write(m + "\n"),
  });
  process.stdout.write(
    JSON.stringify({
      command: "export",
      seed: Number(v.seed),
      pooled_mode: pooledMode,
      exported: report.exported,
      skipped: report.skipped,
      store: report.storePath,
      queries: report.queriesPath,
    }) + "\n",
  );
  return 0;
}

main(process.argv.slice(2));
