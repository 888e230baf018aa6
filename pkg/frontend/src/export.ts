/** Export pipeline: manifest in, WCFT store + query set + sidecars out.
 *
 * Raw (unprojected) token embeddings and patch features are exported; all
 * learnable computation stays engine-side. Entities whose image cannot be
 * read or whose description yields no tokens are skipped and logged.
 */

import { ManifestEntry } from "./manifest.js";
import { encodeText } from "./text.js";
import { EncodedImage, PooledMode, encodeImage, makeVisionEncoder } from "./vision.js";
import { EntityRecord, QueryRow, StoreDims, writeQueries, writeStore } from "./wcft.js";

export interface ExportJob {
  entries: ManifestEntry[];
  d: number;
  dT: number;
  nP: number;
  nTMax: number;
  seed: number;
  pooledMode: PooledMode;
  outPath: string;
  log?: (message: string) => void;
}

export interface ExportReport {
  exported: number;
  skipped: { entityId: string; reason: string }[];
  storePath: string;
  queriesPath: string;
}

export function runExport(job: ExportJob): ExportReport {
  const log = job.log ?? (() => undefined);
  const vision = makeVisionEncoder(job.d, job.nP, job.seed, job.pooledMode);
  const records: EntityRecord[] = [];
  const queries: QueryRow[] = [];
  const skipped: { entityId: string; reason: string }[] = [];

  for (const entry of job.entries) {
    const text = encodeText(entry.description, job.dT, job.nTMax, job.seed);
    if (text === null) {
      skipped.push({ entityId: entry.entityId, reason: "tokenization produced no tokens" });
      log(`skip ${entry.entityId}: tokenization produced no tokens`);
      continue;
    }
    const images: EncodedImage[] = [];
    let failure: string | null = null;
    for (const imagePath of entry.images) {
      try {
        images.push(encodeImage(vision, imagePath));
      } catch (err) {
        failure = `unreadable image ${imagePath}: ${err}`;
        break;
      }
    }
    if (failure !== null || images.length === 0) {
      skipped.push({ entityId: entry.entityId, reason: failure ?? "no images" });
      log(`skip ${entry.entityId}: ${failure ?? "no images"}`);
      continue;
    }
    records.push({
      entityId: entry.entityId,
      tokens: text.tokens,
      tokenRows: text.rows,
      validLen: text.validLen,
      images: images.map((img) => ({
        patches: img.patches,
        nPatches: job.nP,
        pooled: img.pooled,
      })),
    });
    queries.push({
      queryId: `pooled-${entry.entityId}`,
      vector: images[0].pooled,
      entityId: entry.entityId,
      split: entry.split,
    });
  }

  const dims: StoreDims = { d: job.d, dT: job.dT, nTMax: job.nTMax };
  writeStore(records, dims, job.outPath);
  const queriesPath = `${job.outPath}.queries.jsonl`;
  writeQueries(queries, queriesPath);
  return { exported: records.length, skipped, storePath: job.outPath, queriesPath };
}
