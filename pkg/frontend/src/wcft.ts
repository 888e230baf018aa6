/** WCFT store writer.
 *
 * Layout (all integers little-endian u32 unless noted):
 *   magic "WCFT" | version | d | dT | nTMax
 *   per record: payload_len | payload | crc32(payload)
 *   payload: id_len | id utf8 | valid_len | token_rows | f32 tokens
 *            | image_count | per image: n_patches | f32 patches | f32 pooled
 *
 * A JSON manifest sidecar (offsets + per-record CRCs) and a checksum
 * sidecar (per-tensor CRCs, for reader round-trip verification) are
 * written next to the binary.
 */

import { writeFileSync } from "node:fs";

import { crc32 } from "./crc32.js";

export interface ImageTensors {
  patches: Float64Array; // nPatches x d row-major
  nPatches: number;
  pooled: Float64Array; // length d
}

export interface EntityRecord {
  entityId: string;
  tokens: Float64Array; // rows x dT row-major
  tokenRows: number;
  validLen: number;
  images: ImageTensors[];
}

export interface StoreDims {
  d: number;
  dT: number;
  nTMax: number;
}

function f32Bytes(values: Float64Array): Uint8Array {
  const buf = new ArrayBuffer(values.length * 4);
  const view = new DataView(buf);
  for (let i = 0; i < values.length; i++) {
    view.setFloat32(i * 4, values[i], true);
  }
  return new Uint8Array(buf);
}

function u32(value: number): Uint8Array {
  const buf = new ArrayBuffer(4);
  new DataView(buf).setUint32(0, value >>> 0, true);
  return new Uint8Array(buf);
}

function concat(parts: Uint8Array[]): Uint8Array {
  const total = parts.reduce((n, p) => n + p.length, 0);
  const out = new Uint8Array(total);
  let off = 0;
  for (const p of parts) {
    out.set(p, off);
    off += p.length;
  }
  return out;
}

export function encodeRecord(rec: EntityRecord): Uint8Array {
  const id = new TextEncoder().encode(rec.entityId);
  const parts: Uint8Array[] = [
    u32(id.length),
    id,
    u32(rec.validLen),
    u32(rec.tokenRows),
    f32Bytes(rec.tokens),
    u32(rec.images.length),
  ];
  for (const img of rec.images) {
    parts.push(u32(img.nPatches), f32Bytes(img.patches), f32Bytes(img.pooled));
  }
  return concat(parts);
}

export interface TensorChecksums {
  tokens: number;
  patches: number[];
  pooled: number[];
}

export function tensorChecksums(rec: EntityRecord): TensorChecksums {
  return {
    tokens: crc32(f32Bytes(rec.tokens)),
    patches: rec.images.map((img) => crc32(f32Bytes(img.patches))),
    pooled: rec.images.map((img) => crc32(f32Bytes(img.pooled))),
  };
}

export interface WriteResult {
  entityCount: number;
  bytes: number;
}

export function writeStore(
  records: EntityRecord[],
  dims: StoreDims,
  path: string,
): WriteResult {
  const header = concat([
    new TextEncoder().encode("WCFT"),
    u32(1),
    u32(dims.d),
    u32(dims.dT),
    u32(dims.nTMax),
  ]);
  const chunks: Uint8Array[] = [header];
  const manifestRecords: object[] = [];
  const checksums: Record<string, TensorChecksums> = {};
  let offset = header.length;
  for (const rec of records) {
    const payload = encodeRecord(rec);
    const crc = crc32(payload);
    chunks.push(u32(payload.length), payload, u32(crc));
    manifestRecords.push({
      entity_id: rec.entityId,
      offset,
      length: payload.length,
      crc32: crc,
    });
    checksums[rec.entityId] = tensorChecksums(rec);
    offset += 8 + payload.length;
  }
  const blob = concat(chunks);
  writeFileSync(path, blob);

  const manifest = {
    format: "WCFT",
    version: 1,
    d: dims.d,
    d_t: dims.dT,
    n_t_max: dims.nTMax,
    entity_count: records.length,
    records: manifestRecords,
  };
  writeFileSync(`${path}.manifest.json`, JSON.stringify(manifest, null, 2) + "\n");
  writeFileSync(`${path}.checksums.json`, JSON.stringify(checksums, null, 2) + "\n");
  return { entityCount: records.length, bytes: blob.length };
}

export interface QueryRow {
  queryId: string;
  vector: Float64Array;
  entityId: string;
  split: string;
}

/** JSON-lines query set with base64-embedded little-endian f32 vectors. */
export function writeQueries(rows: QueryRow[], path: string): void {
  const lines = rows.map((r) =>
    JSON.stringify({
      query_id: r.queryId,
      vector: Buffer.from(f32Bytes(r.vector)).toString("base64"),
      entity_id: r.entityId,
      split: r.split,
    }),
  );
  writeFileSync(path, lines.join("\n") + (lines.length ? "\n" : ""));
}
