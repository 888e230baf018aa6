/** Deterministic text encoder: whitespace/punctuation tokenization plus
 * hash-seeded per-token embeddings. Stands in for a frozen language model
 * in offline environments; every token always maps to the same vector. */

import { fnv1a, gaussian, mulberry32 } from "./rng.js";

export interface EncodedText {
  /** validLen x dT token embeddings, row-major. */
  tokens: Float64Array;
  rows: number;
  validLen: number;
}

export function tokenize(text: string): string[] {
  return text
    .toLowerCase()
    .split(/[^a-z0-9]+/)
    .filter((t) => t.length > 0);
}

export function tokenEmbedding(token: string, dT: number, seed: number): Float64Array {
  const next = gaussian(mulberry32(fnv1a(token) ^ (seed >>> 0)));
  const v = new Float64Array(dT);
  let norm = 0;
  for (let j = 0; j < dT; j++) {
    v[j] = next();
    norm += v[j] * v[j];
  }
  norm = Math.sqrt(norm);
  for (let j = 0; j < dT; j++) v[j] /= norm;
  return v;
}

/** Encode a description, truncating to nTMax tokens. Returns null when the
 * text yields no tokens (the caller skips and logs the entity). */
export function encodeText(
  text: string,
  dT: number,
  nTMax: number,
  seed: number,
): EncodedText | null {
  const toks = tokenize(text);
  if (toks.length === 0) return null;
  const rows = Math.min(toks.length, nTMax);
  const out = new Float64Array(rows * dT);
  for (let i = 0; i < rows; i++) {
    out.set(tokenEmbedding(toks[i], dT, seed), i * dT);
  }
  return { tokens: out, rows, validLen: rows };
}
