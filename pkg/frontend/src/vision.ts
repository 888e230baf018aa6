/** Deterministic vision encoder: per-patch colour/gradient statistics
 * pushed through a seeded random projection with a tanh nonlinearity.
 * Stands in for a frozen vision transformer in offline environments. */

import { readFileSync } from "node:fs";
import { PNG } from "pngjs";

import { gaussian, mulberry32 } from "./rng.js";

export type PooledMode = "mean" | "cls";

export interface EncodedImage {
  /** nP x d patch features, row-major. */
  patches: Float64Array;
  /** unit-norm pooled vector, length d. */
  pooled: Float64Array;
}

const STATS = 12; // per-patch descriptor length

// frozen vision backbones emit large-norm patch rows; the adaptor's
// residual stream keeps that scale while its normalized sublayers do not,
// so a realistic gain keeps raw features dominant under an untrained head
const FEATURE_GAIN = 10.0;

export interface VisionEncoder {
  d: number;
  nP: number;
  grid: number;
  pooledMode: PooledMode;
  projection: Float64Array; // d x STATS
}

export function makeVisionEncoder(
  d: number,
  nP: number,
  seed: number,
  pooledMode: PooledMode,
): VisionEncoder {
  const grid = Math.round(Math.sqrt(nP));
  if (grid * grid !== nP) {
    throw new Error(`patch count ${nP} must be a perfect square`);
  }
  const next = gaussian(mulberry32(seed >>> 0));
  const projection = new Float64Array(d * STATS);
  const scale = 2.0 / Math.sqrt(STATS);
  for (let i = 0; i < projection.length; i++) {
    projection[i] = next() * scale;
  }
  return { d, nP, grid, pooledMode, projection };
}

interface Region {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

function regionStats(png: PNG, r: Region, posR: number, posC: number): Float64Array {
  const sums = [0, 0, 0];
  const sq = [0, 0, 0];
  let gx = 0;
  let gy = 0;
  let n = 0;
  for (let y = r.y0; y < r.y1; y++) {
    for (let x = r.x0; x < r.x1; x++) {
      const i = (y * png.width + x) * 4;
      for (let c = 0; c < 3; c++) {
        const v = png.data[i + c] / 255;
        sums[c] += v;
        sq[c] += v * v;
      }
      const lum = (png.data[i] + png.data[i + 1] + png.data[i + 2]) / (3 * 255);
      if (x + 1 < r.x1) {
        const j = (y * png.width + x + 1) * 4;
        const lum2 = (png.data[j] + png.data[j + 1] + png.data[j + 2]) / (3 * 255);
        gx += Math.abs(lum2 - lum);
      }
      if (y + 1 < r.y1) {
        const j = ((y + 1) * png.width + x) * 4;
        const lum2 = (png.data[j] + png.data[j + 1] + png.data[j + 2]) / (3 * 255);
        gy += Math.abs(lum2 - lum);
      }
      n++;
    }
  }
  const mean = sums.map((s) => s / n);
  const stats = new Float64Array(STATS);
  for (let c = 0; c < 3; c++) {
    stats[c] = mean[c] * 2 - 1;
    stats[3 + c] = Math.sqrt(Math.max(0, sq[c] / n - mean[c] * mean[c])) * 4 - 1;
  }
  const lumMean = (mean[0] + mean[1] + mean[2]) / 3;
  stats[6] = lumMean * 2 - 1;
  stats[7] = (mean[0] - mean[2]) * 2; // red/blue opponency
  stats[8] = (gx / n) * 8 - 1;
  stats[9] = (gy / n) * 8 - 1;
  stats[10] = posR;
  stats[11] = posC;
  return stats;
}

function project(enc: VisionEncoder, stats: Float64Array): Float64Array {
  const out = new Float64Array(enc.d);
  for (let i = 0; i < enc.d; i++) {
    let acc = 0;
    for (let j = 0; j < STATS; j++) {
      acc += enc.projection[i * STATS + j] * stats[j];
    }
    out[i] = Math.tanh(acc) * FEATURE_GAIN;
  }
  return out;
}

export function encodeImage(enc: VisionEncoder, path: string): EncodedImage {
  const png = PNG.sync.read(readFileSync(path));
  const { grid, d } = enc;
  const patches = new Float64Array(enc.nP * d);
  for (let gr = 0; gr < grid; gr++) {
    for (let gc = 0; gc < grid; gc++) {
      const region: Region = {
        x0: Math.floor((gc * png.width) / grid),
        x1: Math.floor(((gc + 1) * png.width) / grid),
        y0: Math.floor((gr * png.height) / grid),
        y1: Math.floor(((gr + 1) * png.height) / grid),
      };
      const posR = grid > 1 ? (2 * gr) / (grid - 1) - 1 : 0;
      const posC = grid > 1 ? (2 * gc) / (grid - 1) - 1 : 0;
      const feat = project(enc, regionStats(png, region, posR, posC));
      patches.set(feat, (gr * grid + gc) * d);
    }
  }

  let pooled: Float64Array;
  if (enc.pooledMode === "mean") {
    pooled = new Float64Array(d);
    for (let p = 0; p < enc.nP; p++) {
      for (let j = 0; j < d; j++) pooled[j] += patches[p * d + j];
    }
    for (let j = 0; j < d; j++) pooled[j] /= enc.nP;
  } else {
    // "cls": one global descriptor over the whole frame
    const whole: Region = { x0: 0, y0: 0, x1: png.width, y1: png.height };
    pooled = project(enc, regionStats(png, whole, 0, 0));
  }
  let norm = 0;
  for (let j = 0; j < d; j++) norm += pooled[j] * pooled[j];
  norm = Math.sqrt(norm);
  if (norm === 0) throw new Error(`degenerate pooled vector for ${path}`);
  for (let j = 0; j < d; j++) pooled[j] /= norm;
  return { patches, pooled };
}
