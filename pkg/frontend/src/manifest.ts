/** Input manifest: one JSON object per line describing an entity. */

import { readFileSync } from "node:fs";

export interface ManifestEntry {
  entityId: string;
  images: string[];
  description: string;
  split: "seen" | "unseen";
}

export function readManifest(path: string): ManifestEntry[] {
  const out: ManifestEntry[] = [];
  const text = readFileSync(path, "utf-8");
  const seen = new Set<string>();
  text.split("\n").forEach((line, idx) => {
    const trimmed = line.trim();
    if (!trimmed) return;
    let obj: Record<string, unknown>;
    try {
      obj = JSON.parse(trimmed);
    } catch (err) {
      throw new Error(`${path}:${idx + 1}: invalid JSON (${err})`);
    }
    const entityId = obj["entity_id"];
    const images = obj["images"];
    const description = obj["description"];
    const split = obj["split"] ?? "seen";
    if (typeof entityId !== "string" || !entityId) {
      throw new Error(`${path}:${idx + 1}: missing entity_id`);
    }
    if (seen.has(entityId)) {
      throw new Error(`${path}:${idx + 1}: duplicate entity_id ${entityId}`);
    }
    seen.add(entityId);
    if (!Array.isArray(images) || images.length === 0) {
      throw new Error(`${path}:${idx + 1}: images must be a non-empty array`);
    }
    if (typeof description !== "string") {
      throw new Error(`${path}:${idx + 1}: missing description`);
    }
    if (split !== "seen" && split !== "unseen") {
      throw new Error(`${path}:${idx + 1}: split must be seen|unseen`);
    }
    out.push({
      entityId,
      images: images.map(String),
      description,
      split,
    });
  });
  return out;
}
