import { describe, expect, it } from "vitest";

import { crc32 } from "../src/crc32.js";

describe("crc32", () => {
  it("matches the standard check value", () => {
    const data = new TextEncoder().encode("123456789");
    expect(crc32(data)).toBe(0xcbf43926);
  });

  it("empty input is zero", () => {
    expect(crc32(new Uint8Array(0))).toBe(0);
  });

  it("known vectors", () => {
    expect(crc32(new TextEncoder().encode("a"))).toBe(0xe8b7be43);
    expect(crc32(new TextEncoder().encode("abc"))).toBe(0x352441c2);
  });
});
