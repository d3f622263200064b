import { describe, expect, it } from "vitest";

import { bresenham, ScribbleBuffer } from "../src/scribble.js";

describe("scribble rasterization", () => {
  it("maps a single click to one pixel", () => {
    const buf = new ScribbleBuffer(64, 64, 512, 512);
    buf.add({ x: 256, y: 128 });
    expect(buf.drain()).toEqual([[16, 32]]);
  });

  it("deduplicates a drag across the same pixels", () => {
    const buf = new ScribbleBuffer(64, 64, 512, 512);
    // 20 samples inside the same 8x8 canvas cell
    for (let i = 0; i < 20; i++) buf.add({ x: 100 + (i % 4), y: 200 + (i % 3) });
    expect(buf.count).toBe(1);
  });

  it("connects sparse pointer samples along a line", () => {
    const buf = new ScribbleBuffer(64, 64, 64, 64); // identity mapping
    buf.add({ x: 0, y: 0 });
    buf.add({ x: 10, y: 0 }); // jumped 10 pixels in one event
    const pixels = buf.drain();
    expect(pixels.length).toBe(11);
    expect(pixels[0]).toEqual([0, 0]);
    expect(pixels[10]).toEqual([0, 10]);
  });

  it("separates strokes with lift()", () => {
    const buf = new ScribbleBuffer(64, 64, 64, 64);
    buf.add({ x: 0, y: 0 });
    buf.lift();
    buf.add({ x: 30, y: 0 });
    expect(buf.drain().length).toBe(2); // no connecting line between strokes
  });

  it("clamps out-of-bounds points", () => {
    const buf = new ScribbleBuffer(64, 64, 64, 64);
    buf.add({ x: -5, y: 3 });
    buf.lift();
    buf.add({ x: 999, y: 3 });
    expect(buf.drain()).toEqual([]);
  });

  it("bresenham covers both endpoints on diagonals", () => {
    const line = bresenham(0, 0, 3, 3);
    expect(line[0]).toEqual([0, 0]);
    expect(line[line.length - 1]).toEqual([3, 3]);
    expect(line.length).toBe(4);
  });
});
