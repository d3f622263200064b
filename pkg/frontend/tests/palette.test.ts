import { describe, expect, it, vi } from "vitest";

import { PaletteEditor } from "../src/palette.js";

function editor(latency = 5) {
  const colorCalls: Array<[number, number[]]> = [];
  const transformCalls: Array<[number[], number[]]> = [];
  const ed = new PaletteEditor(
    async (i, rgb) => {
      await new Promise((r) => setTimeout(r, latency));
      colorCalls.push([i, rgb]);
    },
    async (w, b) => {
      await new Promise((r) => setTimeout(r, latency));
      transformCalls.push([w, b]);
    },
    10,
  );
  ed.syncFromService(
    [[0.5, 0.5, 0.5], [0.1, 0.2, 0.3]],
    [true, true],
  );
  return { ed, colorCalls, transformCalls };
}

describe("palette editor", () => {
  it("debounces a drag into one request (latest wins)", async () => {
    const { ed, colorCalls } = editor();
    for (let i = 0; i < 25; i++) ed.dragSwatch(0, [i / 25, 0, 0]);
    await vi.waitUntil(() => !ed.busy, { timeout: 2000 });
    expect(colorCalls.length).toBe(1);
    expect(colorCalls[0][1][0]).toBeCloseTo(24 / 25);
  });

  it("keeps at most one request in flight", async () => {
    let inFlight = 0;
    let maxInFlight = 0;
    const ed = new PaletteEditor(
      async () => {
        inFlight += 1;
        maxInFlight = Math.max(maxInFlight, inFlight);
        await new Promise((r) => setTimeout(r, 8));
        inFlight -= 1;
      },
      async () => undefined,
      5,
    );
    ed.syncFromService([[0, 0, 0], [0, 0, 0], [0, 0, 0]], [true, true, true]);
    ed.dragSwatch(0, [1, 0, 0]);
    await new Promise((r) => setTimeout(r, 7));
    ed.dragSwatch(1, [0, 1, 0]);
    ed.dragSwatch(2, [0, 0, 1]);
    await vi.waitUntil(() => !ed.busy, { timeout: 2000 });
    expect(maxInFlight).toBe(1);
    expect(ed.sent).toBe(3);
  });

  it("clamps colors and biases to their valid ranges", () => {
    const { ed } = editor();
    ed.dragSwatch(0, [2.0, -1.0, 0.5]);
    expect(ed.swatches[0].rgb).toEqual([1, 0, 0.5]);
    ed.setBias(1, -3);
    expect(ed.biases[1]).toBe(-1);
    ed.setBias(1, 0.25);
    expect(ed.biases[1]).toBe(0.25);
  });

  it("reset returns to the identity edit", async () => {
    const { ed, transformCalls } = editor();
    ed.dragSwatch(0, [0.9, 0.1, 0.1]);
    ed.setWeight(1, 2.5);
    ed.reset();
    await vi.waitUntil(() => !ed.busy, { timeout: 2000 });
    expect(ed.weights).toEqual([1, 1]);
    expect(ed.biases).toEqual([0, 0]);
    const last = transformCalls[transformCalls.length - 1];
    expect(last[0]).toEqual([1, 1]);
    expect(last[1]).toEqual([0, 0]);
    // after reset, swatches track the service palette again
    ed.syncFromService([[0.7, 0.7, 0.7], [0.1, 0.2, 0.3]], [true, true]);
    expect(ed.swatches[0].rgb).toEqual([0.7, 0.7, 0.7]);
  });

  it("local edits survive palette syncs from the stream", () => {
    const { ed } = editor();
    ed.dragSwatch(1, [0, 1, 0]);
    ed.syncFromService([[0.6, 0.6, 0.6], [0.4, 0.4, 0.4]], [true, false]);
    expect(ed.swatches[1].rgb).toEqual([0, 1, 0]); // user edit kept
    expect(ed.swatches[0].rgb).toEqual([0.6, 0.6, 0.6]); // follows training
    expect(ed.swatches[1].active).toBe(false); // removal reflected
  });
});
