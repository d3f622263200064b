// Pointer-trail rasterization: canvas events arrive as sparse float points
// in canvas space; the service wants deduplicated integer (row, col) pixels
// at render resolution, connected along the drag path.

export interface CanvasPoint {
  x: number; // canvas-space, origin top-left
  y: number;
}

export class ScribbleBuffer {
  private seen = new Set<number>();
  private pixels: number[][] = [];
  private prev: [number, number] | null = null;

  constructor(
    private imageWidth: number,
    private imageHeight: number,
    private canvasWidth: number,
    private canvasHeight: number,
  ) {}

  private push(row: number, col: number) {
    if (row < 0 || row >= this.imageHeight || col < 0 || col >= this.imageWidth) return;
    const key = row * this.imageWidth + col;
    if (this.seen.has(key)) return;
    this.seen.add(key);
    this.pixels.push([row, col]);
  }

  /** Map a canvas point to image pixel coordinates. */
  toPixel(p: CanvasPoint): [number, number] {
    const col = Math.floor((p.x / this.canvasWidth) * this.imageWidth);
    const row = Math.floor((p.y / this.canvasHeight) * this.imageHeight);
    return [row, col];
  }

  /** Add one pointer sample, connecting it to the previous one. */
  add(p: CanvasPoint): void {
    const [row, col] = this.toPixel(p);
    if (this.prev === null) {
      this.push(row, col);
    } else {
      for (const [r, c] of bresenham(this.prev[0], this.prev[1], row, col)) {
        this.push(r, c);
      }
    }
    this.prev = [row, col];
  }

  /** End the current stroke (the next point starts a new segment). */
  lift(): void {
    this.prev = null;
  }

  /** Pixels accumulated so far, in draw order. */
  drain(): number[][] {
    const out = this.pixels;
    this.pixels = [];
    this.seen.clear();
    this.prev = null;
    return out;
  }

  get count(): number {
    return this.pixels.length;
  }
}

/** Integer line between two pixels, endpoints included. */
export function bresenham(r0: number, c0: number, r1: number, c1: number): number[][] {
  const out: number[][] = [];
  const dr = Math.abs(r1 - r0);
  const dc = Math.abs(c1 - c0);
  const sr = r0 < r1 ? 1 : -1;
  const sc = c0 < c1 ? 1 : -1;
  let err = dc - dr;
  let r = r0;
  let c = c0;
  for (;;) {
    out.push([r, c]);
    if (r === r1 && c === c1) break;
    const e2 = 2 * err;
    if (e2 > -dr) {
      err -= dr;
      c += sc;
    }
    if (e2 < dc) {
      err += dc;
      r += sr;
    }
  }
  return out;
}
