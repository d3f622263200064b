// Palette editor model: swatch colors and weight/bias sliders, debounced
// into /palette requests with at most one in flight (latest edit wins).

export type SendColor = (index: number, rgb: [number, number, number]) => Promise<unknown>;
export type SendTransform = (weights: number[], biases: number[]) => Promise<unknown>;

export interface Swatch {
  rgb: [number, number, number];
  active: boolean;
  edited: boolean;
}

export class PaletteEditor {
  swatches: Swatch[] = [];
  weights: number[] = [];
  biases: number[] = [];

  private pendingColor: Map<number, [number, number, number]> = new Map();
  private pendingTransform = false;
  private inFlight = false;
  private timer: ReturnType<typeof setTimeout> | null = null;
  sent = 0; // total requests actually issued (observable for tests)

  constructor(
    private sendColor: SendColor,
    private sendTransform: SendTransform,
    private debounceMs = 80,
  ) {}

  /** Adopt the learned palette from a status message; local edits survive. */
  syncFromService(palette: number[][], activeMask: boolean[]): void {
    const n = palette.length;
    if (this.swatches.length !== n) {
      this.swatches = palette.map((rgb, i) => ({
        rgb: [rgb[0], rgb[1], rgb[2]],
        active: activeMask[i],
        edited: false,
      }));
      this.weights = new Array(n).fill(1);
      this.biases = new Array(n).fill(0);
      return;
    }
    for (let i = 0; i < n; i++) {
      this.swatches[i].active = activeMask[i];
      if (!this.swatches[i].edited) {
        this.swatches[i].rgb = [palette[i][0], palette[i][1], palette[i][2]];
      }
    }
  }

  dragSwatch(index: number, rgb: [number, number, number]): void {
    const clamped: [number, number, number] = [
      Math.min(1, Math.max(0, rgb[0])),
      Math.min(1, Math.max(0, rgb[1])),
      Math.min(1, Math.max(0, rgb[2])),
    ];
    this.swatches[index].rgb = clamped;
    this.swatches[index].edited = true;
    this.pendingColor.set(index, clamped);
    this.schedule();
  }

  setWeight(index: number, value: number): void {
    this.weights[index] = value;
    this.pendingTransform = true;
    this.schedule();
  }

  setBias(index: number, value: number): void {
    this.biases[index] = Math.min(1, Math.max(-1, value)); // biases live in [-1, 1]
    this.pendingTransform = true;
    this.schedule();
  }

  reset(): void {
    for (const s of this.swatches) s.edited = false;
    this.weights = this.weights.map(() => 1);
    this.biases = this.biases.map(() => 0);
    this.pendingTransform = true;
    this.pendingColor.clear();
    this.schedule();
  }

  private schedule(): void {
    if (this.timer !== null) return;
    this.timer = setTimeout(() => {
      this.timer = null;
      void this.flush();
    }, this.debounceMs);
  }

  /** Issue pending updates; only one request chain runs at a time. */
  async flush(): Promise<void> {
    if (this.inFlight) {
      this.schedule(); // try again once the current request lands
      return;
    }
    this.inFlight = true;
    try {
      while (this.pendingColor.size > 0 || this.pendingTransform) {
        if (this.pendingColor.size > 0) {
          const [index, rgb] = this.pendingColor.entries().next().value as [
            number,
            [number, number, number],
          ];
          this.pendingColor.delete(index);
          this.sent += 1;
          await this.sendColor(index, rgb);
        } else {
          this.pendingTransform = false;
          this.sent += 1;
          await this.sendTransform([...this.weights], [...this.biases]);
        }
      }
    } finally {
      this.inFlight = false;
    }
  }

  get busy(): boolean {
    return this.inFlight || this.pendingColor.size > 0 || this.pendingTransform;
  }
}
