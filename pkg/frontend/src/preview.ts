// Preview-stream consumer: status messages feed the loss sparkline and the
// palette panel, binary messages carry PNG frames (latest wins). The socket
// is abstracted so the browser uses WebSocket and tests use a node shim.

import { IterationMonitor } from "./state.js";
import type { StatusMessage } from "./types.js";

export interface StreamSocket {
  send(text: string): void;
  close(): void;
  onText(handler: (text: string) => void): void;
  onBinary(handler: (data: Uint8Array) => void): void;
  onClose(handler: () => void): void;
}

export type SocketFactory = (url: string) => Promise<StreamSocket>;

export interface FrameSlot {
  iter: number;
  png: Uint8Array;
}

export class LossHistory {
  // ring buffer per loss name, for the sparkline
  private series = new Map<string, number[]>();

  constructor(private capacity = 256) {}

  push(losses: Record<string, number>): void {
    for (const [name, value] of Object.entries(losses)) {
      let buf = this.series.get(name);
      if (!buf) {
        buf = [];
        this.series.set(name, buf);
      }
      buf.push(value);
      if (buf.length > this.capacity) buf.shift();
    }
  }

  get(name: string): number[] {
    return this.series.get(name) ?? [];
  }

  names(): string[] {
    return [...this.series.keys()];
  }
}

export class PreviewPanel {
  frame: FrameSlot | null = null;
  lastStatus: StatusMessage | null = null;
  losses = new LossHistory();
  readonly monitor = new IterationMonitor();
  droppedOutOfOrder = 0;
  private closed = false;
  private socket: StreamSocket | null = null;
  private listeners: Array<() => void> = [];

  constructor(
    private connect: SocketFactory,
    private url: string,
    private reconnectDelayMs = 500,
  ) {}

  onUpdate(listener: () => void): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    for (const fn of this.listeners) fn();
  }

  async start(): Promise<void> {
    this.closed = false;
    await this.open();
  }

  private async open(): Promise<void> {
    const sock = await this.connect(this.url);
    this.socket = sock;
    sock.onText((text) => {
      const msg = JSON.parse(text) as StatusMessage;
      if (msg.type !== "status") return;
      if (!this.monitor.accept(msg.iter)) {
        this.droppedOutOfOrder += 1;
        return;
      }
      this.lastStatus = msg;
      this.losses.push(msg.losses);
      this.notify();
    });
    sock.onBinary((data) => {
      // little-endian uint64 iteration header, then PNG bytes
      const view = new DataView(data.buffer, data.byteOffset, 8);
      const iter = Number(view.getBigUint64(0, true));
      if (this.frame === null || iter >= this.frame.iter) {
        this.frame = { iter, png: data.slice(8) };
        this.notify();
      }
    });
    sock.onClose(() => {
      this.socket = null;
      if (!this.closed) {
        setTimeout(() => {
          if (!this.closed) void this.open().catch(() => undefined);
        }, this.reconnectDelayMs);
      }
    });
  }

  moveCamera(pose: number[][]): void {
    this.socket?.send(JSON.stringify({ type: "camera", pose }));
  }

  cameraToView(poseIndex: number): void {
    this.socket?.send(JSON.stringify({ type: "camera", pose_index: poseIndex }));
  }

  sendPaletteColor(index: number, rgb: [number, number, number]): void {
    this.socket?.send(JSON.stringify({ type: "palette", index, rgb }));
  }

  stop(): void {
    this.closed = true;
    this.socket?.close();
    this.socket = null;
  }
}

/** Browser socket factory over native WebSocket. */
export function browserSocket(url: string): Promise<StreamSocket> {
  return new Promise((resolve, reject) => {
    const ws = new WebSocket(url);
    ws.binaryType = "arraybuffer";
    const textHandlers: Array<(t: string) => void> = [];
    const binHandlers: Array<(d: Uint8Array) => void> = [];
    const closeHandlers: Array<() => void> = [];
    ws.onopen = () =>
      resolve({
        send: (t) => ws.send(t),
        close: () => ws.close(),
        onText: (h) => textHandlers.push(h),
        onBinary: (h) => binHandlers.push(h),
        onClose: (h) => closeHandlers.push(h),
      });
    ws.onerror = () => reject(new Error(`websocket failed: ${url}`));
    ws.onmessage = (ev) => {
      if (typeof ev.data === "string") textHandlers.forEach((h) => h(ev.data as string));
      else binHandlers.forEach((h) => h(new Uint8Array(ev.data as ArrayBuffer)));
    };
    ws.onclose = () => closeHandlers.forEach((h) => h());
  });
}
