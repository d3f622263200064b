// Thin REST client for the editing service. All state lives server-side;
// this module only shapes requests and decodes responses.

import type { SessionInfo } from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public payload: Record<string, unknown>,
  ) {
    super(`${status}: ${JSON.stringify(payload)}`);
  }
}

export class ServiceClient {
  constructor(
    public baseUrl: string,
    private fetchFn: typeof fetch = fetch,
  ) {}

  private async call<T>(method: string, path: string, body?: unknown): Promise<T> {
    const resp = await this.fetchFn(`${this.baseUrl}/v1${path}`, {
      method,
      headers: body !== undefined ? { "Content-Type": "application/json" } : undefined,
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    const payload = (await resp.json()) as Record<string, unknown>;
    if (!resp.ok) throw new ApiError(resp.status, payload);
    return payload as T;
  }

  createSession(datasetPath: string): Promise<{ session_id: string }> {
    return this.call("POST", "/session", { dataset_path: datasetPath });
  }

  info(sid: string): Promise<SessionInfo> {
    return this.call("GET", `/session/${sid}`);
  }

  train(sid: string, iters?: number): Promise<{ job: { id: number } }> {
    return this.call("POST", `/session/${sid}/train`, iters ? { iters } : {});
  }

  scribble(sid: string, view: number, pixels: number[][]) {
    return this.call<{ voxels_set: number; voxels_total: number; hits: number }>(
      "POST",
      `/session/${sid}/select/scribble`,
      { view, pixels },
    );
  }

  grow(sid: string, steps: number, perStep: number) {
    return this.call<{ voxels_added: number; voxels_total: number; queue: number }>(
      "POST",
      `/session/${sid}/select/grow`,
      { steps, per_step: perStep },
    );
  }

  selectOp(sid: string, op: "union" | "difference" | "intersection", otherGridId: string) {
    return this.call<{ voxels_total: number }>("POST", `/session/${sid}/select/op`, {
      op,
      other_grid_id: otherGridId,
    });
  }

  makeGrowgrid(sid: string) {
    return this.call<{ growgrid_id: string; voxels: number }>(
      "POST",
      `/session/${sid}/select/make_growgrid`,
      {},
    );
  }

  editStart(
    sid: string,
    config: {
      mode: "recolor" | "style";
      iters?: number;
      style_image_id?: string;
      crop?: number[];
      lambdas?: Record<string, number>;
      r_grow?: number;
    },
  ): Promise<{ job: { id: number } }> {
    return this.call("POST", `/session/${sid}/edit/start`, config);
  }

  paletteColor(sid: string, index: number, rgb: [number, number, number]) {
    return this.call<{ ok: boolean }>("POST", `/session/${sid}/palette`, { index, rgb });
  }

  paletteTransform(sid: string, weights: number[], biases: number[]) {
    return this.call<{ ok: boolean }>("POST", `/session/${sid}/palette`, {
      weights,
      biases,
    });
  }

  editStop(sid: string) {
    return this.call<{ palette: number[][]; active_mask: boolean[]; edit: unknown }>(
      "POST",
      `/session/${sid}/edit/stop`,
      {},
    );
  }

  distill(sid: string, iters?: number): Promise<{ job: { id: number } }> {
    return this.call("POST", `/session/${sid}/distill`, iters ? { iters } : {});
  }

  async uploadStyleImage(
    data: Blob | Uint8Array,
    crop?: { left: number; top: number; width: number; height: number },
  ): Promise<{ style_image_id: string }> {
    const query = crop ? `?crop=${crop.left},${crop.top},${crop.width},${crop.height}` : "";
    const resp = await this.fetchFn(`${this.baseUrl}/v1/style_image${query}`, {
      method: "POST",
      body: data as BodyInit,
    });
    const payload = (await resp.json()) as Record<string, unknown>;
    if (!resp.ok) throw new ApiError(resp.status, payload);
    return payload as { style_image_id: string };
  }

  renderUrl(sid: string, poseIndex: number, w?: number, h?: number): string {
    const size = w && h ? `&w=${w}&h=${h}` : "";
    return `${this.baseUrl}/v1/session/${sid}/render?pose_index=${poseIndex}${size}`;
  }

  previewUrl(sid: string): string {
    return `${this.baseUrl.replace(/^http/, "ws")}/v1/session/${sid}/preview`;
  }

  async waitForState(sid: string, state: string, timeoutMs = 300_000): Promise<SessionInfo> {
    const deadline = Date.now() + timeoutMs;
    for (;;) {
      const info = await this.info(sid);
      if (info.job_error) throw new Error(`job failed: ${info.job_error}`);
      if (info.state === state) return info;
      if (Date.now() > deadline) throw new Error(`timed out waiting for ${state}`);
      await new Promise((r) => setTimeout(r, 400));
    }
  }
}
