// Browser studio wiring: plain DOM, no framework. Every displayed number
// originates from a service message; this file only routes events.

import { ServiceClient } from "./api.js";
import { orbitPose, pan, zoom, type Orbit } from "./camera.js";
import { PaletteEditor } from "./palette.js";
import { browserSocket, PreviewPanel } from "./preview.js";
import { ScribbleBuffer } from "./scribble.js";
import { controlEnabled, disabledReason, type Control } from "./state.js";
import { CropTool } from "./styleCrop.js";
import type { SessionInfo, SessionState } from "./types.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

class Studio {
  client = new ServiceClient(location.origin);
  sid: string | null = null;
  state: SessionState = "idle";
  views = 0;
  scribble: ScribbleBuffer | null = null;
  palette: PaletteEditor | null = null;
  preview: PreviewPanel | null = null;
  orbit: Orbit = { azimuth: 0.6, elevation: 0.5, radius: 2.6, target: [0, 0, 0] };
  styleImageId: string | null = null;
  cropTool: CropTool | null = null;
  lastRevision: string | null = null;
  log = $("log");

  say(text: string): void {
    this.log.textContent = `${text}\n${this.log.textContent ?? ""}`.slice(0, 4000);
  }

  guard(control: Control): boolean {
    if (controlEnabled(control, this.state)) return true;
    this.say(`blocked: ${disabledReason(control, this.state)}`);
    return false;
  }

  async refresh(): Promise<SessionInfo | null> {
    if (!this.sid) return null;
    const info = await this.client.info(this.sid);
    this.state = info.state;
    this.views = info.views;
    $("state").textContent = `${info.state} (${info.voxels} voxels)` +
      (info.job_error ? ` — error: ${info.job_error}` : "");
    const gates: Array<[string, Control]> = [
      ["btn-train", "train"], ["btn-grow", "grow"], ["btn-undo", "grid_op"],
      ["btn-growgrid", "make_growgrid"], ["btn-recolor", "edit_start"],
      ["btn-style", "edit_start"], ["btn-stop", "edit_stop"],
      ["btn-distill", "distill"],
    ];
    for (const [id, control] of gates) {
      ($(id) as HTMLButtonElement).disabled = !controlEnabled(control, this.state);
    }
    return info;
  }

  async create(): Promise<void> {
    const path = ($("dataset") as HTMLInputElement).value;
    const res = await this.client.createSession(path);
    this.sid = res.session_id;
    this.say(`session ${this.sid}`);
    await this.refresh();
    this.pollLoop();
  }

  pollLoop(): void {
    setInterval(() => void this.refresh().catch(() => undefined), 1000);
  }

  async train(): Promise<void> {
    if (!this.sid || !this.guard("train")) return;
    await this.client.train(this.sid);
    this.say("field training started");
  }

  bindCanvas(): void {
    const canvas = $("view") as HTMLCanvasElement;
    let drawing = false;
    canvas.addEventListener("pointerdown", (ev) => {
      if (!this.guard("scribble")) return;
      drawing = true;
      this.scribble ??= new ScribbleBuffer(64, 64, canvas.width, canvas.height);
      this.scribble.add({ x: ev.offsetX, y: ev.offsetY });
    });
    canvas.addEventListener("pointermove", (ev) => {
      if (drawing && this.scribble) this.scribble.add({ x: ev.offsetX, y: ev.offsetY });
    });
    canvas.addEventListener("pointerup", () => {
      drawing = false;
      this.scribble?.lift();
      void this.sendScribble();
    });
  }

  async sendScribble(): Promise<void> {
    if (!this.sid || !this.scribble || this.scribble.count === 0) return;
    const pixels = this.scribble.drain();
    const view = Number(($("viewIndex") as HTMLInputElement).value) || 0;
    const res = await this.client.scribble(this.sid, view, pixels);
    this.lastRevision = (res as { revision?: string }).revision ?? this.lastRevision;
    this.say(`scribble: ${pixels.length} px -> ${res.voxels_total} voxels`);
    await this.refresh();
  }

  async grow(): Promise<void> {
    if (!this.sid || !this.guard("grow")) return;
    const steps = Number(($("steps") as HTMLInputElement).value) || 1;
    const perStep = Number(($("perstep") as HTMLInputElement).value) || 1;
    if (steps === 0) return; // no request for a no-op
    const res = await this.client.grow(this.sid, steps, perStep);
    this.lastRevision = (res as { revision?: string }).revision ?? this.lastRevision;
    this.say(`grew to ${res.voxels_total} voxels (queue ${res.queue})`);
    await this.refresh();
  }

  async undo(): Promise<void> {
    // additive selections restore exactly via intersection with the stash
    if (!this.sid || !this.lastRevision || !this.guard("grid_op")) return;
    const res = await this.client.selectOp(this.sid, "intersection", this.lastRevision);
    this.say(`undo -> ${res.voxels_total} voxels`);
    await this.refresh();
  }

  async startEdit(mode: "recolor" | "style"): Promise<void> {
    if (!this.sid || !this.guard("edit_start")) return;
    const config: Parameters<ServiceClient["editStart"]>[1] = { mode };
    if (mode === "style") {
      if (!this.styleImageId) {
        this.say("upload a style image first");
        return;
      }
      config.style_image_id = this.styleImageId;
    }
    await this.client.editStart(this.sid, config);
    this.say(`${mode} training started`);
    await this.refresh();
    this.openPreview();
  }

  openPreview(): void {
    if (!this.sid) return;
    this.preview?.stop();
    this.preview = new PreviewPanel(browserSocket, this.client.previewUrl(this.sid));
    const canvas = $("view") as HTMLCanvasElement;
    const ctx = canvas.getContext("2d")!;
    this.palette = new PaletteEditor(
      (index, rgb) => this.client.paletteColor(this.sid!, index, rgb),
      (weights, biases) => this.client.paletteTransform(this.sid!, weights, biases),
    );
    this.preview.onUpdate(() => {
      const panel = this.preview!;
      if (panel.frame) {
        const blob = new Blob([panel.frame.png as BlobPart], { type: "image/png" });
        void createImageBitmap(blob).then((bmp) => {
          ctx.drawImage(bmp, 0, 0, canvas.width, canvas.height);
        });
      }
      if (panel.lastStatus) {
        $("iter").textContent = String(panel.lastStatus.iter);
        this.palette!.syncFromService(panel.lastStatus.palette, panel.lastStatus.active_mask);
        this.renderSwatches();
        this.renderSparkline(panel.losses.get("content"));
      }
    });
    void this.preview.start();
  }

  renderSwatches(): void {
    const host = $("swatches");
    host.innerHTML = "";
    this.palette!.swatches.forEach((swatch, i) => {
      const input = document.createElement("input");
      input.type = "color";
      input.value = rgbToHex(swatch.rgb);
      input.disabled = !swatch.active; // removed palettes render disabled
      input.title = swatch.active ? `base ${i}` : `base ${i} (removed)`;
      input.addEventListener("input", () => {
        this.palette!.dragSwatch(i, hexToRgb(input.value));
      });
      host.appendChild(input);
    });
  }

  renderSparkline(series: number[]): void {
    const canvas = $("spark") as HTMLCanvasElement;
    const ctx = canvas.getContext("2d")!;
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    if (series.length < 2) return;
    const max = Math.max(...series, 1e-9);
    ctx.beginPath();
    series.forEach((v, i) => {
      const x = (i / (series.length - 1)) * canvas.width;
      const y = canvas.height - (v / max) * canvas.height;
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    });
    ctx.strokeStyle = "#4a9";
    ctx.stroke();
  }

  bindOrbit(): void {
    const canvas = $("view") as HTMLCanvasElement;
    canvas.addEventListener("wheel", (ev) => {
      ev.preventDefault();
      this.orbit = zoom(this.orbit, ev.deltaY > 0 ? 1.1 : 0.9);
      this.preview?.moveCamera(orbitPose(this.orbit));
    });
    canvas.addEventListener("pointermove", (ev) => {
      if (ev.buttons !== 2) return; // right-drag orbits, left-drag scribbles
      this.orbit = pan(this.orbit, -ev.movementX * 0.01, ev.movementY * 0.01);
      this.preview?.moveCamera(orbitPose(this.orbit));
    });
  }

  async uploadStyle(file: File): Promise<void> {
    const crop = this.cropTool && !this.cropTool.isIdentity
      ? { left: this.cropTool.rect.left, top: this.cropTool.rect.top,
          width: this.cropTool.rect.width, height: this.cropTool.rect.height }
      : undefined;
    const res = await this.client.uploadStyleImage(file, crop);
    this.styleImageId = res.style_image_id;
    this.say(`style image ${this.styleImageId}`);
  }

  async stopEdit(): Promise<void> {
    if (!this.sid || !this.guard("edit_stop")) return;
    const res = await this.client.editStop(this.sid);
    this.say(`edit stopped; ${res.active_mask.filter(Boolean).length} active bases`);
    await this.refresh();
  }

  async distill(): Promise<void> {
    if (!this.sid || !this.guard("distill")) return;
    await this.client.distill(this.sid);
    this.say("distillation started");
    await this.refresh();
  }
}

function rgbToHex(rgb: [number, number, number]): string {
  const h = (v: number) => Math.round(v * 255).toString(16).padStart(2, "0");
  return `#${h(rgb[0])}${h(rgb[1])}${h(rgb[2])}`;
}

function hexToRgb(hex: string): [number, number, number] {
  return [
    parseInt(hex.slice(1, 3), 16) / 255,
    parseInt(hex.slice(3, 5), 16) / 255,
    parseInt(hex.slice(5, 7), 16) / 255,
  ];
}

declare global {
  interface Window {
    studio: Studio;
  }
}

if (typeof document !== "undefined" && document.getElementById("view")) {
  const studio = new Studio();
  window.studio = studio;
  studio.bindCanvas();
  studio.bindOrbit();
  $("btn-create").addEventListener("click", () => void studio.create());
  $("btn-train").addEventListener("click", () => void studio.train());
  $("btn-grow").addEventListener("click", () => void studio.grow());
  $("btn-undo").addEventListener("click", () => void studio.undo());
  $("btn-growgrid").addEventListener("click", () => {
    if (studio.sid) void studio.client.makeGrowgrid(studio.sid)
      .then((r) => studio.say(`growing grid: ${r.voxels} voxels`));
  });
  $("btn-recolor").addEventListener("click", () => void studio.startEdit("recolor"));
  $("btn-style").addEventListener("click", () => void studio.startEdit("style"));
  $("btn-stop").addEventListener("click", () => void studio.stopEdit());
  $("btn-distill").addEventListener("click", () => void studio.distill());
  ($("styleFile") as HTMLInputElement).addEventListener("change", (ev) => {
    const file = (ev.target as HTMLInputElement).files?.[0];
    if (file) void studio.uploadStyle(file);
  });
}

export { Studio, rgbToHex, hexToRgb };
