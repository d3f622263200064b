// Mirror of the service's session state machine. The UI derives everything
// from service responses; this module only answers "which controls are
// legal right now".

import type { SessionState } from "./types.js";

export type Control =
  | "train"
  | "scribble"
  | "grow"
  | "grid_op"
  | "make_growgrid"
  | "edit_start"
  | "palette"
  | "edit_stop"
  | "distill"
  | "render";

const ALLOWED: Record<Control, SessionState[]> = {
  train: ["idle"],
  scribble: ["selecting", "editing_palette"],
  grow: ["selecting", "editing_palette"],
  grid_op: ["selecting", "editing_palette"],
  make_growgrid: ["selecting", "editing_palette"],
  edit_start: ["selecting", "editing_palette"],
  palette: ["edit_training", "editing_palette"],
  edit_stop: ["edit_training"],
  distill: ["editing_palette"],
  render: ["selecting", "edit_training", "editing_palette", "distilling", "done"],
};

export function controlEnabled(control: Control, state: SessionState): boolean {
  return ALLOWED[control].includes(state);
}

export function disabledReason(control: Control, state: SessionState): string | null {
  if (controlEnabled(control, state)) return null;
  return `requires ${ALLOWED[control].join(" or ")}; session is ${state}`;
}

/** Client-side sanity guard over the preview stream: iterations only grow. */
export class IterationMonitor {
  private last = -1;

  accept(iter: number): boolean {
    if (iter < this.last) return false;
    this.last = iter;
    return true;
  }

  get current(): number {
    return this.last;
  }
}
