// Shared protocol types for the /v1 editing service.

export type SessionState =
  | "idle"
  | "nerf_training"
  | "selecting"
  | "edit_training"
  | "editing_palette"
  | "distilling"
  | "done";

export interface SessionInfo {
  session_id: string;
  state: SessionState;
  job: { id: number; kind: string } | null;
  job_error: string | null;
  voxels: number;
  views: number;
}

export interface StatusMessage {
  type: "status";
  iter: number;
  losses: Record<string, number>;
  palette: number[][];
  active_mask: boolean[];
  frame: string;
}

export interface PaletteEditState {
  // per-row color overrides (UI-side pending edits, confirmed by the service)
  overrides: Map<number, [number, number, number]>;
  weights: number[] | null;
  biases: number[] | null;
}

export interface GridStats {
  voxels_total: number;
  revision?: string;
}
