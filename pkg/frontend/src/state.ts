/**
 * Session state: uploaded images, slider view-model, and the append-only job
 * history.  Completed entries display the server-echoed parameters, never the
 * local slider values they were submitted with.
 */

import type { ParamEcho } from "./api.js";

export interface SliderParams {
  zeta: number;
  beta: number;
  alpha: number;
}

export const DEFAULT_SLIDERS: SliderParams = { zeta: 0.4, beta: 0.5, alpha: 0.55 };

export function clamp01(value: number): number {
  if (Number.isNaN(value)) return 0;
  return Math.min(1, Math.max(0, value));
}

export type HistoryStatus = "pending" | "running" | "done" | "failed";

export interface HistoryEntry {
  jobId: string;
  submitted: SliderParams;
  /** server echo; the values the UI must display */
  echoed: ParamEcho;
  status: HistoryStatus;
  thumbnail?: ArrayBuffer;
  error?: string;
}

type Listener = () => void;

export class SessionState {
  color?: Blob;
  reference?: Blob;
  private sliderValues: SliderParams = { ...DEFAULT_SLIDERS };
  private entries: HistoryEntry[] = [];
  private listeners: Listener[] = [];

  get sliders(): Readonly<SliderParams> {
    return this.sliderValues;
  }

  setSlider(name: keyof SliderParams, value: number): number {
    this.sliderValues = { ...this.sliderValues, [name]: clamp01(value) };
    this.notify();
    return this.sliderValues[name];
  }

  loadSliders(values: Partial<SliderParams>): void {
    for (const key of ["zeta", "beta", "alpha"] as const) {
      const v = values[key];
      if (v !== undefined) this.sliderValues = { ...this.sliderValues, [key]: clamp01(v) };
    }
    this.notify();
  }

  setImages(color?: Blob, reference?: Blob): void {
    if (color !== undefined) this.color = color;
    if (reference !== undefined) this.reference = reference;
    this.notify();
  }

  /** Submission requires both uploads; the submit control binds to this. */
  canSubmit(): boolean {
    return this.color !== undefined && this.reference !== undefined;
  }

  get history(): readonly HistoryEntry[] {
    return this.entries;
  }

  appendHistory(entry: HistoryEntry): void {
    this.entries = [...this.entries, entry];
    this.notify();
  }

  /** Update fields of an existing entry in place; entries are never removed
   * or reordered within a session. */
  patchHistory(jobId: string, patch: Partial<Omit<HistoryEntry, "jobId">>): void {
    this.entries = this.entries.map((e) => (e.jobId === jobId ? { ...e, ...patch } : e));
    this.notify();
  }

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private notify(): void {
    for (const listener of this.listeners) listener();
  }
}
