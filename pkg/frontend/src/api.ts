/**
 * Typed client for the sketch-extraction HTTP API.
 *
 * The client never touches pixel data: PNG responses are returned as raw
 * ArrayBuffers for the view layer to display verbatim.  `fetchFn` is
 * injectable so the contract suite can run against a scripted mock server.
 */

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface ParamEcho {
  zeta: number;
  beta: number;
  alpha: number;
  method: string;
  seed: number;
  steps: number;
  guidance: number;
  [key: string]: unknown;
}

export type JobState = "pending" | "running" | "done" | "failed";

export interface JobSubmitResponse {
  job_id: string;
  params: ParamEcho;
}

export interface JobStatusResponse {
  job_id: string;
  status: JobState;
  params: ParamEcho;
  provenance?: Record<string, unknown>;
  error?: string;
}

export interface GridSubmitResponse {
  grid_id: string;
  params: ParamEcho;
  zeta_values: number[];
  beta_values: number[];
}

export interface GridStatusResponse {
  grid_id: string;
  status: JobState;
  params: ParamEcho;
  zeta_values: number[];
  beta_values: number[];
  failures?: Record<string, string>;
  error?: string;
}

export interface Capabilities {
  backend: { name: string; preferred_resolution: number };
  detectors: string[];
  segmenters: string[];
  defaults: { zeta: number; beta: number; alpha: number; steps: number; method: string };
}

/** Submittable parameter set; values are stringified exactly once, here. */
export type JobParams = Record<string, string | number | boolean>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function raiseForStatus(resp: Response): Promise<Response> {
  if (resp.ok) return resp;
  let detail = resp.statusText || String(resp.status);
  try {
    const body = (await resp.json()) as { detail?: string };
    if (body && typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body; keep status text
  }
  throw new ApiError(resp.status, detail);
}

export class ApiClient {
  constructor(
    private readonly base: string = "",
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private url(path: string): string {
    return `${this.base}${path}`;
  }

  private form(color: Blob, reference: Blob, params: JobParams): FormData {
    const form = new FormData();
    form.append("color", color, "color.png");
    form.append("reference", reference, "reference.png");
    for (const [key, value] of Object.entries(params)) {
      form.append(key, String(value));
    }
    return form;
  }

  async capabilities(): Promise<Capabilities> {
    const resp = await raiseForStatus(await this.fetchFn(this.url("/api/capabilities")));
    return (await resp.json()) as Capabilities;
  }

  async submitJob(color: Blob, reference: Blob, params: JobParams): Promise<JobSubmitResponse> {
    const resp = await raiseForStatus(
      await this.fetchFn(this.url("/api/jobs"), { method: "POST", body: this.form(color, reference, params) }),
    );
    return (await resp.json()) as JobSubmitResponse;
  }

  async jobStatus(jobId: string): Promise<JobStatusResponse> {
    const resp = await raiseForStatus(await this.fetchFn(this.url(`/api/jobs/${jobId}`)));
    return (await resp.json()) as JobStatusResponse;
  }

  /** Result PNG bytes, exactly as served. */
  async jobResult(jobId: string): Promise<ArrayBuffer> {
    const resp = await raiseForStatus(await this.fetchFn(this.url(`/api/jobs/${jobId}/result.png`)));
    return resp.arrayBuffer();
  }

  async submitGrid(
    color: Blob,
    reference: Blob,
    zetaValues: number[],
    betaValues: number[],
    params: JobParams,
  ): Promise<GridSubmitResponse> {
    const form = this.form(color, reference, params);
    form.append("zeta_values", zetaValues.join(","));
    form.append("beta_values", betaValues.join(","));
    const resp = await raiseForStatus(
      await this.fetchFn(this.url("/api/grids"), { method: "POST", body: form }),
    );
    return (await resp.json()) as GridSubmitResponse;
  }

  async gridStatus(gridId: string): Promise<GridStatusResponse> {
    const resp = await raiseForStatus(await this.fetchFn(this.url(`/api/grids/${gridId}`)));
    return (await resp.json()) as GridStatusResponse;
  }

  async gridCell(gridId: string, i: number, j: number): Promise<ArrayBuffer> {
    const resp = await raiseForStatus(
      await this.fetchFn(this.url(`/api/grids/${gridId}/cell/${i}/${j}.png`)),
    );
    return resp.arrayBuffer();
  }
}
