/**
 * Status polling with backoff, capped retries on transient failures, and a
 * registry guaranteeing at most one in-flight poll per id.  Jobs and grids
 * share the loop but hit their own status endpoints.
 */

import { ApiClient, ApiError, GridStatusResponse, JobState, JobStatusResponse } from "./api.js";

export interface PollOptions {
  initialDelayMs?: number;
  maxDelayMs?: number;
  backoffFactor?: number;
  /** consecutive transient failures tolerated before giving up */
  maxRetries?: number;
  sleep?: (ms: number) => Promise<void>;
}

export interface TerminalStatus {
  status: JobState;
  error?: string;
}

export type PollEvent<S extends TerminalStatus = TerminalStatus> =
  | { kind: "status"; status: S }
  | { kind: "retrying"; attempt: number; maxRetries: number; error: string }
  | { kind: "not-found"; jobId: string };

export class JobNotFoundError extends Error {
  constructor(readonly jobId: string) {
    super(`unknown job ${jobId}`);
  }
}

export class PollGaveUpError extends Error {
  constructor(readonly jobId: string, readonly attempts: number) {
    super(`gave up polling ${jobId} after ${attempts} transient failures`);
  }
}

const defaultSleep = (ms: number) => new Promise<void>((resolve) => setTimeout(resolve, ms));

export async function pollUntilTerminal<S extends TerminalStatus>(
  fetchStatus: () => Promise<S>,
  id: string,
  onEvent?: (event: PollEvent<S>) => void,
  options: PollOptions = {},
): Promise<S> {
  const {
    initialDelayMs = 150,
    maxDelayMs = 3000,
    backoffFactor = 2,
    maxRetries = 3,
    sleep = defaultSleep,
  } = options;
  let delay = initialDelayMs;
  let consecutiveFailures = 0;
  for (;;) {
    try {
      const status = await fetchStatus();
      consecutiveFailures = 0;
      onEvent?.({ kind: "status", status });
      if (status.status === "done" || status.status === "failed") {
        return status;
      }
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) {
        onEvent?.({ kind: "not-found", jobId: id });
        throw new JobNotFoundError(id);
      }
      consecutiveFailures += 1;
      if (consecutiveFailures > maxRetries) {
        throw new PollGaveUpError(id, consecutiveFailures);
      }
      onEvent?.({
        kind: "retrying",
        attempt: consecutiveFailures,
        maxRetries,
        error: err instanceof Error ? err.message : String(err),
      });
    }
    await sleep(delay);
    delay = Math.min(maxDelayMs, delay * backoffFactor);
  }
}

export function pollJob(
  client: ApiClient,
  jobId: string,
  onEvent?: (event: PollEvent<JobStatusResponse>) => void,
  options?: PollOptions,
): Promise<JobStatusResponse> {
  return pollUntilTerminal(() => client.jobStatus(jobId), jobId, onEvent, options);
}

export function pollGrid(
  client: ApiClient,
  gridId: string,
  onEvent?: (event: PollEvent<GridStatusResponse>) => void,
  options?: PollOptions,
): Promise<GridStatusResponse> {
  return pollUntilTerminal(() => client.gridStatus(gridId), gridId, onEvent, options);
}

/** At most one live poll per job id; concurrent callers share the promise. */
export class PollRegistry {
  private inflight = new Map<string, Promise<TerminalStatus>>();

  poll(
    client: ApiClient,
    jobId: string,
    onEvent?: (event: PollEvent<JobStatusResponse>) => void,
    options?: PollOptions,
  ): Promise<JobStatusResponse> {
    const existing = this.inflight.get(jobId);
    if (existing) return existing as Promise<JobStatusResponse>;
    const promise = pollJob(client, jobId, onEvent, options).finally(() => {
      this.inflight.delete(jobId);
    });
    this.inflight.set(jobId, promise);
    return promise;
  }

  pollGrid(
    client: ApiClient,
    gridId: string,
    onEvent?: (event: PollEvent<GridStatusResponse>) => void,
    options?: PollOptions,
  ): Promise<GridStatusResponse> {
    const existing = this.inflight.get(gridId);
    if (existing) return existing as Promise<GridStatusResponse>;
    const promise = pollGrid(client, gridId, onEvent, options).finally(() => {
      this.inflight.delete(gridId);
    });
    this.inflight.set(gridId, promise);
    return promise;
  }

  isPolling(id: string): boolean {
    return this.inflight.has(id);
  }
}
