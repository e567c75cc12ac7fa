/**
 * DOM-free orchestration of one extraction: submit, track in history, poll to
 * a terminal state, then attach the served result bytes.  The view layer
 * renders from the history entry; completed entries carry the server-echoed
 * parameters, never the locally submitted ones.
 */

import { ApiClient, JobParams, JobStatusResponse } from "./api.js";
import { PollEvent, PollOptions, PollRegistry } from "./polling.js";
import { SessionState } from "./state.js";

export interface ExtractionHooks {
  onTransient?: (message: string) => void;
  onError?: (message: string) => void;
  onDone?: (jobId: string, bytes: ArrayBuffer) => void;
}

export async function runExtraction(
  client: ApiClient,
  state: SessionState,
  polls: PollRegistry,
  extraParams: JobParams = {},
  hooks: ExtractionHooks = {},
  pollOptions?: PollOptions,
): Promise<JobStatusResponse | undefined> {
  if (!state.color || !state.reference) return undefined;
  const params: JobParams = {
    zeta: state.sliders.zeta,
    beta: state.sliders.beta,
    alpha: state.sliders.alpha,
    ...extraParams,
  };
  let submitted;
  try {
    submitted = await client.submitJob(state.color, state.reference, params);
  } catch (err) {
    hooks.onError?.(err instanceof Error ? err.message : String(err));
    return undefined;
  }
  state.appendHistory({
    jobId: submitted.job_id,
    submitted: { ...state.sliders },
    echoed: submitted.params,
    status: "pending",
  });
  const onEvent = (event: PollEvent) => {
    if (event.kind === "status") {
      state.patchHistory(submitted.job_id, { status: event.status.status });
    } else if (event.kind === "retrying") {
      hooks.onTransient?.(`connection hiccup, retry ${event.attempt}/${event.maxRetries}`);
    } else {
      hooks.onError?.(`job ${event.jobId} not found`);
    }
  };
  let final: JobStatusResponse;
  try {
    final = await polls.poll(client, submitted.job_id, onEvent, pollOptions);
  } catch (err) {
    state.patchHistory(submitted.job_id, {
      status: "failed",
      error: err instanceof Error ? err.message : String(err),
    });
    hooks.onError?.(err instanceof Error ? err.message : String(err));
    return undefined;
  }
  if (final.status === "done") {
    const bytes = await client.jobResult(submitted.job_id);
    state.patchHistory(submitted.job_id, {
      status: "done",
      thumbnail: bytes,
      echoed: final.params,
    });
    hooks.onDone?.(submitted.job_id, bytes);
  } else {
    state.patchHistory(submitted.job_id, { status: "failed", error: final.error });
    hooks.onError?.(final.error ?? "job failed");
  }
  return final;
}
