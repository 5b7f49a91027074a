import type { ApiClient } from "./api.js";
import type { FineTuneJob } from "./types.js";

const sleep = (ms: number) => new Promise<void>((resolve) => setTimeout(resolve, ms));

export interface PollOptions {
  intervalMs?: number;
  timeoutMs?: number;
  /** Called on every poll so views can show queued/running progress. */
  onUpdate?: (job: FineTuneJob) => void;
}

/**
 * Poll a fine-tune job until it reaches a terminal state. Resolves with the
 * done job, throws with the server's error text when it failed.
 */
export async function pollJob(
  client: ApiClient,
  jobId: number,
  { intervalMs = 500, timeoutMs = 120_000, onUpdate }: PollOptions = {},
): Promise<FineTuneJob> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    const job = await client.job(jobId);
    onUpdate?.(job);
    if (job.status === "done") return job;
    if (job.status === "failed") {
      throw new Error(job.error || `job ${jobId} failed`);
    }
    if (Date.now() >= deadline) {
      throw new Error(`job ${jobId} still ${job.status} after ${timeoutMs}ms`);
    }
    await sleep(intervalMs);
  }
}
