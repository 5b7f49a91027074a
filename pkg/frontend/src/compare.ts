import type { ApiClient } from "./api.js";
import type { FineTuneJob, Prediction } from "./types.js";

export interface CheckpointComparison {
  sampleId: string;
  before: Prediction;
  after: Prediction;
}

/**
 * The same sample explained by two checkpoints, for side-by-side overlays.
 * Uses checkpoint-pinned prediction, so the active pointer never moves.
 */
export async function compareCheckpoints(
  client: ApiClient,
  sampleId: string,
  beforeCheckpoint: string,
  afterCheckpoint: string,
): Promise<CheckpointComparison> {
  const [before, after] = await Promise.all([
    client.predict({ sampleId, checkpointId: beforeCheckpoint }),
    client.predict({ sampleId, checkpointId: afterCheckpoint }),
  ]);
  return { sampleId, before, after };
}

export interface ImprovementRow {
  sampleId: string;
  before: number;
  after: number;
  improved: boolean;
}

export interface ImprovementSummary {
  improved: number;
  total: number;
  fraction: number | null;
  rows: ImprovementRow[];
}

/**
 * Per-sample held-out Jaccard comparison attached to a done job; the
 * numbers are computed server-side against ground truth.
 */
export function summarizeImprovement(job: FineTuneJob): ImprovementSummary {
  const comparison = job.holdout_comparison;
  if (!comparison) {
    return { improved: 0, total: 0, fraction: null, rows: [] };
  }
  const rows = Object.entries(comparison.per_sample)
    .map(([sampleId, v]) => ({
      sampleId,
      before: v.before,
      after: v.after,
      improved: v.after > v.before,
    }))
    .sort((a, b) => a.sampleId.localeCompare(b.sampleId));
  return {
    improved: comparison.improved,
    total: comparison.total,
    fraction: comparison.improved_fraction,
    rows,
  };
}
