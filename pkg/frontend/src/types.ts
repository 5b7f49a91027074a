/** Wire types for the feedback service's JSON API. */

export interface SampleSummary {
  id: string;
  label: string;
  has_mask: boolean;
  image_png: string;
}

export interface SamplePage {
  total: number;
  page: number;
  page_size: number;
  items: SampleSummary[];
}

export interface Prediction {
  sample_id: string | null;
  predicted_class: string;
  probabilities: number[];
  classes: string[];
  checkpoint_id: string;
  saliency_png: string;
  mask_png: string;
}

export interface MetricsReportJson {
  accuracy: number;
  per_class_sensitivity: Record<string, number>;
  avg_sensitivity: number;
  avg_jaccard: number | null;
  jaccard_sd: number | null;
  n_samples: number;
  threshold_used: number;
}

export interface HoldoutComparison {
  improved: number;
  total: number;
  improved_fraction: number | null;
  per_sample: Record<string, { before: number; after: number }>;
}

export type JobStatus = "queued" | "running" | "done" | "failed";

export interface FineTuneJob {
  id: number;
  status: JobStatus;
  checkpoint_in: string;
  checkpoint_out: string | null;
  config: Record<string, unknown>;
  feedback_ids: number[];
  metrics_before: MetricsReportJson | null;
  metrics_after: MetricsReportJson | null;
  holdout_comparison: HoldoutComparison | null;
  error: string | null;
  created_at: string;
  updated_at: string;
}

export interface CheckpointInfo {
  id: string;
  path: string;
  parent: string | null;
  job_id: number | null;
  created_at: string;
}

export interface TrainingOverrides {
  lambda?: number;
  epochs?: number;
  learning_rate?: number;
  seed?: number;
  threshold?: number;
}
