import type {
  CheckpointInfo,
  FineTuneJob,
  MetricsReportJson,
  Prediction,
  SamplePage,
  TrainingOverrides,
} from "./types.js";

/** HTTP failure with the server's status code and detail message. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
    this.name = "ApiError";
  }
}

export interface PredictRequest {
  sampleId?: string;
  /** Pin a specific checkpoint instead of the active one (compare view). */
  checkpointId?: string;
  imageBlob?: Blob;
}

export interface FeedbackRequest {
  sampleId: string;
  correctedLabel?: string;
  /** Encoded binary mask PNG at image resolution. */
  maskPng?: Uint8Array;
}

/**
 * Thin typed client over the service API. All model math stays on the
 * server; this never computes saliency or metrics itself.
 */
export class ApiClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  /** Absolute URL for a server-rendered file path like /files/... */
  fileUrl(path: string): string {
    return this.baseUrl + path;
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchImpl(this.baseUrl + path, init);
    let body: unknown = null;
    const text = await response.text();
    if (text) {
      try {
        body = JSON.parse(text);
      } catch {
        body = text;
      }
    }
    if (!response.ok) {
      const detail =
        body && typeof body === "object" && "detail" in body
          ? String((body as { detail: unknown }).detail)
          : String(body ?? response.statusText);
      throw new ApiError(response.status, detail);
    }
    return body as T;
  }

  private postJson<T>(path: string, payload: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  health(): Promise<{ status: string; active_checkpoint: string }> {
    return this.request("/health");
  }

  samples(page = 1, pageSize = 20): Promise<SamplePage> {
    return this.request(`/samples?page=${page}&page_size=${pageSize}`);
  }

  predict(req: PredictRequest): Promise<Prediction> {
    if (req.imageBlob) {
      const form = new FormData();
      if (req.sampleId) form.set("sample_id", req.sampleId);
      if (req.checkpointId) form.set("checkpoint_id", req.checkpointId);
      form.set("image", new File([req.imageBlob], "upload.png", { type: "image/png" }));
      return this.request("/predict", { method: "POST", body: form });
    }
    const payload: Record<string, string> = {};
    if (req.sampleId) payload.sample_id = req.sampleId;
    if (req.checkpointId) payload.checkpoint_id = req.checkpointId;
    return this.postJson("/predict", payload);
  }

  submitFeedback(req: FeedbackRequest): Promise<{ feedback_id: number }> {
    if (req.maskPng) {
      const form = new FormData();
      form.set("sample_id", req.sampleId);
      if (req.correctedLabel) form.set("corrected_label", req.correctedLabel);
      form.set(
        "corrected_mask",
        new File([req.maskPng as BlobPart], "mask.png", { type: "image/png" }),
      );
      return this.request("/feedback", { method: "POST", body: form });
    }
    return this.postJson("/feedback", {
      sample_id: req.sampleId,
      corrected_label: req.correctedLabel,
    });
  }

  startFinetune(options: {
    feedbackIds?: number[] | "all-pending";
    config?: TrainingOverrides;
  } = {}): Promise<{ job_id: number }> {
    const payload: Record<string, unknown> = {};
    if (options.feedbackIds !== undefined) payload.feedback_ids = options.feedbackIds;
    if (options.config !== undefined) payload.config = options.config;
    return this.postJson("/finetune", payload);
  }

  job(jobId: number): Promise<FineTuneJob> {
    return this.request(`/jobs/${jobId}`);
  }

  jobs(): Promise<{ jobs: FineTuneJob[] }> {
    return this.request("/jobs");
  }

  checkpoints(): Promise<{ active: string; checkpoints: CheckpointInfo[] }> {
    return this.request("/checkpoints");
  }

  rollback(checkpointId: string): Promise<{ active: string }> {
    return this.request(`/checkpoints/${checkpointId}/rollback`, { method: "POST" });
  }

  metricsLatest(): Promise<{
    checkpoint_id: string;
    job_id: number | null;
    metrics: MetricsReportJson;
  }> {
    return this.request("/metrics/latest");
  }

  /** Raw bytes of a served file (sample image, saliency or mask PNG). */
  async fetchFile(path: string): Promise<Uint8Array> {
    const response = await this.fetchImpl(this.fileUrl(path));
    if (!response.ok) {
      throw new ApiError(response.status, `failed to fetch ${path}`);
    }
    return new Uint8Array(await response.arrayBuffer());
  }
}
