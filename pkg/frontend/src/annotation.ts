import type { ApiClient, FeedbackRequest } from "./api.js";
import type { Bitmap } from "./bitmap.js";
import { MaskEditor } from "./maskEditor.js";
import { decodeMaskPng, encodeMaskPng } from "./png.js";
import type { Prediction } from "./types.js";

/**
 * One sample under review: the served prediction, an editable copy of its
 * mask, and the label choice. Nothing is computed locally — the starting
 * mask is exactly what the server rendered.
 */
export class AnnotationState {
  readonly editor: MaskEditor;
  selectedLabel: string;

  constructor(
    readonly sampleId: string,
    readonly prediction: Prediction,
    initialMask: Bitmap,
    readonly imageUrl: string,
  ) {
    this.editor = new MaskEditor(initialMask);
    this.selectedLabel = prediction.predicted_class;
  }

  get labelChanged(): boolean {
    return this.selectedLabel !== this.prediction.predicted_class;
  }

  /** Submitting with nothing corrected is blocked client-side. */
  get canSubmit(): boolean {
    return this.labelChanged || this.editor.dirty;
  }

  async toFeedback(): Promise<FeedbackRequest> {
    if (!this.canSubmit) {
      throw new Error("nothing to submit: neither the label nor the mask changed");
    }
    const request: FeedbackRequest = { sampleId: this.sampleId };
    if (this.labelChanged) request.correctedLabel = this.selectedLabel;
    if (this.editor.dirty) request.maskPng = await encodeMaskPng(this.editor.snapshot());
    return request;
  }
}

/** Fetch a sample's prediction and open its mask for editing. */
export async function openAnnotation(
  client: ApiClient,
  sampleId: string,
  checkpointId?: string,
): Promise<AnnotationState> {
  const prediction = await client.predict({ sampleId, checkpointId });
  const maskBytes = await client.fetchFile(prediction.mask_png);
  const mask = await decodeMaskPng(maskBytes);
  const image = client.fileUrl(`/files/samples/${sampleId}.png`);
  return new AnnotationState(sampleId, prediction, mask, image);
}
