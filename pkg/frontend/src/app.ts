import { ApiClient, ApiError } from "./api.js";
import { AnnotationState, openAnnotation } from "./annotation.js";
import type { Bitmap } from "./bitmap.js";
import { compareCheckpoints, summarizeImprovement } from "./compare.js";
import { pollJob } from "./jobs.js";
import { encodeMaskPng } from "./png.js";
import { loadReviewQueue, ReviewQueuePage } from "./queue.js";
import type { FineTuneJob } from "./types.js";

/** Base64 data URL for a mask bitmap, rendered as a semi-transparent overlay. */
export async function maskToDataUrl(bitmap: Bitmap): Promise<string> {
  const png = await encodeMaskPng(bitmap);
  let binary = "";
  const CHUNK = 0x8000;
  for (let i = 0; i < png.length; i += CHUNK) {
    binary += String.fromCharCode(...png.subarray(i, i + CHUNK));
  }
  return `data:image/png;base64,${btoa(binary)}`;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

/** Map a pointer event to bitmap pixel coordinates. */
export function eventToPixel(
  event: { clientX: number; clientY: number },
  target: HTMLElement,
  bitmap: { width: number; height: number },
): { x: number; y: number } | null {
  const rect = target.getBoundingClientRect();
  if (rect.width <= 0 || rect.height <= 0) return null;
  const x = ((event.clientX - rect.left) / rect.width) * bitmap.width;
  const y = ((event.clientY - rect.top) / rect.height) * bitmap.height;
  if (x < 0 || y < 0 || x >= bitmap.width || y >= bitmap.height) return null;
  return { x, y };
}

export function renderGallery(
  page: ReviewQueuePage,
  onPick: (sampleId: string) => void,
): HTMLElement {
  const root = el("div", "gallery");
  if (page.items.length === 0) {
    root.appendChild(el("p", "empty-state", "No samples to review."));
    return root;
  }
  for (const item of page.items) {
    const card = el("button", "gallery-card");
    card.type = "button";
    card.dataset.sampleId = item.sample.id;
    const thumb = el("img", "gallery-thumb");
    thumb.src = item.imageUrl;
    thumb.alt = item.sample.id;
    card.appendChild(thumb);
    card.appendChild(el("div", "gallery-label", `${item.sample.id}: ${item.prediction.predicted_class}`));
    card.addEventListener("click", () => onPick(item.sample.id));
    root.appendChild(card);
  }
  root.appendChild(el("div", "gallery-pages", `page ${page.page} of ${page.pages}`));
  return root;
}

export function renderImprovementTable(job: FineTuneJob): HTMLElement {
  const summary = summarizeImprovement(job);
  const root = el("div", "improvement");
  if (summary.total === 0) {
    root.appendChild(el("p", "empty-state", "No held-out comparison on this job."));
    return root;
  }
  const pct = summary.fraction === null ? "-" : `${Math.round(summary.fraction * 100)}%`;
  root.appendChild(
    el("p", "improvement-headline", `${summary.improved} of ${summary.total} held-out samples improved (${pct})`),
  );
  const table = el("table", "improvement-table");
  const head = el("tr");
  for (const title of ["sample", "before", "after", ""]) head.appendChild(el("th", undefined, title));
  table.appendChild(head);
  for (const row of summary.rows) {
    const tr = el("tr", row.improved ? "improved" : "not-improved");
    tr.appendChild(el("td", undefined, row.sampleId));
    tr.appendChild(el("td", undefined, row.before.toFixed(3)));
    tr.appendChild(el("td", undefined, row.after.toFixed(3)));
    tr.appendChild(el("td", undefined, row.improved ? "↑" : "·"));
    table.appendChild(tr);
  }
  root.appendChild(table);
  return root;
}

/**
 * The single-page app: gallery on the left, annotation editor in the
 * middle, training/compare panel on the right.
 */
export class App {
  private annotation: AnnotationState | null = null;
  private readonly galleryPane: HTMLElement;
  private readonly editorPane: HTMLElement;
  private readonly trainPane: HTMLElement;
  private status: HTMLElement;
  private page = 1;

  constructor(
    private readonly root: HTMLElement,
    private readonly client: ApiClient,
  ) {
    this.root.innerHTML = "";
    this.status = el("div", "status-bar", "loading…");
    this.galleryPane = el("section", "pane gallery-pane");
    this.editorPane = el("section", "pane editor-pane");
    this.trainPane = el("section", "pane train-pane");
    const main = el("main", "layout");
    main.append(this.galleryPane, this.editorPane, this.trainPane);
    this.root.append(this.status, main);
  }

  async start(): Promise<void> {
    try {
      const health = await this.client.health();
      this.setStatus(`connected — active checkpoint ${health.active_checkpoint}`);
      await this.refreshGallery();
      this.renderTrainPane();
    } catch (err) {
      this.setStatus(this.describe(err), true);
    }
  }

  setStatus(text: string, isError = false): void {
    this.status.textContent = text;
    this.status.classList.toggle("error", isError);
  }

  private describe(err: unknown): string {
    if (err instanceof ApiError) return err.message;
    return err instanceof Error ? err.message : String(err);
  }

  async refreshGallery(): Promise<void> {
    const queue = await loadReviewQueue(this.client, this.page, 10);
    this.galleryPane.innerHTML = "";
    this.galleryPane.appendChild(renderGallery(queue, (id) => void this.open(id)));
  }

  async open(sampleId: string): Promise<void> {
    try {
      this.annotation = await openAnnotation(this.client, sampleId);
      await this.renderEditor();
    } catch (err) {
      this.setStatus(this.describe(err), true);
    }
  }

  private async renderEditor(): Promise<void> {
    const state = this.annotation;
    this.editorPane.innerHTML = "";
    if (!state) {
      this.editorPane.appendChild(el("p", "empty-state", "Pick a sample to review."));
      return;
    }
    const title = el("h2", undefined, `${state.sampleId} — predicted ${state.prediction.predicted_class}`);

    // image with the editable mask at 50% opacity on top
    const stage = el("div", "stage");
    const image = el("img", "stage-image");
    image.src = state.imageUrl;
    const overlay = el("img", "stage-overlay");
    overlay.src = await maskToDataUrl(state.editor.snapshot());
    overlay.draggable = false;
    stage.append(image, overlay);
    this.wireBrush(stage, overlay, state);

    const saliency = el("img", "saliency-thumb");
    saliency.src = this.client.fileUrl(state.prediction.saliency_png);
    saliency.title = "model saliency (server-rendered)";

    const labelSelect = el("select", "label-select");
    for (const cls of state.prediction.classes) {
      const option = el("option", undefined, cls);
      option.value = cls;
      option.selected = cls === state.selectedLabel;
      labelSelect.appendChild(option);
    }
    labelSelect.addEventListener("change", () => {
      state.selectedLabel = labelSelect.value;
      this.syncSubmit(submit, state);
    });

    const controls = el("div", "controls");
    const paint = el("button", "tool", "paint");
    const erase = el("button", "tool", "erase");
    paint.addEventListener("click", () => (state.editor.mode = "paint"));
    erase.addEventListener("click", () => (state.editor.mode = "erase"));
    const undo = el("button", "tool", "undo");
    const redo = el("button", "tool", "redo");
    undo.addEventListener("click", async () => {
      state.editor.undo();
      overlay.src = await maskToDataUrl(state.editor.snapshot());
      this.syncSubmit(submit, state);
    });
    redo.addEventListener("click", async () => {
      state.editor.redo();
      overlay.src = await maskToDataUrl(state.editor.snapshot());
      this.syncSubmit(submit, state);
    });
    const submit = el("button", "submit", "submit feedback");
    submit.addEventListener("click", () => void this.submit(state));
    this.syncSubmit(submit, state);
    controls.append(paint, erase, undo, redo, labelSelect, submit);

    this.editorPane.append(title, stage, saliency, controls);

    // repaint the overlay after strokes
    stage.addEventListener("pointerup", async () => {
      overlay.src = await maskToDataUrl(state.editor.snapshot());
      this.syncSubmit(submit, state);
    });
  }

  private syncSubmit(button: HTMLButtonElement, state: AnnotationState): void {
    button.disabled = !state.canSubmit;
  }

  private wireBrush(stage: HTMLElement, overlay: HTMLElement, state: AnnotationState): void {
    let drawing = false;
    stage.addEventListener("pointerdown", (event) => {
      const p = eventToPixel(event, overlay, state.editor);
      if (!p) return;
      drawing = true;
      state.editor.beginStroke(p.x, p.y);
    });
    stage.addEventListener("pointermove", (event) => {
      if (!drawing) return;
      const p = eventToPixel(event, overlay, state.editor);
      if (p) state.editor.strokeTo(p.x, p.y);
    });
    const finish = () => {
      if (!drawing) return;
      drawing = false;
      state.editor.endStroke();
    };
    stage.addEventListener("pointerup", finish);
    stage.addEventListener("pointerleave", finish);
  }

  private async submit(state: AnnotationState): Promise<void> {
    try {
      const request = await state.toFeedback();
      const ack = await this.client.submitFeedback(request);
      this.setStatus(`feedback #${ack.feedback_id} stored for ${state.sampleId}`);
      this.annotation = null;
      await this.renderEditor();
    } catch (err) {
      this.setStatus(this.describe(err), true);
    }
  }

  private renderTrainPane(): void {
    this.trainPane.innerHTML = "";
    const button = el("button", "finetune", "fine-tune on pending feedback");
    const progress = el("div", "job-progress");
    const result = el("div", "job-result");
    button.addEventListener("click", async () => {
      button.disabled = true;
      try {
        const started = await this.client.startFinetune({ config: { lambda: 1.0 } });
        const job = await pollJob(this.client, started.job_id, {
          onUpdate: (j) => (progress.textContent = `job ${j.id}: ${j.status}`),
        });
        result.innerHTML = "";
        result.appendChild(renderImprovementTable(job));
        if (job.checkpoint_out) {
          result.appendChild(await this.renderCompare(job));
        }
        this.setStatus(`job ${job.id} done — active checkpoint ${job.checkpoint_out}`);
      } catch (err) {
        this.setStatus(this.describe(err), true);
      } finally {
        button.disabled = false;
      }
    });
    this.trainPane.append(button, progress, result);
  }

  private async renderCompare(job: FineTuneJob): Promise<HTMLElement> {
    const root = el("div", "compare");
    const summary = summarizeImprovement(job);
    const pick = summary.rows.find((r) => r.improved) ?? summary.rows[0];
    if (!pick || !job.checkpoint_out) return root;
    const pair = await compareCheckpoints(this.client, pick.sampleId, job.checkpoint_in, job.checkpoint_out);
    for (const [caption, prediction] of [
      [`before (${pair.before.checkpoint_id})`, pair.before],
      [`after (${pair.after.checkpoint_id})`, pair.after],
    ] as const) {
      const cell = el("figure", "compare-cell");
      const img = el("img");
      img.src = this.client.fileUrl(prediction.mask_png);
      cell.appendChild(img);
      cell.appendChild(el("figcaption", undefined, `${caption}: ${prediction.predicted_class}`));
      root.appendChild(cell);
    }
    return root;
  }
}

export function mountApp(root: HTMLElement, baseUrl: string): App {
  const app = new App(root, new ApiClient(baseUrl));
  void app.start();
  return app;
}
