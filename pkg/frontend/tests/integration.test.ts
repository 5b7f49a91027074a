import { readdir, readFile } from "node:fs/promises";
import { join } from "node:path";
import { describe, expect, inject, it } from "vitest";

import { openAnnotation } from "../src/annotation.js";
import { ApiClient } from "../src/api.js";
import { bitmapsEqual } from "../src/bitmap.js";
import { compareCheckpoints, summarizeImprovement } from "../src/compare.js";
import { pollJob } from "../src/jobs.js";
import { decodeMaskPng } from "../src/png.js";

const GT_MASK_SUFFIX = "_attribute_pigment_network.png";

async function datasetLabels(dataDir: string): Promise<Map<string, string>> {
  const text = await readFile(join(dataDir, "dataset", "labels.csv"), "utf8");
  const labels = new Map<string, string>();
  for (const line of text.split(/\r?\n/).slice(1)) {
    if (!line) continue;
    const [id, label] = line.split(",").map((field) => field.trim());
    labels.set(id, label);
  }
  return labels;
}

describe("against the live service", () => {
  it("carries an edited mask to the server and back bit-for-bit", async () => {
    const client = new ApiClient(inject("serviceUrl"));
    const listing = await client.samples(1, 5);
    expect(listing.items.length).toBeGreaterThan(0);
    const sampleId = listing.items[0].id;

    // open the served prediction and make a human-looking correction
    const state = await openAnnotation(client, sampleId);
    expect(state.editor.width).toBe(32);
    expect(state.editor.height).toBe(32);
    state.editor.mode = "paint";
    state.editor.brushRadius = 3;
    state.editor.beginStroke(8, 8);
    state.editor.strokeTo(22, 14);
    state.editor.strokeTo(16, 24);
    state.editor.endStroke();
    state.editor.mode = "erase";
    state.editor.brushRadius = 1;
    state.editor.beginStroke(10, 9);
    state.editor.strokeTo(13, 9);
    state.editor.endStroke();
    expect(state.canSubmit).toBe(true);

    const masksDir = join(inject("serviceDataDir"), "masks");
    const existing = new Set(await readdir(masksDir));
    const ack = await client.submitFeedback(await state.toFeedback());
    expect(ack.feedback_id).toBeGreaterThan(0);

    // the server decoded, validated, and re-encoded the mask; what it
    // persisted must be pixel-identical to what the editor holds
    const added = (await readdir(masksDir)).filter((name) => !existing.has(name));
    expect(added).toHaveLength(1);
    const stored = await decodeMaskPng(
      new Uint8Array(await readFile(join(masksDir, added[0]))),
    );
    expect(bitmapsEqual(stored, state.editor.snapshot())).toBe(true);
  });

  it("closes the loop: corrections, fine-tune, held-out improvement, compare view", async () => {
    const client = new ApiClient(inject("serviceUrl"));
    const dataDir = inject("serviceDataDir");
    const labels = await datasetLabels(dataDir);

    const listing = await client.samples(1, 48);
    expect(listing.total).toBe(48);

    // submit twenty ground-truth corrections (label plus true mask)
    const feedbackIds: number[] = [];
    for (const sample of listing.items.slice(0, 20)) {
      const maskBytes = await readFile(
        join(dataDir, "dataset", "masks", `${sample.id}${GT_MASK_SUFFIX}`),
      );
      const ack = await client.submitFeedback({
        sampleId: sample.id,
        correctedLabel: labels.get(sample.id)!,
        maskPng: new Uint8Array(maskBytes),
      });
      feedbackIds.push(ack.feedback_id);
    }

    const started = await client.startFinetune({
      feedbackIds,
      config: { lambda: 1.0, epochs: 5, seed: 0 },
    });
    const seen: string[] = [];
    const job = await pollJob(client, started.job_id, {
      intervalMs: 500,
      timeoutMs: 180_000,
      onUpdate: (j) => seen.push(j.status),
    });
    expect(seen.length).toBeGreaterThan(0);
    expect(job.status).toBe("done");
    expect(job.checkpoint_out).not.toBeNull();
    expect(job.checkpoint_out).not.toBe(job.checkpoint_in);

    // the server-side held-out comparison is the loop-closure evidence
    const summary = summarizeImprovement(job);
    expect(summary.total).toBe(12);
    expect(summary.rows).toHaveLength(12);
    expect(summary.fraction).not.toBeNull();
    expect(summary.fraction!).toBeGreaterThanOrEqual(0.6);

    // compare view: same sample explained by both checkpoints
    const pick = summary.rows.find((row) => row.improved)!;
    expect(pick).toBeDefined();
    const pair = await compareCheckpoints(client, pick.sampleId, job.checkpoint_in, job.checkpoint_out!);
    expect(pair.before.checkpoint_id).toBe(job.checkpoint_in);
    expect(pair.after.checkpoint_id).toBe(job.checkpoint_out);
    const beforeMask = await decodeMaskPng(await client.fetchFile(pair.before.mask_png));
    const afterMask = await decodeMaskPng(await client.fetchFile(pair.after.mask_png));
    expect(beforeMask.width).toBe(32);
    expect(afterMask.width).toBe(32);
    // this sample's Jaccard moved, so the rendered masks must differ
    expect(bitmapsEqual(beforeMask, afterMask)).toBe(false);
  });
});
