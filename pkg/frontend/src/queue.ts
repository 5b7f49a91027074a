import type { ApiClient } from "./api.js";
import type { Prediction, SampleSummary } from "./types.js";

export interface ReviewItem {
  sample: SampleSummary;
  prediction: Prediction;
  imageUrl: string;
}

export interface ReviewQueuePage {
  total: number;
  page: number;
  pages: number;
  items: ReviewItem[];
}

export function pageCount(total: number, pageSize: number): number {
  return total === 0 ? 0 : Math.ceil(total / pageSize);
}

/**
 * One page of samples with their current predictions. Predictions come
 * from individual /predict calls — fine for a desk-scale review tool.
 */
export async function loadReviewQueue(
  client: ApiClient,
  page = 1,
  pageSize = 10,
): Promise<ReviewQueuePage> {
  const listing = await client.samples(page, pageSize);
  const items = await Promise.all(
    listing.items.map(async (sample) => ({
      sample,
      prediction: await client.predict({ sampleId: sample.id }),
      imageUrl: client.fileUrl(sample.image_png),
    })),
  );
  return {
    total: listing.total,
    page: listing.page,
    pages: pageCount(listing.total, listing.page_size),
    items,
  };
}
