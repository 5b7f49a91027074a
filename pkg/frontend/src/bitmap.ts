/** A binary mask: row-major bytes, each 0 or 1. */
export interface Bitmap {
  width: number;
  height: number;
  data: Uint8Array;
}

export function createBitmap(width: number, height: number, fill: 0 | 1 = 0): Bitmap {
  if (width < 1 || height < 1 || !Number.isInteger(width) || !Number.isInteger(height)) {
    throw new Error(`bitmap dimensions must be positive integers, got ${width}x${height}`);
  }
  const data = new Uint8Array(width * height);
  if (fill) data.fill(1);
  return { width, height, data };
}

export function cloneBitmap(bitmap: Bitmap): Bitmap {
  return { width: bitmap.width, height: bitmap.height, data: new Uint8Array(bitmap.data) };
}

export function bitmapsEqual(a: Bitmap, b: Bitmap): boolean {
  if (a.width !== b.width || a.height !== b.height) return false;
  for (let i = 0; i < a.data.length; i++) {
    if (a.data[i] !== b.data[i]) return false;
  }
  return true;
}

/** Build a bitmap from nested rows of 0/1 — handy in tests and fixtures. */
export function bitmapFromRows(rows: number[][]): Bitmap {
  const height = rows.length;
  const width = rows[0]?.length ?? 0;
  const bitmap = createBitmap(width, height);
  for (let y = 0; y < height; y++) {
    if (rows[y].length !== width) throw new Error("ragged rows");
    for (let x = 0; x < width; x++) {
      bitmap.data[y * width + x] = rows[y][x] ? 1 : 0;
    }
  }
  return bitmap;
}

export function countOnes(bitmap: Bitmap): number {
  let n = 0;
  for (const v of bitmap.data) n += v;
  return n;
}
