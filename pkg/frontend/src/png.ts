/**
 * Minimal PNG codec for the masks this client exchanges with the server:
 * 8-bit grayscale, non-interlaced. Decoding handles all five PNG row
 * filters (server-side encoders pick them freely); encoding always writes
 * filter 0, which any decoder accepts. Compression rides on the platform's
 * CompressionStream / DecompressionStream, available in browsers and node.
 */

import type { Bitmap } from "./bitmap.js";

const SIGNATURE = [0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a];

export interface GrayImage {
  width: number;
  height: number;
  /** Raw 0..255 grayscale values, row-major. */
  pixels: Uint8Array;
}

// -- zlib via web streams ------------------------------------------------

async function pipeBytes(
  bytes: Uint8Array,
  stream: CompressionStream | DecompressionStream,
): Promise<Uint8Array> {
  const blob = new Blob([bytes as BlobPart]);
  const response = new Response(blob.stream().pipeThrough(stream));
  return new Uint8Array(await response.arrayBuffer());
}

const deflate = (bytes: Uint8Array) => pipeBytes(bytes, new CompressionStream("deflate"));
const inflate = (bytes: Uint8Array) => pipeBytes(bytes, new DecompressionStream("deflate"));

// -- CRC32 (the PNG flavor) ------------------------------------------------

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c >>> 0;
  }
  return table;
})();

function crc32(...parts: Uint8Array[]): number {
  let c = 0xffffffff;
  for (const part of parts) {
    for (let i = 0; i < part.length; i++) {
      c = CRC_TABLE[(c ^ part[i]) & 0xff] ^ (c >>> 8);
    }
  }
  return (c ^ 0xffffffff) >>> 0;
}

// -- chunk plumbing ----------------------------------------------------------

function u32be(value: number): Uint8Array {
  return new Uint8Array([(value >>> 24) & 0xff, (value >>> 16) & 0xff, (value >>> 8) & 0xff, value & 0xff]);
}

function readU32be(bytes: Uint8Array, at: number): number {
  return ((bytes[at] << 24) | (bytes[at + 1] << 16) | (bytes[at + 2] << 8) | bytes[at + 3]) >>> 0;
}

function chunk(type: string, data: Uint8Array): Uint8Array {
  const typeBytes = new TextEncoder().encode(type);
  const out = new Uint8Array(12 + data.length);
  out.set(u32be(data.length), 0);
  out.set(typeBytes, 4);
  out.set(data, 8);
  out.set(u32be(crc32(typeBytes, data)), 8 + data.length);
  return out;
}

function concat(parts: Uint8Array[]): Uint8Array {
  const total = parts.reduce((n, p) => n + p.length, 0);
  const out = new Uint8Array(total);
  let at = 0;
  for (const p of parts) {
    out.set(p, at);
    at += p.length;
  }
  return out;
}

// -- encode ----------------------------------------------------------------

/** Encode raw grayscale pixels as a non-interlaced 8-bit PNG. */
export async function encodeGrayPng(image: GrayImage): Promise<Uint8Array> {
  const { width, height, pixels } = image;
  if (pixels.length !== width * height) {
    throw new Error(`pixel buffer is ${pixels.length} bytes, expected ${width * height}`);
  }
  const ihdr = new Uint8Array(13);
  ihdr.set(u32be(width), 0);
  ihdr.set(u32be(height), 4);
  ihdr[8] = 8; // bit depth
  ihdr[9] = 0; // color type: grayscale
  // bytes 10..12: compression, filter, interlace — all zero

  const raw = new Uint8Array((width + 1) * height);
  for (let y = 0; y < height; y++) {
    raw[y * (width + 1)] = 0; // filter type 0 per row
    raw.set(pixels.subarray(y * width, (y + 1) * width), y * (width + 1) + 1);
  }
  const idat = await deflate(raw);
  return concat([
    new Uint8Array(SIGNATURE),
    chunk("IHDR", ihdr),
    chunk("IDAT", idat),
    chunk("IEND", new Uint8Array(0)),
  ]);
}

/** Encode a binary mask as a {0, 255} grayscale PNG — the wire format. */
export async function encodeMaskPng(bitmap: Bitmap): Promise<Uint8Array> {
  const pixels = new Uint8Array(bitmap.data.length);
  for (let i = 0; i < bitmap.data.length; i++) {
    const v = bitmap.data[i];
    if (v !== 0 && v !== 1) throw new Error(`bitmap value ${v} at ${i}; masks are 0/1`);
    pixels[i] = v ? 255 : 0;
  }
  return encodeGrayPng({ width: bitmap.width, height: bitmap.height, pixels });
}

// -- decode ----------------------------------------------------------------

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

/** Decode a non-interlaced 8-bit grayscale PNG (any row filters). */
export async function decodeGrayPng(bytes: Uint8Array): Promise<GrayImage> {
  for (let i = 0; i < SIGNATURE.length; i++) {
    if (bytes[i] !== SIGNATURE[i]) throw new Error("not a PNG file");
  }
  let at = 8;
  let width = 0;
  let height = 0;
  let seenIhdr = false;
  const idatParts: Uint8Array[] = [];
  while (at + 12 <= bytes.length) {
    const length = readU32be(bytes, at);
    const type = new TextDecoder().decode(bytes.subarray(at + 4, at + 8));
    const data = bytes.subarray(at + 8, at + 8 + length);
    if (type === "IHDR") {
      width = readU32be(data, 0);
      height = readU32be(data, 4);
      const [depth, color, , , interlace] = [data[8], data[9], data[10], data[11], data[12]];
      if (depth !== 8 || color !== 0) {
        throw new Error(`unsupported PNG: bit depth ${depth}, color type ${color} (need 8-bit grayscale)`);
      }
      if (interlace !== 0) throw new Error("interlaced PNGs are not supported");
      seenIhdr = true;
    } else if (type === "IDAT") {
      idatParts.push(data);
    } else if (type === "IEND") {
      break;
    }
    at += 12 + length;
  }
  if (!seenIhdr || idatParts.length === 0) throw new Error("PNG is missing IHDR or IDAT");

  const raw = await inflate(concat(idatParts));
  const stride = width + 1;
  if (raw.length < stride * height) {
    throw new Error(`decompressed scanlines are ${raw.length} bytes, expected ${stride * height}`);
  }
  const pixels = new Uint8Array(width * height);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * stride];
    const row = raw.subarray(y * stride + 1, y * stride + 1 + width);
    const out = pixels.subarray(y * width, (y + 1) * width);
    const above = y > 0 ? pixels.subarray((y - 1) * width, y * width) : null;
    for (let x = 0; x < width; x++) {
      const a = x > 0 ? out[x - 1] : 0;
      const b = above ? above[x] : 0;
      const c = x > 0 && above ? above[x - 1] : 0;
      let value: number;
      switch (filter) {
        case 0: value = row[x]; break;
        case 1: value = row[x] + a; break;
        case 2: value = row[x] + b; break;
        case 3: value = row[x] + ((a + b) >> 1); break;
        case 4: value = row[x] + paeth(a, b, c); break;
        default: throw new Error(`unknown PNG filter type ${filter} on row ${y}`);
      }
      out[x] = value & 0xff;
    }
  }
  return { width, height, pixels };
}

/** Decode a mask PNG, insisting on the binary {0, 255} wire contract. */
export async function decodeMaskPng(bytes: Uint8Array): Promise<Bitmap> {
  const image = await decodeGrayPng(bytes);
  const data = new Uint8Array(image.pixels.length);
  for (let i = 0; i < image.pixels.length; i++) {
    const v = image.pixels[i];
    if (v !== 0 && v !== 255) {
      throw new Error(`mask pixel ${v} at index ${i}; the wire format is binary {0, 255}`);
    }
    data[i] = v === 255 ? 1 : 0;
  }
  return { width: image.width, height: image.height, data };
}
