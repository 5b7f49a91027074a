import { Bitmap, bitmapsEqual, cloneBitmap } from "./bitmap.js";

export type BrushMode = "paint" | "erase";

export interface StrokePoint {
  x: number;
  y: number;
}

/** A finished brush gesture, replayable via applyStroke. */
export interface Stroke {
  mode: BrushMode;
  radius: number;
  points: StrokePoint[];
}

/**
 * Editable binary mask with a brush and bounded undo.
 *
 * Geometry contract (tests replay it independently): a stamp sets every
 * pixel within euclidean distance `radius` of the rounded center, and a
 * segment between two points stamps at max(|dx|, |dy|) + 1 evenly spaced,
 * rounded positions including both ends. Paint writes 1, erase writes 0;
 * the bitmap never holds anything else.
 */
export class MaskEditor {
  private bitmap: Bitmap;
  private readonly original: Bitmap;
  private undoStack: Bitmap[] = [];
  private redoStack: Bitmap[] = [];
  private activeStroke: Stroke | null = null;

  mode: BrushMode = "paint";
  brushRadius = 2;

  constructor(
    initial: Bitmap,
    readonly maxUndo = 25,
  ) {
    if (maxUndo < 20) {
      // the tool promises at least 20 reversible gestures
      throw new Error(`undo depth ${maxUndo} is below the guaranteed 20`);
    }
    this.bitmap = cloneBitmap(initial);
    this.original = cloneBitmap(initial);
  }

  get width(): number {
    return this.bitmap.width;
  }

  get height(): number {
    return this.bitmap.height;
  }

  /** True once the mask differs from what the editor started with. */
  get dirty(): boolean {
    return !bitmapsEqual(this.bitmap, this.original);
  }

  get canUndo(): boolean {
    return this.undoStack.length > 0;
  }

  get canRedo(): boolean {
    return this.redoStack.length > 0;
  }

  /** Copy of the current mask, safe to hand to renderers or encoders. */
  snapshot(): Bitmap {
    return cloneBitmap(this.bitmap);
  }

  valueAt(x: number, y: number): 0 | 1 {
    return this.bitmap.data[y * this.bitmap.width + x] as 0 | 1;
  }

  beginStroke(x: number, y: number): void {
    if (this.activeStroke) this.endStroke();
    this.undoStack.push(cloneBitmap(this.bitmap));
    if (this.undoStack.length > this.maxUndo) this.undoStack.shift();
    this.redoStack = [];
    this.activeStroke = { mode: this.mode, radius: this.brushRadius, points: [{ x, y }] };
    this.stamp(x, y, this.brushRadius, this.mode);
  }

  strokeTo(x: number, y: number): void {
    if (!this.activeStroke) throw new Error("strokeTo before beginStroke");
    const points = this.activeStroke.points;
    const last = points[points.length - 1];
    this.stampSegment(last.x, last.y, x, y, this.activeStroke.radius, this.activeStroke.mode);
    points.push({ x, y });
  }

  /** Finish the gesture and return it in replayable form. */
  endStroke(): Stroke | null {
    const stroke = this.activeStroke;
    this.activeStroke = null;
    return stroke;
  }

  /** Re-run a recorded gesture (scripted edits, session replay). */
  applyStroke(stroke: Stroke): void {
    const keepMode = this.mode;
    const keepRadius = this.brushRadius;
    this.mode = stroke.mode;
    this.brushRadius = stroke.radius;
    const [first, ...rest] = stroke.points;
    this.beginStroke(first.x, first.y);
    for (const p of rest) this.strokeTo(p.x, p.y);
    this.endStroke();
    this.mode = keepMode;
    this.brushRadius = keepRadius;
  }

  undo(): boolean {
    const previous = this.undoStack.pop();
    if (!previous) return false;
    this.redoStack.push(this.bitmap);
    this.bitmap = previous;
    return true;
  }

  redo(): boolean {
    const next = this.redoStack.pop();
    if (!next) return false;
    this.undoStack.push(this.bitmap);
    this.bitmap = next;
    return true;
  }

  private stampSegment(
    x0: number,
    y0: number,
    x1: number,
    y1: number,
    radius: number,
    mode: BrushMode,
  ): void {
    const steps = Math.max(Math.abs(Math.round(x1) - Math.round(x0)), Math.abs(Math.round(y1) - Math.round(y0)));
    for (let t = 1; t <= Math.max(steps, 1); t++) {
      const f = t / Math.max(steps, 1);
      this.stamp(x0 + (x1 - x0) * f, y0 + (y1 - y0) * f, radius, mode);
    }
  }

  private stamp(x: number, y: number, radius: number, mode: BrushMode): void {
    const cx = Math.round(x);
    const cy = Math.round(y);
    const value = mode === "paint" ? 1 : 0;
    const r = Math.max(0, Math.floor(radius));
    const { width, height, data } = this.bitmap;
    for (let dy = -r; dy <= r; dy++) {
      const py = cy + dy;
      if (py < 0 || py >= height) continue;
      for (let dx = -r; dx <= r; dx++) {
        const px = cx + dx;
        if (px < 0 || px >= width) continue;
        if (dx * dx + dy * dy <= r * r) data[py * width + px] = value;
      }
    }
  }
}
