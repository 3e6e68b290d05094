import { Palette, colorForLabel, nearestLabel } from "./palette.js";

export interface Point {
  x: number;
  y: number;
}

/**
 * Label raster at native mask resolution. Pixels hold class ids, never
 * colors, so any rendering of the raster is palette-constrained by
 * construction. All edits happen here; the canvas is a projection.
 */
export class LabelRaster {
  readonly width: number;
  readonly height: number;
  readonly labels: Uint8Array;

  constructor(width: number, height: number, labels?: Uint8Array) {
    this.width = width;
    this.height = height;
    this.labels = labels ?? new Uint8Array(width * height);
    if (this.labels.length !== width * height) {
      throw new Error(`label buffer length ${this.labels.length} != ${width * height}`);
    }
  }

  clone(): LabelRaster {
    return new LabelRaster(this.width, this.height, this.labels.slice());
  }

  equals(other: LabelRaster): boolean {
    if (other.width !== this.width || other.height !== this.height) return false;
    for (let i = 0; i < this.labels.length; i++) {
      if (this.labels[i] !== other.labels[i]) return false;
    }
    return true;
  }

  get(x: number, y: number): number {
    return this.labels[y * this.width + x];
  }

  /** Decode a server pseudo-color image (RGBA bytes) into labels. */
  static fromRGBA(data: Uint8ClampedArray, width: number, height: number, palette: Palette): LabelRaster {
    const labels = new Uint8Array(width * height);
    for (let i = 0; i < width * height; i++) {
      labels[i] = nearestLabel(palette, data[i * 4], data[i * 4 + 1], data[i * 4 + 2]);
    }
    return new LabelRaster(width, height, labels);
  }

  /** Render to RGBA bytes through the palette lookup table (opaque). */
  toRGBA(palette: Palette): Uint8ClampedArray<ArrayBuffer> {
    const lut = new Map(palette.map((e) => [e.id, e.rgb]));
    const out = new Uint8ClampedArray(this.width * this.height * 4);
    for (let i = 0; i < this.labels.length; i++) {
      const rgb = lut.get(this.labels[i]);
      if (!rgb) throw new Error(`label ${this.labels[i]} not in palette`);
      out[i * 4] = rgb[0];
      out[i * 4 + 1] = rgb[1];
      out[i * 4 + 2] = rgb[2];
      out[i * 4 + 3] = 255;
    }
    return out;
  }

  /**
   * Stamp a filled disc of the given label. When a damage mask is supplied,
   * only damaged pixels (mask byte != 0) are written - the context-lock
   * behavior that keeps the intact region untouched.
   */
  paintDisc(cx: number, cy: number, radius: number, label: number, damage?: Uint8Array | null): void {
    const r2 = radius * radius;
    const x0 = Math.max(0, Math.floor(cx - radius));
    const x1 = Math.min(this.width - 1, Math.ceil(cx + radius));
    const y0 = Math.max(0, Math.floor(cy - radius));
    const y1 = Math.min(this.height - 1, Math.ceil(cy + radius));
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        const dy = y - cy;
        if (dx * dx + dy * dy > r2) continue;
        const idx = y * this.width + x;
        if (damage && damage[idx] === 0) continue;
        this.labels[idx] = label;
      }
    }
  }

  /** Stamp discs along a polyline at sub-pixel spacing so strokes have no gaps. */
  paintStroke(points: Point[], radius: number, label: number, damage?: Uint8Array | null): void {
    if (points.length === 0) return;
    let prev = points[0];
    this.paintDisc(prev.x, prev.y, radius, label, damage);
    for (const p of points.slice(1)) {
      const dist = Math.hypot(p.x - prev.x, p.y - prev.y);
      const steps = Math.max(1, Math.ceil(dist));
      for (let s = 1; s <= steps; s++) {
        const t = s / steps;
        this.paintDisc(prev.x + (p.x - prev.x) * t, prev.y + (p.y - prev.y) * t, radius, label, damage);
      }
      prev = p;
    }
  }

  /** Every color the palette would render this raster with (for invariant checks). */
  usedColors(palette: Palette): Array<[number, number, number]> {
    const seen = new Set<number>();
    for (const label of this.labels) seen.add(label);
    return [...seen].map((l) => colorForLabel(palette, l));
  }
}
