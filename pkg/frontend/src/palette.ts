export interface PaletteEntry {
  id: number;
  name: string;
  rgb: [number, number, number];
}

export type Palette = PaletteEntry[];

export function colorForLabel(palette: Palette, label: number): [number, number, number] {
  const entry = palette.find((e) => e.id === label);
  if (!entry) throw new Error(`label ${label} not in palette`);
  return entry.rgb;
}

/** Nearest palette entry under the L-inf metric; exact colors match exactly. */
export function nearestLabel(palette: Palette, r: number, g: number, b: number): number {
  let best = palette[0].id;
  let bestDist = Infinity;
  for (const entry of palette) {
    const d = Math.max(
      Math.abs(entry.rgb[0] - r),
      Math.abs(entry.rgb[1] - g),
      Math.abs(entry.rgb[2] - b),
    );
    if (d < bestDist) {
      bestDist = d;
      best = entry.id;
    }
  }
  return best;
}
