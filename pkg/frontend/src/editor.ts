import { LabelRaster, Point } from "./raster.js";

export const UNDO_DEPTH = 50; // contract: at least 20 steps

/**
 * Editing state over one semantic mask: the working raster, the damage mask
 * that the context lock respects, and a snapshot-based undo/redo stack.
 * A stroke is one undoable unit (begin/end bracket the pointer drag).
 */
export class MaskEditor {
  raster: LabelRaster;
  damage: Uint8Array | null;
  contextLock = true;
  activeLabel = 0;
  brushRadius = 6;
  private undoStack: Uint8Array[] = [];
  private redoStack: Uint8Array[] = [];
  private strokeOpen = false;

  constructor(raster: LabelRaster, damage?: Uint8Array | null) {
    this.raster = raster;
    this.damage = damage ?? null;
  }

  beginStroke(): void {
    if (this.strokeOpen) return;
    this.strokeOpen = true;
    this.undoStack.push(this.raster.labels.slice());
    if (this.undoStack.length > UNDO_DEPTH) this.undoStack.shift();
    this.redoStack.length = 0;
  }

  paint(points: Point[]): void {
    if (!this.strokeOpen) this.beginStroke();
    this.raster.paintStroke(
      points,
      this.brushRadius,
      this.activeLabel,
      this.contextLock ? this.damage : null,
    );
  }

  endStroke(): void {
    this.strokeOpen = false;
  }

  canUndo(): boolean {
    return this.undoStack.length > 0;
  }

  canRedo(): boolean {
    return this.redoStack.length > 0;
  }

  undo(): boolean {
    const prev = this.undoStack.pop();
    if (!prev) return false;
    this.redoStack.push(this.raster.labels.slice());
    this.raster.labels.set(prev);
    this.strokeOpen = false;
    return true;
  }

  redo(): boolean {
    const next = this.redoStack.pop();
    if (!next) return false;
    this.undoStack.push(this.raster.labels.slice());
    this.raster.labels.set(next);
    this.strokeOpen = false;
    return true;
  }
}
