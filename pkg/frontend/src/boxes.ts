// Coordinate handling for drag-drawn boxes. Screen pixels map to image
// pixels through the displayed-rect scale; dragging in any direction must
// yield a normalized (min < max) box.

export interface Point {
  x: number;
  y: number;
}

export interface DisplayRect {
  left: number;
  top: number;
  width: number;
  height: number;
}

export interface ImageSize {
  width: number;
  height: number;
}

export interface CoordinateMapper {
  toImage(client: Point): Point;
}

export function makeMapper(rect: DisplayRect, image: ImageSize): CoordinateMapper {
  if (rect.width <= 0 || rect.height <= 0) {
    throw new Error("display rect has no area");
  }
  const sx = image.width / rect.width;
  const sy = image.height / rect.height;
  return {
    toImage(client: Point): Point {
      const x = (client.x - rect.left) * sx;
      const y = (client.y - rect.top) * sy;
      return {
        x: Math.min(Math.max(x, 0), image.width),
        y: Math.min(Math.max(y, 0), image.height),
      };
    },
  };
}

export interface RawBox {
  x_min: number;
  y_min: number;
  x_max: number;
  y_max: number;
}

// Normalize a drag in image coordinates; returns null for degenerate
// drags (zero width or height after clamping).
export function normalizeDrag(a: Point, b: Point): RawBox | null {
  const x_min = Math.min(a.x, b.x);
  const x_max = Math.max(a.x, b.x);
  const y_min = Math.min(a.y, b.y);
  const y_max = Math.max(a.y, b.y);
  if (x_max - x_min <= 0 || y_max - y_min <= 0) {
    return null;
  }
  return { x_min, y_min, x_max, y_max };
}

export function boxValid(box: RawBox): boolean {
  return (
    Number.isFinite(box.x_min) &&
    Number.isFinite(box.y_min) &&
    Number.isFinite(box.x_max) &&
    Number.isFinite(box.y_max) &&
    box.x_min >= 0 &&
    box.y_min >= 0 &&
    box.x_min < box.x_max &&
    box.y_min < box.y_max
  );
}
