// Canvas <-> frame coordinate mapping. The canvas displays the frame
// scaled by an integral or fractional zoom; clicks land on frame pixels.

export interface ViewGeometry {
  frameWidth: number
  frameHeight: number
  canvasWidth: number
  canvasHeight: number
}

export function canvasToFrame(view: ViewGeometry, cx: number, cy: number) {
  const sx = view.canvasWidth / view.frameWidth
  const sy = view.canvasHeight / view.frameHeight
  const x = Math.min(view.frameWidth - 1, Math.max(0, Math.floor(cx / sx)))
  const y = Math.min(view.frameHeight - 1, Math.max(0, Math.floor(cy / sy)))
  return { x, y }
}

export function frameToCanvas(view: ViewGeometry, x: number, y: number) {
  const sx = view.canvasWidth / view.frameWidth
  const sy = view.canvasHeight / view.frameHeight
  return { cx: (x + 0.5) * sx, cy: (y + 0.5) * sy }
}

// Drag rectangle -> ordered box corners in frame coordinates.
export function dragToBox(view: ViewGeometry, ax: number, ay: number,
                          bx: number, by: number) {
  const a = canvasToFrame(view, ax, ay)
  const b = canvasToFrame(view, bx, by)
  return {
    x_min: Math.min(a.x, b.x),
    y_min: Math.min(a.y, b.y),
    x_max: Math.max(a.x, b.x),
    y_max: Math.max(a.y, b.y),
  }
}
