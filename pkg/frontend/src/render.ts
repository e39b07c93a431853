// Canvas drawing: frame preview, prompt markers, translucent mask fills.

import { Prompt } from './api.js'
import { ViewGeometry, frameToCanvas } from './coords.js'
import { Overlay } from './overlay.js'

function hexToRgb(hex: string): [number, number, number] {
  const v = parseInt(hex.slice(1), 16)
  return [(v >> 16) & 255, (v >> 8) & 255, v & 255]
}

export function drawOverlay(ctx: CanvasRenderingContext2D, view: ViewGeometry,
                            overlay: Overlay, alpha = 0.45) {
  const image = ctx.createImageData(overlay.width, overlay.height)
  const [r, g, b] = hexToRgb(overlay.color)
  for (let i = 0; i < overlay.bitmap.length; i++) {
    if (overlay.bitmap[i]) {
      image.data[4 * i] = r
      image.data[4 * i + 1] = g
      image.data[4 * i + 2] = b
      image.data[4 * i + 3] = Math.round(alpha * 255)
    }
  }
  const off = document.createElement('canvas')
  off.width = overlay.width
  off.height = overlay.height
  off.getContext('2d')!.putImageData(image, 0, 0)
  ctx.imageSmoothingEnabled = false
  ctx.drawImage(off, 0, 0, view.canvasWidth, view.canvasHeight)
}

export function drawPrompt(ctx: CanvasRenderingContext2D, view: ViewGeometry,
                           prompt: Prompt) {
  ctx.strokeStyle = '#ffffff'
  ctx.fillStyle = '#ffd84c'
  ctx.lineWidth = 1.5
  if (prompt.kind === 'point') {
    const { cx, cy } = frameToCanvas(view, prompt.x, prompt.y)
    ctx.beginPath()
    ctx.arc(cx, cy, 5, 0, 2 * Math.PI)
    ctx.fill()
    ctx.stroke()
  } else {
    const a = frameToCanvas(view, prompt.x_min, prompt.y_min)
    const b = frameToCanvas(view, prompt.x_max, prompt.y_max)
    ctx.strokeStyle = '#ffd84c'
    ctx.strokeRect(a.cx, a.cy, b.cx - a.cx, b.cy - a.cy)
  }
}
