// DOM wiring for the interactive prompt UI.

import { ApiClient } from './api.js'
import { ViewGeometry, canvasToFrame, dragToBox } from './coords.js'
import { drawOverlay, drawPrompt } from './render.js'
import { UiSession } from './session.js'

const DRAG_THRESHOLD_PX = 5

function el<T extends HTMLElement>(id: string): T {
  return document.getElementById(id) as T
}

const session = new UiSession(new ApiClient())
const canvas = el<HTMLCanvasElement>('frame-canvas')
const ctx = canvas.getContext('2d')!
const frameSelect = el<HTMLSelectElement>('frame-select')
const queryInput = el<HTMLInputElement>('query-input')
const submitBtn = el<HTMLButtonElement>('submit-btn')
const clearBtn = el<HTMLButtonElement>('clear-btn')
const banner = el<HTMLDivElement>('banner')
const chips = el<HTMLDivElement>('chips')
const toggleInstance = el<HTMLInputElement>('toggle-instance')
const togglePart = el<HTMLInputElement>('toggle-part')
const canonicalBox = el<HTMLInputElement>('canonical')

const previews = new Map<string, HTMLImageElement>()
let dragStart: { x: number; y: number } | null = null

function view(): ViewGeometry {
  const frame = session.state.frames.find(
    (f) => f.frame_id === session.state.selectedFrame)
  return {
    frameWidth: frame?.width ?? canvas.width,
    frameHeight: frame?.height ?? canvas.height,
    canvasWidth: canvas.width,
    canvasHeight: canvas.height,
  }
}

function redraw() {
  const state = session.state
  ctx.clearRect(0, 0, canvas.width, canvas.height)
  const img = state.selectedFrame ? previews.get(state.selectedFrame) : null
  if (img && img.complete) {
    ctx.imageSmoothingEnabled = false
    ctx.drawImage(img, 0, 0, canvas.width, canvas.height)
  }
  const v = view()
  if (state.overlays) {
    for (const overlay of state.overlays.overlays) drawOverlay(ctx, v, overlay)
  }
  for (const prompt of state.prompts) drawPrompt(ctx, v, prompt)

  chips.replaceChildren()
  if (state.overlays) {
    for (const overlay of state.overlays.overlays) {
      const chip = document.createElement('span')
      chip.className = 'chip'
      chip.style.borderColor = overlay.color
      chip.textContent = `${overlay.label} ${overlay.score.toFixed(2)}`
      chips.appendChild(chip)
    }
    for (const err of state.overlays.errors) {
      const chip = document.createElement('span')
      chip.className = 'chip error'
      chip.textContent = `mask error: ${err.message}`
      chips.appendChild(chip)
    }
    if (state.overlays.empty) {
      const note = document.createElement('span')
      note.className = 'chip'
      note.textContent = 'no masks'
      chips.appendChild(note)
    }
  }
  banner.textContent = state.banner ?? ''
  banner.hidden = !state.banner
  submitBtn.disabled = !session.canSubmit || state.inFlight
}

session.onChange(() => {
  if (frameSelect.children.length !== session.state.frames.length) {
    frameSelect.replaceChildren()
    for (const frame of session.state.frames) {
      const opt = document.createElement('option')
      opt.value = frame.frame_id
      opt.textContent = frame.frame_id
      frameSelect.appendChild(opt)
      const img = new Image()
      img.onload = redraw
      img.src = `data:image/png;base64,${frame.preview}`
      previews.set(frame.frame_id, img)
    }
  }
  if (session.state.selectedFrame) frameSelect.value = session.state.selectedFrame
  redraw()
})

frameSelect.addEventListener('change', () => session.selectFrame(frameSelect.value))
queryInput.addEventListener('input', () => session.setQuery(queryInput.value))
canonicalBox.addEventListener('change', () => session.setCanonical(canonicalBox.checked))
toggleInstance.addEventListener('change', () => session.setToggle('instance'))
togglePart.addEventListener('change', () => session.setToggle('part'))
submitBtn.addEventListener('click', () => void session.submit())
clearBtn.addEventListener('click', () => session.clearPrompts())

canvas.addEventListener('mousedown', (e) => {
  const rect = canvas.getBoundingClientRect()
  dragStart = { x: e.clientX - rect.left, y: e.clientY - rect.top }
})

canvas.addEventListener('mouseup', (e) => {
  if (!dragStart) return
  const rect = canvas.getBoundingClientRect()
  const end = { x: e.clientX - rect.left, y: e.clientY - rect.top }
  const moved = Math.hypot(end.x - dragStart.x, end.y - dragStart.y)
  if (moved < DRAG_THRESHOLD_PX) {
    const p = canvasToFrame(view(), end.x, end.y)
    session.addPoint(p.x, p.y)
  } else {
    const box = dragToBox(view(), dragStart.x, dragStart.y, end.x, end.y)
    session.addBox(box.x_min, box.y_min, box.x_max, box.y_max)
  }
  dragStart = null
})

void session.loadFrames().catch((e) => {
  session.state.banner = `failed to load frames: ${e}`
})
