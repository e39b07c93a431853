// Overlay view model: decoded masks with color + label chips, derived from
// an inference response and the granularity toggle.

import { InferResponse, MaskResult, decodeRle } from './api.js'

export type GranularityToggle = 'instance' | 'part'

export interface Overlay {
  bitmap: Uint8Array // row-major H x W
  width: number
  height: number
  color: string
  label: string
  score: number
  granularity: string
}

export interface OverlayError {
  message: string
  granularity: string
}

export interface OverlayModel {
  overlays: Overlay[]
  errors: OverlayError[]
  empty: boolean
}

const PALETTE = ['#e4574c', '#4c8fe4', '#5fba6a', '#d9a53f', '#9b6fd0', '#49b8b0']

// Point-prompt responses carry three granularities; the toggle keeps the
// coarsest for "instance" viewing and the finest for "part".
export function toggleTag(toggle: GranularityToggle): string {
  return toggle === 'instance' ? 'coarse' : 'fine'
}

export function filterByToggle(results: MaskResult[], toggle: GranularityToggle): MaskResult[] {
  const tags = new Set(results.map((r) => r.granularity))
  if (!tags.has('coarse') && !tags.has('fine')) return results // box responses
  const wanted = toggleTag(toggle)
  return results.filter((r) => r.granularity === wanted || r.granularity === 'box')
}

export function buildOverlayModel(response: InferResponse,
                                  toggle: GranularityToggle): OverlayModel {
  const overlays: Overlay[] = []
  const errors: OverlayError[] = []
  let colorIdx = 0
  for (const perPrompt of response.results) {
    for (const result of filterByToggle(perPrompt, toggle)) {
      try {
        overlays.push({
          bitmap: decodeRle(result.mask),
          width: response.width,
          height: response.height,
          color: PALETTE[colorIdx++ % PALETTE.length],
          label: result.label,
          score: result.score,
          granularity: result.granularity,
        })
      } catch (e) {
        errors.push({ message: String(e), granularity: result.granularity })
      }
    }
  }
  return { overlays, errors, empty: overlays.length === 0 && errors.length === 0 }
}
