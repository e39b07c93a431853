// Scripted UI loop against a stub server honoring the wire contract:
// load a frame, click a point, type "car", submit, see overlays with label
// chips; drag a box and check the ordered prompt; filter granularities.

import { describe, expect, it } from 'vitest'
import { ApiClient, InferRequest, Rle } from '../src/api.js'
import { dragToBox } from '../src/coords.js'
import { UiSession, buildRequest } from '../src/session.js'

const FRAME = { frame_id: 'f0', width: 8, height: 8, preview: 'aGk=' }

function rleFull(h: number, w: number): Rle {
  return { size: [h, w], counts: [0, h * w] }
}

function rleTopRow(h: number, w: number): Rle {
  // column-major: each column contributes one set pixel then h-1 zeros
  const counts = [0, 1]
  for (let c = 1; c < w; c++) counts.push(h - 1, 1)
  counts.push(h - 1)
  return { size: [h, w], counts }
}

interface Recorded {
  requests: InferRequest[]
}

function stubServer(recorded: Recorded, failInfer = false) {
  return async (url: string, init?: RequestInit): Promise<Response> => {
    if (url.endsWith('/api/frames')) {
      return new Response(JSON.stringify([FRAME]), { status: 200 })
    }
    if (url.endsWith('/api/infer')) {
      const req: InferRequest = JSON.parse(String(init?.body))
      recorded.requests.push(req)
      if (failInfer) {
        return new Response(JSON.stringify({ code: 404, message: 'unknown frame' }),
                            { status: 404 })
      }
      const results = req.prompts.map((p) =>
        p.kind === 'point'
          ? [
              { mask: rleFull(8, 8), granularity: 'coarse', label: 'car', score: 0.9 },
              { mask: rleFull(8, 8), granularity: 'mid', label: 'car', score: 0.8 },
              { mask: rleTopRow(8, 8), granularity: 'fine', label: 'wheel', score: 0.7 },
            ]
          : [{ mask: rleFull(8, 8), granularity: 'box', label: 'car', score: 0.95 }])
      return new Response(JSON.stringify(
        { frame_id: req.frame_id, width: 8, height: 8, results }), { status: 200 })
    }
    return new Response('not found', { status: 404 })
  }
}

function makeSession(recorded: Recorded, failInfer = false) {
  return new UiSession(new ApiClient(stubServer(recorded, failInfer)))
}

describe('scripted point-prompt loop', () => {
  it('click + query "car" yields overlays with label chips', async () => {
    const recorded: Recorded = { requests: [] }
    const session = makeSession(recorded)
    await session.loadFrames()
    expect(session.state.selectedFrame).toBe('f0')

    session.addPoint(3, 4)         // the click, already in frame coordinates
    session.setQuery('car')
    expect(session.canSubmit).toBe(true)
    await session.submit()

    const req = recorded.requests[0]
    expect(req.prompts).toEqual([{ kind: 'point', x: 3, y: 4 }])
    expect(req.queries).toEqual(['car'])

    const model = session.state.overlays!
    expect(model.overlays.length).toBeGreaterThanOrEqual(1)
    expect(model.overlays[0].label).toBe('car')
    expect(model.overlays[0].bitmap.length).toBe(64)
  })

  it('submit stays disabled with an empty query', async () => {
    const session = makeSession({ requests: [] })
    await session.loadFrames()
    session.addPoint(1, 1)
    expect(session.canSubmit).toBe(false)
    session.setQuery('   ')
    expect(session.canSubmit).toBe(false)
    session.setQuery('car')
    expect(session.canSubmit).toBe(true)
  })
})

describe('box prompts', () => {
  it('drag rectangle sends ordered corners', async () => {
    const recorded: Recorded = { requests: [] }
    const session = makeSession(recorded)
    await session.loadFrames()
    const view = { frameWidth: 8, frameHeight: 8, canvasWidth: 64, canvasHeight: 64 }
    // drag from bottom-right to top-left: corners must come out ordered
    const box = dragToBox(view, 50, 42, 10, 6)
    session.addBox(box.x_min, box.y_min, box.x_max, box.y_max)
    session.setQuery('car')
    await session.submit()
    const prompt = recorded.requests[0].prompts[0]
    expect(prompt).toEqual({ kind: 'box', x_min: 1, y_min: 0, x_max: 6, y_max: 5 })
  })
})

describe('granularity toggle', () => {
  it('filters a 3-mask point response to exactly one mask', async () => {
    const session = makeSession({ requests: [] })
    await session.loadFrames()
    session.addPoint(2, 2)
    session.setQuery('car')
    await session.submit()

    session.setToggle('part')
    expect(session.state.overlays!.overlays).toHaveLength(1)
    expect(session.state.overlays!.overlays[0].granularity).toBe('fine')
    expect(session.state.overlays!.overlays[0].label).toBe('wheel')

    session.setToggle('instance')
    expect(session.state.overlays!.overlays).toHaveLength(1)
    expect(session.state.overlays!.overlays[0].granularity).toBe('coarse')
  })
})

describe('error handling', () => {
  it('4xx surfaces in the banner and keeps the prompts', async () => {
    const session = makeSession({ requests: [] }, true)
    await session.loadFrames()
    session.addPoint(2, 2)
    session.setQuery('car')
    await session.submit()
    expect(session.state.banner).toContain('unknown frame')
    expect(session.state.prompts).toHaveLength(1)
  })
})

describe('request purity and pending discipline', () => {
  it('request body is a pure function of the UI state', async () => {
    const session = makeSession({ requests: [] })
    await session.loadFrames()
    session.addPoint(1, 2)
    session.setQuery('car, truck')
    const a = buildRequest(session.state)
    const b = buildRequest(session.state)
    expect(a).toEqual(b)
    expect(a.queries).toEqual(['car', 'truck'])
  })

  it('at most one request in flight; one follow-up queued', async () => {
    const recorded: Recorded = { requests: [] }
    let release: (() => void) | null = null
    const gate = new Promise<void>((resolve) => { release = resolve })
    const slowFetch = async (url: string, init?: RequestInit): Promise<Response> => {
      if (url.endsWith('/api/frames')) {
        return new Response(JSON.stringify([FRAME]), { status: 200 })
      }
      recorded.requests.push(JSON.parse(String(init?.body)))
      await gate
      return new Response(JSON.stringify(
        { frame_id: 'f0', width: 8, height: 8, results: [[]] }), { status: 200 })
    }
    const session = new UiSession(new ApiClient(slowFetch))
    await session.loadFrames()
    session.addPoint(1, 1)
    session.setQuery('car')
    const first = session.submit()
    void session.submit()
    void session.submit()   // collapses into the single queued follow-up
    expect(recorded.requests).toHaveLength(1)
    release!()
    await first
    await new Promise((r) => setTimeout(r, 0))
    release!()
    await new Promise((r) => setTimeout(r, 0))
    expect(recorded.requests.length).toBe(2)
  })
})
