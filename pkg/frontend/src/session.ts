// UI session state machine: frame selection, prompt placement, query text,
// granularity toggle, submission with at-most-one request in flight, and
// overlay derivation. The request body is a pure function of this state.

import { ApiClient, FrameInfo, InferRequest, InferResponse, Prompt } from './api.js'
import { GranularityToggle, OverlayModel, buildOverlayModel } from './overlay.js'

export interface SessionState {
  frames: FrameInfo[]
  selectedFrame: string | null
  prompts: Prompt[]
  queryText: string
  toggle: GranularityToggle
  canonical: boolean
  lastResponse: InferResponse | null
  overlays: OverlayModel | null
  banner: string | null
  inFlight: boolean
}

export function buildRequest(state: SessionState): InferRequest {
  if (!state.selectedFrame) throw new Error('no frame selected')
  if (!state.prompts.length) throw new Error('no prompts placed')
  const queries = state.queryText.split(',').map((q) => q.trim()).filter(Boolean)
  if (!queries.length) throw new Error('empty query')
  return {
    frame_id: state.selectedFrame,
    prompts: state.prompts,
    queries,
    granularity: 'auto',
    canonical: state.canonical,
  }
}

export class UiSession {
  state: SessionState = {
    frames: [],
    selectedFrame: null,
    prompts: [],
    queryText: '',
    toggle: 'instance',
    canonical: false,
    lastResponse: null,
    overlays: null,
    banner: null,
    inFlight: false,
  }
  private queued = false
  private listeners: Array<(s: SessionState) => void> = []

  constructor(private client: ApiClient) {}

  onChange(fn: (s: SessionState) => void) {
    this.listeners.push(fn)
  }

  private emit() {
    for (const fn of this.listeners) fn(this.state)
  }

  async loadFrames(): Promise<void> {
    this.state.frames = await this.client.listFrames()
    if (!this.state.selectedFrame && this.state.frames.length) {
      this.state.selectedFrame = this.state.frames[0].frame_id
    }
    this.emit()
  }

  selectFrame(frameId: string) {
    if (this.state.selectedFrame !== frameId) {
      this.state.selectedFrame = frameId
      this.state.prompts = []
      this.state.lastResponse = null
      this.state.overlays = null
      this.state.banner = null
    }
    this.emit()
  }

  addPoint(x: number, y: number) {
    this.state.prompts.push({ kind: 'point', x, y })
    this.emit()
  }

  addBox(x_min: number, y_min: number, x_max: number, y_max: number) {
    this.state.prompts.push({ kind: 'box', x_min, y_min, x_max, y_max })
    this.emit()
  }

  clearPrompts() {
    this.state.prompts = []
    this.state.overlays = null
    this.state.lastResponse = null
    this.emit()
  }

  setQuery(text: string) {
    this.state.queryText = text
    this.emit()
  }

  setCanonical(on: boolean) {
    this.state.canonical = on
    this.emit()
  }

  setToggle(toggle: GranularityToggle) {
    this.state.toggle = toggle
    if (this.state.lastResponse) {
      this.state.overlays = buildOverlayModel(this.state.lastResponse, toggle)
    }
    this.emit()
  }

  get canSubmit(): boolean {
    return Boolean(this.state.selectedFrame && this.state.prompts.length
      && this.state.queryText.trim().length)
  }

  // At most one request in flight; a submission during an outstanding one
  // queues a single follow-up with the then-current state.
  async submit(): Promise<void> {
    if (!this.canSubmit) return
    if (this.state.inFlight) {
      this.queued = true
      return
    }
    this.state.inFlight = true
    this.state.banner = null
    this.emit()
    try {
      const response = await this.client.infer(buildRequest(this.state))
      this.state.lastResponse = response
      this.state.overlays = buildOverlayModel(response, this.state.toggle)
    } catch (e) {
      // Errors surface in the banner; the user's prompts stay put.
      this.state.banner = e instanceof Error ? e.message : String(e)
    } finally {
      this.state.inFlight = false
      this.emit()
    }
    if (this.queued) {
      this.queued = false
      await this.submit()
    }
  }
}
