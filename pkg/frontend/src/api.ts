// Wire types for the inference service; mirrors the server contract exactly.

export interface FrameInfo {
  frame_id: string
  width: number
  height: number
  preview: string // base64 PNG of the voxel rendering
}

export interface PointPrompt {
  kind: 'point'
  x: number
  y: number
}

export interface BoxPrompt {
  kind: 'box'
  x_min: number
  y_min: number
  x_max: number
  y_max: number
}

export type Prompt = PointPrompt | BoxPrompt

export interface Rle {
  size: [number, number] // [height, width]
  counts: number[]
}

export interface MaskResult {
  mask: Rle
  granularity: string // coarse | mid | fine | box
  label: string
  score: number
}

export interface InferRequest {
  frame_id: string
  prompts: Prompt[]
  queries: string[]
  granularity: 'auto' | 'coarse' | 'fine'
  canonical: boolean
}

export interface InferResponse {
  frame_id: string
  width: number
  height: number
  results: MaskResult[][]
}

export interface ApiError {
  code: number
  message: string
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>

export class ApiClient {
  constructor(private fetchFn: FetchLike = fetch.bind(globalThis),
              private base = '') {}

  async listFrames(): Promise<FrameInfo[]> {
    const resp = await this.fetchFn(`${this.base}/api/frames`)
    if (!resp.ok) throw await this.asError(resp)
    return resp.json()
  }

  async infer(req: InferRequest): Promise<InferResponse> {
    const resp = await this.fetchFn(`${this.base}/api/infer`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(req),
    })
    if (!resp.ok) throw await this.asError(resp)
    return resp.json()
  }

  private async asError(resp: Response): Promise<Error> {
    try {
      const body: ApiError = await resp.json()
      return new Error(body.message ?? `HTTP ${resp.status}`)
    } catch {
      return new Error(`HTTP ${resp.status}`)
    }
  }
}

// Column-major run-length decoding (counts start with the zero run).
export function decodeRle(rle: Rle): Uint8Array {
  const [h, w] = rle.size
  const out = new Uint8Array(h * w) // row-major output
  let pos = 0
  let value = 0
  for (const count of rle.counts) {
    if (count < 0) throw new Error('negative run length')
    if (value === 1) {
      for (let k = pos; k < pos + count; k++) {
        const col = Math.floor(k / h)
        const row = k % h
        out[row * w + col] = 1
      }
    }
    pos += count
    value ^= 1
  }
  if (pos !== h * w) throw new Error(`run lengths cover ${pos} of ${h * w} pixels`)
  return out
}
