// Encoders turn raw RGB images into fixed-width embedding rows.
//
// The built-in family, proj-<dim>, is a seeded random projection over a
// fixed preprocessing: nearest-neighbor resize to 32x32 RGB, channels
// scaled to [0, 1]. It is fully deterministic (the projection matrix is
// derived from the encoder name), so extractions are reproducible byte for
// byte without any downloaded weights. A real pretrained network slots in
// through loadEncoder by adding another branch that satisfies Encoder.

export interface ImageTensor {
  width: number
  height: number
  data: Uint8Array // interleaved rgb, length = width * height * 3
}

export interface Encoder {
  name: string
  dim: number
  // exact preprocessing contract, recorded in the output manifest
  transform: string
  encodeBatch(images: ImageTensor[]): Float32Array[]
}

const INPUT_SIDE = 32
const INPUT_DIM = INPUT_SIDE * INPUT_SIDE * 3

function fnv1a(text: string): number {
  let hash = 0x811c9dc5
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i)
    hash = Math.imul(hash, 0x01000193)
  }
  return hash >>> 0
}

// small deterministic PRNG; integer arithmetic only, so identical everywhere
function mulberry32(seed: number): () => number {
  let state = seed >>> 0
  return () => {
    state = (state + 0x6d2b79f5) >>> 0
    let t = state
    t = Math.imul(t ^ (t >>> 15), t | 1)
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61)
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296
  }
}

export function preprocess(image: ImageTensor): Float32Array {
  const { width, height, data } = image
  if (data.length !== width * height * 3) {
    throw new Error(`image data length ${data.length} does not match ${width}x${height} rgb`)
  }
  const out = new Float32Array(INPUT_DIM)
  for (let y = 0; y < INPUT_SIDE; y++) {
    const sy = Math.min(height - 1, Math.floor((y * height) / INPUT_SIDE))
    for (let x = 0; x < INPUT_SIDE; x++) {
      const sx = Math.min(width - 1, Math.floor((x * width) / INPUT_SIDE))
      const src = (sy * width + sx) * 3
      const dst = (y * INPUT_SIDE + x) * 3
      out[dst] = data[src] / 255
      out[dst + 1] = data[src + 1] / 255
      out[dst + 2] = data[src + 2] / 255
    }
  }
  return out
}

function projectionEncoder(name: string, dim: number): Encoder {
  const rand = mulberry32(fnv1a(name))
  const weights = new Float32Array(dim * INPUT_DIM)
  for (let i = 0; i < weights.length; i++) {
    weights[i] = rand() * 2 - 1
  }
  const scale = 1 / Math.sqrt(INPUT_DIM)
  return {
    name,
    dim,
    transform: `resize${INPUT_SIDE}x${INPUT_SIDE}-nearest,rgb,scale-1/255`,
    encodeBatch(images: ImageTensor[]): Float32Array[] {
      return images.map(image => {
        const x = preprocess(image)
        const row = new Float32Array(dim)
        for (let j = 0; j < dim; j++) {
          let acc = 0
          const base = j * INPUT_DIM
          for (let k = 0; k < INPUT_DIM; k++) {
            acc += weights[base + k] * x[k]
          }
          row[j] = Math.fround(acc * scale)
        }
        return row
      })
    },
  }
}

export function loadEncoder(name: string): Encoder {
  const match = /^proj-(\d+)$/.exec(name)
  if (match) {
    const dim = parseInt(match[1], 10)
    if (dim < 1 || dim > 8192) {
      throw new Error(`projection width out of range: ${name}`)
    }
    return projectionEncoder(name, dim)
  }
  throw new Error(`no weights available for encoder ${JSON.stringify(name)}; supported: proj-<dim>`)
}
