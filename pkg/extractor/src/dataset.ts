// Dataset readers. Canonical order is the contract that makes the label
// file line up with embedding rows: image folders sort filenames
// lexicographically, cifar10 keeps batch-file order then record order.

import { readFileSync, readdirSync } from 'fs'
import { join } from 'path'

import { ImageTensor } from './encoder'

export interface Dataset {
  name: string
  images: ImageTensor[]
  labels: number[]
}

export function readPpm(path: string): ImageTensor {
  const buf = readFileSync(path)
  if (buf.length < 2 || buf.toString('ascii', 0, 2) !== 'P6') {
    throw new Error(`${path}: not a binary P6 ppm file`)
  }
  // header: "P6", width, height, maxval as whitespace-separated ASCII
  // tokens, # comments allowed, then a single whitespace byte before data
  let pos = 2
  const tokens: number[] = []
  while (tokens.length < 3) {
    while (pos < buf.length && /\s/.test(String.fromCharCode(buf[pos]))) pos++
    if (pos < buf.length && buf[pos] === 0x23) {
      while (pos < buf.length && buf[pos] !== 0x0a) pos++
      continue
    }
    let start = pos
    while (pos < buf.length && !/\s/.test(String.fromCharCode(buf[pos]))) pos++
    const token = buf.toString('ascii', start, pos)
    if (!/^\d+$/.test(token)) {
      throw new Error(`${path}: malformed header token ${JSON.stringify(token)}`)
    }
    tokens.push(parseInt(token, 10))
  }
  pos++ // the single whitespace after maxval
  const [width, height, maxval] = tokens
  if (maxval !== 255) {
    throw new Error(`${path}: only maxval 255 is supported, got ${maxval}`)
  }
  const expected = width * height * 3
  if (buf.length - pos !== expected) {
    throw new Error(`${path}: expected ${expected} pixel bytes, found ${buf.length - pos}`)
  }
  return { width, height, data: new Uint8Array(buf.subarray(pos)) }
}

export function loadFolderDataset(dir: string): Dataset {
  const files = readdirSync(dir)
    .filter(f => f.endsWith('.ppm'))
    .sort()
  if (files.length === 0) {
    throw new Error(`${dir}: no .ppm images found`)
  }
  const labelLines = readFileSync(join(dir, 'labels.txt'), 'ascii')
    .split('\n')
    .filter(line => line.trim() !== '')
  if (labelLines.length !== files.length) {
    throw new Error(
      `${dir}: labels.txt has ${labelLines.length} lines for ${files.length} images`,
    )
  }
  const labels = labelLines.map(line => {
    const v = parseInt(line.trim(), 10)
    if (!Number.isInteger(v) || v < 0) {
      throw new Error(`${dir}: bad label line ${JSON.stringify(line)}`)
    }
    return v
  })
  return {
    name: 'folder',
    images: files.map(f => readPpm(join(dir, f))),
    labels,
  }
}

const CIFAR_SIDE = 32
const CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE
const CIFAR_BATCHES = [
  'data_batch_1.bin',
  'data_batch_2.bin',
  'data_batch_3.bin',
  'data_batch_4.bin',
  'data_batch_5.bin',
]

export function loadCifar10(dir: string): Dataset {
  const images: ImageTensor[] = []
  const labels: number[] = []
  for (const batch of CIFAR_BATCHES) {
    const buf = readFileSync(join(dir, batch))
    if (buf.length === 0 || buf.length % CIFAR_RECORD !== 0) {
      throw new Error(`${join(dir, batch)}: size ${buf.length} is not a multiple of ${CIFAR_RECORD}`)
    }
    for (let offset = 0; offset < buf.length; offset += CIFAR_RECORD) {
      const label = buf[offset]
      if (label > 9) {
        throw new Error(`${join(dir, batch)}: label ${label} out of range at offset ${offset}`)
      }
      // planar r, g, b -> interleaved rgb
      const data = new Uint8Array(3 * CIFAR_SIDE * CIFAR_SIDE)
      const plane = CIFAR_SIDE * CIFAR_SIDE
      for (let p = 0; p < plane; p++) {
        data[p * 3] = buf[offset + 1 + p]
        data[p * 3 + 1] = buf[offset + 1 + plane + p]
        data[p * 3 + 2] = buf[offset + 1 + 2 * plane + p]
      }
      images.push({ width: CIFAR_SIDE, height: CIFAR_SIDE, data })
      labels.push(label)
    }
  }
  return { name: 'cifar10', images, labels }
}

export function loadDataset(spec: string): Dataset {
  const sep = spec.indexOf(':')
  if (sep < 0) {
    throw new Error(`dataset spec needs the form kind:path, got ${JSON.stringify(spec)}`)
  }
  const kind = spec.slice(0, sep)
  const path = spec.slice(sep + 1)
  if (kind === 'folder') return loadFolderDataset(path)
  if (kind === 'cifar10') return loadCifar10(path)
  throw new Error(`unknown dataset kind ${JSON.stringify(kind)}; supported: folder, cifar10`)
}
