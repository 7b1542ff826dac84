// Binary embedding container, shared with the corepick toolkit. Layout:
// a 36-byte little-endian header, then row-major float32 data.
//   bytes 0..3   magic "ELFS"
//   bytes 4..7   u32 format version (currently 1)
//   bytes 8..15  u64 number of rows
//   bytes 16..23 u64 embedding dimension
//   bytes 24..31 u64 number of classes
//   bytes 32..35 u32 flags, bit 0 = rows are l2-normalized
// A JSON sidecar next to the file (extension swapped for .manifest.json)
// restates the header and records provenance.

import { readFileSync, writeFileSync } from 'fs'

export const MAGIC = 'ELFS'
export const FORMAT_VERSION = 1
export const HEADER_SIZE = 36
export const FLAG_NORMALIZED = 1

export interface ElfsHeader {
  numExamples: number
  embedDim: number
  numClasses: number
  normalized: boolean
}

function checkHeaderFields(header: ElfsHeader): void {
  if (!Number.isInteger(header.numExamples) || header.numExamples < 1) {
    throw new Error(`numExamples must be a positive integer, got ${header.numExamples}`)
  }
  if (!Number.isInteger(header.embedDim) || header.embedDim < 1) {
    throw new Error(`embedDim must be a positive integer, got ${header.embedDim}`)
  }
  if (!Number.isInteger(header.numClasses) || header.numClasses < 2) {
    throw new Error(`numClasses must be an integer >= 2, got ${header.numClasses}`)
  }
  if (header.numClasses > header.numExamples) {
    throw new Error(
      `numClasses (${header.numClasses}) exceeds numExamples (${header.numExamples})`,
    )
  }
}

export function packHeader(header: ElfsHeader): Buffer {
  checkHeaderFields(header)
  const buf = Buffer.alloc(HEADER_SIZE)
  buf.write(MAGIC, 0, 'ascii')
  buf.writeUInt32LE(FORMAT_VERSION, 4)
  buf.writeBigUInt64LE(BigInt(header.numExamples), 8)
  buf.writeBigUInt64LE(BigInt(header.embedDim), 16)
  buf.writeBigUInt64LE(BigInt(header.numClasses), 24)
  buf.writeUInt32LE(header.normalized ? FLAG_NORMALIZED : 0, 32)
  return buf
}

export function encodeElfs(header: ElfsHeader, rows: Float32Array[]): Buffer {
  if (rows.length !== header.numExamples) {
    throw new Error(`header says ${header.numExamples} rows, got ${rows.length}`)
  }
  const payload = Buffer.alloc(4 * header.numExamples * header.embedDim)
  let offset = 0
  for (let i = 0; i < rows.length; i++) {
    const row = rows[i]
    if (row.length !== header.embedDim) {
      throw new Error(`row ${i} has ${row.length} values, expected ${header.embedDim}`)
    }
    for (let j = 0; j < row.length; j++) {
      if (!Number.isFinite(row[j])) {
        throw new Error(`row ${i} column ${j} is not finite`)
      }
      payload.writeFloatLE(row[j], offset)
      offset += 4
    }
  }
  return Buffer.concat([packHeader(header), payload])
}

export function writeElfs(path: string, header: ElfsHeader, rows: Float32Array[]): void {
  writeFileSync(path, encodeElfs(header, rows))
}

export function decodeHeader(buf: Buffer, label: string): ElfsHeader {
  if (buf.length < HEADER_SIZE) {
    throw new Error(`${label}: file too short for header (${buf.length} < ${HEADER_SIZE} bytes)`)
  }
  const magic = buf.toString('ascii', 0, 4)
  if (magic !== MAGIC) {
    throw new Error(`${label}: bad magic ${JSON.stringify(magic)}, expected ${JSON.stringify(MAGIC)}`)
  }
  const version = buf.readUInt32LE(4)
  if (version !== FORMAT_VERSION) {
    throw new Error(`${label}: format version ${version}, expected ${FORMAT_VERSION}`)
  }
  const numExamples = Number(buf.readBigUInt64LE(8))
  const embedDim = Number(buf.readBigUInt64LE(16))
  const numClasses = Number(buf.readBigUInt64LE(24))
  const flags = buf.readUInt32LE(32)
  if ((flags & ~FLAG_NORMALIZED) !== 0) {
    throw new Error(`${label}: unknown flag bits in ${flags}`)
  }
  const header = {
    numExamples,
    embedDim,
    numClasses,
    normalized: (flags & FLAG_NORMALIZED) !== 0,
  }
  checkHeaderFields(header)
  return header
}

export function readElfs(path: string): { header: ElfsHeader; rows: Float32Array[] } {
  const buf = readFileSync(path)
  const header = decodeHeader(buf, path)
  const expected = HEADER_SIZE + 4 * header.numExamples * header.embedDim
  if (buf.length !== expected) {
    throw new Error(`${path}: expected ${expected} bytes, found ${buf.length}`)
  }
  const rows: Float32Array[] = []
  let offset = HEADER_SIZE
  for (let i = 0; i < header.numExamples; i++) {
    const row = new Float32Array(header.embedDim)
    for (let j = 0; j < header.embedDim; j++) {
      row[j] = buf.readFloatLE(offset)
      if (!Number.isFinite(row[j])) {
        throw new Error(`${path}: row ${i} column ${j} is not finite`)
      }
      offset += 4
    }
    rows.push(row)
  }
  return { header, rows }
}

export function validateElfs(path: string): ElfsHeader {
  return readElfs(path).header
}

export function sidecarPath(path: string): string {
  // swap the extension, mirroring how the toolkit derives it
  const dot = path.lastIndexOf('.')
  const slash = Math.max(path.lastIndexOf('/'), path.lastIndexOf('\\'))
  const stem = dot > slash ? path.slice(0, dot) : path
  return stem + '.manifest.json'
}
