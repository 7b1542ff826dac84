// The extraction job: dataset in, three artifacts out. Embeddings are
// written unnormalized; the consuming toolkit owns the cosine convention
// and normalizes on its side. The ground-truth label file exists for
// evaluation only and is never an input to selection.

import { mkdirSync, writeFileSync } from 'fs'
import { join } from 'path'

import { loadDataset } from './dataset'
import { Encoder, loadEncoder } from './encoder'
import { ElfsHeader, sidecarPath, writeElfs } from './format'

export interface ExtractJob {
  dataset: string // kind:path, e.g. folder:/data/toy or cifar10:/data/cifar
  encoder: string // e.g. proj-64
  outDir: string
  batchSize: number
  device: string // only "cpu" exists here; the field mirrors the job schema
}

export interface ExtractResult {
  embeddingsPath: string
  labelsPath: string
  manifestPath: string
  numExamples: number
  embedDim: number
  numClasses: number
}

export function runExtract(job: ExtractJob): ExtractResult {
  if (!Number.isInteger(job.batchSize) || job.batchSize < 1) {
    throw new Error(`batchSize must be a positive integer, got ${job.batchSize}`)
  }
  if (job.device !== 'cpu') {
    throw new Error(`unsupported device ${JSON.stringify(job.device)}; only cpu is available`)
  }
  const dataset = loadDataset(job.dataset)
  const encoder: Encoder = loadEncoder(job.encoder)

  const rows: Float32Array[] = []
  for (let start = 0; start < dataset.images.length; start += job.batchSize) {
    const batch = dataset.images.slice(start, start + job.batchSize)
    rows.push(...encoder.encodeBatch(batch))
  }

  // class count covers every observed label; the binary format needs >= 2
  const numClasses = Math.max(2, Math.max(...dataset.labels) + 1)
  const header: ElfsHeader = {
    numExamples: rows.length,
    embedDim: encoder.dim,
    numClasses,
    normalized: false,
  }

  mkdirSync(job.outDir, { recursive: true })
  const embeddingsPath = join(job.outDir, 'embeddings.elfs')
  writeElfs(embeddingsPath, header, rows)

  const labelsPath = join(job.outDir, 'ground_truth.txt')
  writeFileSync(labelsPath, dataset.labels.join('\n') + '\n')

  const manifestPath = sidecarPath(embeddingsPath)
  const manifest = {
    name: dataset.name,
    num_examples: header.numExamples,
    embed_dim: header.embedDim,
    num_classes: header.numClasses,
    normalized: header.normalized,
    seed: 0,
    encoder: encoder.name,
    transform: encoder.transform,
    source: job.dataset,
  }
  writeFileSync(manifestPath, JSON.stringify(manifest, null, 2) + '\n')

  return {
    embeddingsPath,
    labelsPath,
    manifestPath,
    numExamples: header.numExamples,
    embedDim: header.embedDim,
    numClasses,
  }
}
