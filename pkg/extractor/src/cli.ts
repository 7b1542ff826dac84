#!/usr/bin/env node
// usage: embed-extract --dataset folder:DIR --encoder proj-64 --out DIR
//                      [--batch-size 256] [--device cpu]
// exit codes: 0 ok, 1 runtime failure, 2 usage error

import { ExtractJob, runExtract } from './extract'

const USAGE =
  'usage: embed-extract --dataset kind:path --encoder name --out dir ' +
  '[--batch-size n] [--device cpu]'

class UsageError extends Error {}

export function parseArgs(argv: string[]): ExtractJob {
  const values: Record<string, string> = {}
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i]
    if (!arg.startsWith('--')) {
      throw new UsageError(`unexpected argument ${JSON.stringify(arg)}`)
    }
    const key = arg.slice(2)
    if (!['dataset', 'encoder', 'out', 'batch-size', 'device'].includes(key)) {
      throw new UsageError(`unknown flag --${key}`)
    }
    if (i + 1 >= argv.length) {
      throw new UsageError(`--${key} needs a value`)
    }
    values[key] = argv[++i]
  }
  for (const required of ['dataset', 'encoder', 'out']) {
    if (!(required in values)) {
      throw new UsageError(`--${required} is required`)
    }
  }
  const batchSize = parseInt(values['batch-size'] ?? '256', 10)
  if (!Number.isInteger(batchSize) || batchSize < 1) {
    throw new UsageError(`--batch-size must be a positive integer`)
  }
  return {
    dataset: values['dataset'],
    encoder: values['encoder'],
    outDir: values['out'],
    batchSize,
    device: values['device'] ?? 'cpu',
  }
}

export function main(argv: string[]): number {
  let job: ExtractJob
  try {
    job = parseArgs(argv)
  } catch (err) {
    console.error(`embed-extract: ${(err as Error).message}`)
    console.error(USAGE)
    return 2
  }
  try {
    const result = runExtract(job)
    console.log(
      `wrote ${result.numExamples} x ${result.embedDim} embeddings ` +
        `(${result.numClasses} classes) to ${result.embeddingsPath}`,
    )
    console.log(`labels: ${result.labelsPath}`)
    console.log(`manifest: ${result.manifestPath}`)
    return 0
  } catch (err) {
    console.error(`embed-extract: ${(err as Error).message}`)
    return 1
  }
}

if (require.main === module) {
  process.exitCode = main(process.argv.slice(2))
}
