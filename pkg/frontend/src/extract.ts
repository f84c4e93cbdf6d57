import * as fs from 'fs'
import * as path from 'path'

import { decodePng, imageEncoder, textEncoder } from './encoders'
import { encodeKemb } from './kemb'

// Exit-code families follow the kalign toolkit: 2 usage, 3 data.
export class UsageError extends Error {}
export class DataError extends Error {}

export interface ImageDumpOptions {
  modelId: string
  imageDir: string
  outPath: string
  batch?: number
  device?: string
  onWarn?: (message: string) => void
}

export interface DumpSummary {
  n: number
  d: number
  skipped: string[]
}

export function dumpImageEmbeddings(opts: ImageDumpOptions): DumpSummary {
  const batch = opts.batch ?? 32
  if (!Number.isInteger(batch) || batch < 1) {
    throw new UsageError(`batch must be a positive integer, got ${opts.batch}`)
  }
  const device = opts.device ?? 'cpu'
  if (device !== 'cpu') {
    throw new UsageError(`unsupported device "${device}"; this build is CPU-only`)
  }
  const warn = opts.onWarn ?? ((m) => console.error(`warning: ${m}`))
  const enc = imageEncoder(opts.modelId)

  let entries: fs.Dirent[]
  try {
    entries = fs.readdirSync(opts.imageDir, { withFileTypes: true })
  } catch {
    throw new DataError(`cannot read image directory: ${opts.imageDir}`)
  }
  // Row order is a pure function of the sorted file-name list.
  const names = entries.filter((e) => e.isFile()).map((e) => e.name).sort()

  const rows: Float64Array[] = []
  const ids: string[] = []
  const skipped: string[] = []
  for (let off = 0; off < names.length; off += batch) {
    for (const name of names.slice(off, off + batch)) {
      try {
        const img = decodePng(fs.readFileSync(path.join(opts.imageDir, name)))
        rows.push(enc.encode(img))
        ids.push(name)
      } catch (err) {
        // never a silent row shift: a skip drops the id too
        skipped.push(name)
        warn(`skipping ${name}: ${err instanceof Error ? err.message : err}`)
      }
    }
  }
  if (rows.length === 0) {
    throw new DataError(`no decodable images in ${opts.imageDir}`)
  }

  const data = new Float64Array(rows.length * enc.width)
  rows.forEach((row, i) => data.set(row, i * enc.width))
  const buf = encodeKemb({
    data,
    n: rows.length,
    d: enc.width,
    ids,
    meta: { model: enc.id, preprocess: enc.preprocess },
  })
  fs.writeFileSync(opts.outPath, buf)
  return { n: rows.length, d: enc.width, skipped }
}

export interface TextDumpOptions {
  modelId: string
  classNames: string[]
  template: string
  outPath: string
}

export function dumpTextAnchors(opts: TextDumpOptions): DumpSummary {
  if (opts.classNames.length === 0) {
    throw new UsageError('empty class list')
  }
  if (!opts.template.includes('{}')) {
    throw new UsageError(`template "${opts.template}" has no {} placeholder`)
  }
  const enc = textEncoder(opts.modelId)
  const data = new Float64Array(opts.classNames.length * enc.width)
  opts.classNames.forEach((name, i) => {
    data.set(enc.encode(opts.template.replace('{}', name)), i * enc.width)
  })
  const buf = encodeKemb({
    data,
    n: opts.classNames.length,
    d: enc.width,
    ids: opts.classNames,
    meta: { model: enc.id, template: opts.template },
  })
  fs.writeFileSync(opts.outPath, buf)
  return { n: opts.classNames.length, d: enc.width, skipped: [] }
}
