#!/usr/bin/env node
// kalign-extract images|text: dump embeddings into KEMB files the kalign
// toolkit consumes. Exit codes: 0 success, 2 usage error, 3 data error.

import { parseArgs } from 'node:util'

import { EncoderError } from './encoders'
import { DataError, UsageError, dumpImageEmbeddings, dumpTextAnchors } from './extract'
import { KembError } from './kemb'

const USAGE = `usage:
  kalign-extract images --model <id> --dir <image_dir> --out <file.kemb> [--batch N] [--device cpu]
  kalign-extract text --model <id> --class <name> [--class <name> ...] [--template "a photo of a {}"] --out <file.kemb>`

function fail(code: number, message: string): never {
  console.error(message)
  process.exit(code)
}

function required(values: Record<string, unknown>, names: string[]): void {
  for (const name of names) {
    if (values[name] === undefined) fail(2, `missing --${name}\n${USAGE}`)
  }
}

function runImages(argv: string[]): void {
  const { values } = parseArgs({
    args: argv,
    options: {
      model: { type: 'string' },
      dir: { type: 'string' },
      out: { type: 'string' },
      batch: { type: 'string', default: '32' },
      device: { type: 'string', default: 'cpu' },
    },
  })
  required(values, ['model', 'dir', 'out'])
  const batch = Number(values.batch)
  const summary = dumpImageEmbeddings({
    modelId: values.model!,
    imageDir: values.dir!,
    outPath: values.out!,
    batch,
    device: values.device,
  })
  const note = summary.skipped.length ? ` (skipped ${summary.skipped.length})` : ''
  console.log(`wrote ${values.out}: n=${summary.n} d=${summary.d} model=${values.model}${note}`)
}

function runText(argv: string[]): void {
  const { values } = parseArgs({
    args: argv,
    options: {
      model: { type: 'string' },
      class: { type: 'string', multiple: true, default: [] },
      template: { type: 'string', default: 'a photo of a {}' },
      out: { type: 'string' },
    },
  })
  required(values, ['model', 'out'])
  const summary = dumpTextAnchors({
    modelId: values.model!,
    classNames: values.class!,
    template: values.template!,
    outPath: values.out!,
  })
  console.log(`wrote ${values.out}: n=${summary.n} d=${summary.d} model=${values.model}`)
}

function main(): void {
  const [command, ...rest] = process.argv.slice(2)
  try {
    if (command === 'images') runImages(rest)
    else if (command === 'text') runText(rest)
    else fail(2, USAGE)
  } catch (err) {
    if (err instanceof UsageError) fail(2, `error: ${err.message}`)
    if (err instanceof EncoderError) fail(2, `error: ${err.message}`)
    if (err instanceof DataError || err instanceof KembError) {
      fail(3, `error: ${err.message}`)
    }
    if (err instanceof TypeError && 'code' in err) {
      // parseArgs rejects unknown or malformed flags with ERR_PARSE_ARGS_*
      fail(2, `error: ${err.message}\n${USAGE}`)
    }
    throw err
  }
}

main()
