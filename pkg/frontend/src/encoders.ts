// Built-in deterministic encoders. This build has no model hub: each id
// names a pure function of the input bytes, so dumps are reproducible
// byte-for-byte and the sandbox never touches the network.

import { PNG } from 'pngjs'

export class EncoderError extends Error {}

export interface DecodedImage {
  width: number
  height: number
  rgba: Uint8Array // 4 bytes per pixel, row-major
}

export interface ImageEncoder {
  id: string
  width: number
  preprocess: string
  encode(img: DecodedImage): Float64Array
}

export interface TextEncoder {
  id: string
  width: number
  encode(prompt: string): Float64Array
}

export function decodePng(buf: Buffer): DecodedImage {
  const png = PNG.sync.read(buf)
  return { width: png.width, height: png.height, rgba: png.data }
}

function luminance(r: number, g: number, b: number): number {
  return 0.299 * r + 0.587 * g + 0.114 * b
}

interface Pooled {
  meanR: number
  meanG: number
  meanB: number
  stdR: number
  stdG: number
  stdB: number
  meanLum: number
  stdLum: number
  minLum: number
  maxLum: number
  meanAbsGx: number
  meanAbsGy: number
  blockLum: [number, number, number, number] // quadrant means: TL, TR, BL, BR
}

function poolStats(img: DecodedImage): Pooled {
  const { width: w, height: h, rgba } = img
  const n = w * h
  const lum = new Float64Array(n)
  const sum = [0, 0, 0]
  const sumSq = [0, 0, 0]
  let lumSum = 0
  let lumSq = 0
  let minLum = Infinity
  let maxLum = -Infinity
  const block = [0, 0, 0, 0]
  const blockCount = [0, 0, 0, 0]
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      const i = y * w + x
      const r = rgba[i * 4] / 255
      const g = rgba[i * 4 + 1] / 255
      const b = rgba[i * 4 + 2] / 255
      sum[0] += r; sum[1] += g; sum[2] += b
      sumSq[0] += r * r; sumSq[1] += g * g; sumSq[2] += b * b
      const L = luminance(r, g, b)
      lum[i] = L
      lumSum += L
      lumSq += L * L
      if (L < minLum) minLum = L
      if (L > maxLum) maxLum = L
      const q = (y < h / 2 ? 0 : 2) + (x < w / 2 ? 0 : 1)
      block[q] += L
      blockCount[q]++
    }
  }
  let gxSum = 0
  let gySum = 0
  for (let y = 0; y < h; y++) {
    for (let x = 0; x + 1 < w; x++) {
      gxSum += Math.abs(lum[y * w + x + 1] - lum[y * w + x])
    }
  }
  for (let y = 0; y + 1 < h; y++) {
    for (let x = 0; x < w; x++) {
      gySum += Math.abs(lum[(y + 1) * w + x] - lum[y * w + x])
    }
  }
  const std = (sq: number, s: number, m: number) =>
    Math.sqrt(Math.max(0, sq / m - (s / m) * (s / m)))
  return {
    meanR: sum[0] / n,
    meanG: sum[1] / n,
    meanB: sum[2] / n,
    stdR: std(sumSq[0], sum[0], n),
    stdG: std(sumSq[1], sum[1], n),
    stdB: std(sumSq[2], sum[2], n),
    meanLum: lumSum / n,
    stdLum: std(lumSq, lumSum, n),
    minLum,
    maxLum,
    meanAbsGx: w > 1 ? gxSum / ((w - 1) * h) : 0,
    meanAbsGy: h > 1 ? gySum / (w * (h - 1)) : 0,
    blockLum: [
      block[0] / Math.max(1, blockCount[0]),
      block[1] / Math.max(1, blockCount[1]),
      block[2] / Math.max(1, blockCount[2]),
      block[3] / Math.max(1, blockCount[3]),
    ],
  }
}

// Vision-language stand-in: a color-dominated global pool whose text tower
// (below) lands color prompts in the same 8-d layout. The trailing 1.0 keeps
// cosines defined for all-black inputs.
const pooledRgb8: ImageEncoder = {
  id: 'pooled-rgb8',
  width: 8,
  preprocess: 'RGBA decode, channels scaled to [0,1], global pooled color/edge statistics',
  encode(img) {
    const p = poolStats(img)
    return Float64Array.from([
      p.meanR, p.meanG, p.meanB, p.meanLum, p.stdLum, p.meanAbsGx, p.meanAbsGy, 1.0,
    ])
  },
}

// Vision-centric stand-in: texture and layout statistics, deliberately a
// different width than the source so d != d' paths get exercised downstream.
const pooledTex12: ImageEncoder = {
  id: 'pooled-tex12',
  width: 12,
  preprocess: 'RGBA decode, channels scaled to [0,1], quadrant luminance plus texture statistics',
  encode(img) {
    const p = poolStats(img)
    return Float64Array.from([
      p.blockLum[0], p.blockLum[1], p.blockLum[2], p.blockLum[3],
      p.stdR, p.stdG, p.stdB, p.meanAbsGx, p.meanAbsGy, p.minLum, p.maxLum, 1.0,
    ])
  },
}

const COLOR_LEXICON: Record<string, [number, number, number]> = {
  red: [1, 0, 0],
  green: [0, 0.8, 0],
  blue: [0, 0, 1],
  yellow: [1, 1, 0],
  magenta: [1, 0, 1],
  cyan: [0, 1, 1],
  orange: [1, 0.5, 0],
  purple: [0.5, 0, 0.8],
  pink: [1, 0.7, 0.8],
  brown: [0.6, 0.4, 0.2],
  white: [1, 1, 1],
  black: [0, 0, 0],
  gray: [0.5, 0.5, 0.5],
  grey: [0.5, 0.5, 0.5],
}

// FNV-1a then xorshift32: prompts without lexicon hits still embed to a
// stable vector, so arbitrary class names never crash a dump.
function hashVector(text: string, width: number): Float64Array {
  let seed = 0x811c9dc5
  for (const byte of Buffer.from(text, 'utf-8')) {
    seed = Math.imul(seed ^ byte, 0x01000193) >>> 0
  }
  if (seed === 0) seed = 0x9e3779b9
  const out = new Float64Array(width)
  let s = seed
  for (let i = 0; i < width - 1; i++) {
    s ^= (s << 13) >>> 0; s >>>= 0
    s ^= s >>> 17
    s ^= (s << 5) >>> 0; s >>>= 0
    out[i] = s / 0x100000000
  }
  out[width - 1] = 1.0
  return out
}

// Text tower paired with pooled-rgb8: color words map onto the vector the
// image tower would produce for a flat patch of that color.
const textRgb8: TextEncoder = {
  id: 'pooled-rgb8',
  width: 8,
  encode(prompt) {
    const words = prompt.toLowerCase().split(/[^a-z]+/)
    const hits = words.filter((w) => w in COLOR_LEXICON)
    if (hits.length === 0) return hashVector(prompt, 8)
    let r = 0, g = 0, b = 0
    for (const w of hits) {
      const c = COLOR_LEXICON[w]
      r += c[0]; g += c[1]; b += c[2]
    }
    r /= hits.length; g /= hits.length; b /= hits.length
    return Float64Array.from([r, g, b, luminance(r, g, b), 0, 0, 0, 1.0])
  },
}

const IMAGE_ENCODERS: Record<string, ImageEncoder> = {
  'pooled-rgb8': pooledRgb8,
  'pooled-tex12': pooledTex12,
}

const TEXT_ENCODERS: Record<string, TextEncoder> = {
  'pooled-rgb8': textRgb8,
}

export function listImageModels(): string[] {
  return Object.keys(IMAGE_ENCODERS)
}

export function imageEncoder(modelId: string): ImageEncoder {
  const enc = IMAGE_ENCODERS[modelId]
  if (!enc) {
    throw new EncoderError(
      `unknown image model "${modelId}"; available: ${listImageModels().join(', ')}`)
  }
  return enc
}

export function textEncoder(modelId: string): TextEncoder {
  const enc = TEXT_ENCODERS[modelId]
  if (!enc) {
    const why = modelId in IMAGE_ENCODERS ? 'has no text tower' : 'is unknown'
    throw new EncoderError(
      `model "${modelId}" ${why}; text models: ${Object.keys(TEXT_ENCODERS).join(', ')}`)
  }
  return enc
}
