import * as fs from 'fs'
import * as os from 'os'
import * as path from 'path'

import { PNG } from 'pngjs'

export function tmpdir(prefix = 'kx-'): string {
  return fs.mkdtempSync(path.join(os.tmpdir(), prefix))
}

// LCG: reruns of a test build byte-identical corpora.
export function lcg(seed: number): () => number {
  let x = seed >>> 0
  return () => {
    x = (Math.imul(x, 1664525) + 1013904223) >>> 0
    return x
  }
}

export function makePng(
  width: number, height: number, rgb: [number, number, number], seed: number,
): Buffer {
  const png = new PNG({ width, height })
  const next = lcg(seed)
  for (let i = 0; i < width * height; i++) {
    for (let c = 0; c < 3; c++) {
      const noise = (next() % 41) - 20
      png.data[i * 4 + c] = Math.max(0, Math.min(255, rgb[c] + noise))
    }
    png.data[i * 4 + 3] = 255
  }
  return PNG.sync.write(png)
}

export const CLASS_COLORS: Record<string, [number, number, number]> = {
  red: [220, 30, 30],
  green: [30, 200, 30],
  blue: [30, 30, 220],
  yellow: [230, 230, 30],
  magenta: [220, 30, 220],
}

// 5-class labeled folder: <class>_<i>.png, perImage images per class.
export function writeClassCorpus(dir: string, perImage = 4): string[] {
  const names: string[] = []
  let seed = 1
  for (const [cls, rgb] of Object.entries(CLASS_COLORS)) {
    for (let i = 0; i < perImage; i++) {
      const name = `${cls}_${i}.png`
      fs.writeFileSync(path.join(dir, name), makePng(16, 16, rgb, seed++))
      names.push(name)
    }
  }
  return names.sort()
}

export function cosine(
  u: Float64Array, v: Float64Array, d: number, i: number, j: number,
): number {
  let uv = 0
  let uu = 0
  let vv = 0
  for (let k = 0; k < d; k++) {
    uv += u[i * d + k] * v[j * d + k]
    uu += u[i * d + k] ** 2
    vv += v[j * d + k] ** 2
  }
  return uv / Math.sqrt(uu * vv)
}
