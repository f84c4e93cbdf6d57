// KEMB v1 (little-endian), the toolkit's embedding container:
//   bytes 0-3   magic "KEMB"
//   bytes 4-7   version, u32 = 1
//   byte  8     dtype code, u8: 1 = float32, 2 = float64
//   bytes 9-16  n, u64
//   bytes 17-24 d, u64
//   payload     n*d values, row-major
//   sections    repeated [tag u8][length u64][bytes]:
//                 1 = labels (n i64), 2 = ids ([u32 len][utf8] per row),
//                 3 = meta (utf8 JSON object); unknown tags skipped
//   trailer     u32 CRC32 over the payload only

import { crc32 } from 'node:zlib'

export class KembError extends Error {}

export type Dtype = 'f4' | 'f8'

export interface EmbeddingSet {
  data: Float64Array // row-major n*d
  n: number
  d: number
  labels?: number[]
  ids?: string[]
  meta?: Record<string, string>
}

const MAGIC = Buffer.from('KEMB', 'ascii')
const VERSION = 1
const HEADER_LEN = 25

function checkShape(set: EmbeddingSet): void {
  if (set.n < 1 || set.d < 1) {
    throw new KembError(`need n,d >= 1, got n=${set.n} d=${set.d}`)
  }
  if (set.data.length !== set.n * set.d) {
    throw new KembError(`data length ${set.data.length} != n*d = ${set.n * set.d}`)
  }
  for (let i = 0; i < set.data.length; i++) {
    if (!Number.isFinite(set.data[i])) {
      throw new KembError(`non-finite value at flat index ${i}`)
    }
  }
  if (set.labels && set.labels.length !== set.n) {
    throw new KembError(`labels length ${set.labels.length} != n ${set.n}`)
  }
  if (set.ids && set.ids.length !== set.n) {
    throw new KembError(`ids length ${set.ids.length} != n ${set.n}`)
  }
}

export function encodeKemb(set: EmbeddingSet, dtype: Dtype = 'f4'): Buffer {
  checkShape(set)
  const itemsize = dtype === 'f4' ? 4 : 8
  const payload = Buffer.alloc(set.n * set.d * itemsize)
  for (let i = 0; i < set.data.length; i++) {
    if (dtype === 'f4') payload.writeFloatLE(set.data[i], i * 4)
    else payload.writeDoubleLE(set.data[i], i * 8)
  }

  const header = Buffer.alloc(HEADER_LEN)
  MAGIC.copy(header, 0)
  header.writeUInt32LE(VERSION, 4)
  header.writeUInt8(dtype === 'f4' ? 1 : 2, 8)
  header.writeBigUInt64LE(BigInt(set.n), 9)
  header.writeBigUInt64LE(BigInt(set.d), 17)

  const parts: Buffer[] = [header, payload]
  if (set.labels) {
    const raw = Buffer.alloc(set.n * 8)
    set.labels.forEach((v, i) => raw.writeBigInt64LE(BigInt(v), i * 8))
    parts.push(sectionHeader(1, raw.length), raw)
  }
  if (set.ids) {
    const chunks: Buffer[] = []
    for (const s of set.ids) {
      const enc = Buffer.from(s, 'utf-8')
      const len = Buffer.alloc(4)
      len.writeUInt32LE(enc.length, 0)
      chunks.push(len, enc)
    }
    const raw = Buffer.concat(chunks)
    parts.push(sectionHeader(2, raw.length), raw)
  }
  if (set.meta && Object.keys(set.meta).length > 0) {
    const sorted = Object.fromEntries(
      Object.entries(set.meta).sort(([a], [b]) => (a < b ? -1 : a > b ? 1 : 0)))
    const raw = Buffer.from(JSON.stringify(sorted), 'utf-8')
    parts.push(sectionHeader(3, raw.length), raw)
  }
  const trailer = Buffer.alloc(4)
  trailer.writeUInt32LE(crc32(payload) >>> 0, 0)
  parts.push(trailer)
  return Buffer.concat(parts)
}

function sectionHeader(tag: number, length: number): Buffer {
  const b = Buffer.alloc(9)
  b.writeUInt8(tag, 0)
  b.writeBigUInt64LE(BigInt(length), 1)
  return b
}

export function decodeKemb(buf: Buffer): EmbeddingSet {
  if (buf.length < HEADER_LEN || !buf.subarray(0, 4).equals(MAGIC)) {
    throw new KembError('bad magic: expected KEMB')
  }
  const version = buf.readUInt32LE(4)
  if (version > VERSION) {
    throw new KembError(`unsupported KEMB version ${version} (max ${VERSION})`)
  }
  const code = buf.readUInt8(8)
  if (code !== 1 && code !== 2) {
    throw new KembError(`unknown dtype code ${code}`)
  }
  const n = Number(buf.readBigUInt64LE(9))
  const d = Number(buf.readBigUInt64LE(17))
  if (!Number.isSafeInteger(n * d)) {
    throw new KembError(`implausible shape n=${n} d=${d}`)
  }
  const itemsize = code === 1 ? 4 : 8
  const nbytes = n * d * itemsize
  let off = HEADER_LEN
  if (buf.length < off + nbytes + 4) {
    throw new KembError(`truncated payload: need ${nbytes} bytes, file too short`)
  }
  const payload = buf.subarray(off, off + nbytes)
  off += nbytes

  let labels: number[] | undefined
  let ids: string[] | undefined
  let meta: Record<string, string> | undefined
  while (buf.length - off > 4) {
    const tag = buf.readUInt8(off)
    const length = Number(buf.readBigUInt64LE(off + 1))
    off += 9
    if (buf.length - off < length + 4) {
      throw new KembError(`truncated section tag ${tag}`)
    }
    const body = buf.subarray(off, off + length)
    off += length
    if (tag === 1) {
      labels = []
      for (let p = 0; p < body.length; p += 8) {
        labels.push(Number(body.readBigInt64LE(p)))
      }
    } else if (tag === 2) {
      ids = []
      let p = 0
      while (p < body.length) {
        const slen = body.readUInt32LE(p)
        p += 4
        ids.push(body.subarray(p, p + slen).toString('utf-8'))
        p += slen
      }
    } else if (tag === 3) {
      meta = JSON.parse(body.toString('utf-8'))
    }
    // unknown tags: skipped
  }

  if ((crc32(payload) >>> 0) !== buf.readUInt32LE(off)) {
    throw new KembError('CRC mismatch: payload corrupted')
  }

  // widen to float64 (exact for f4)
  const data = new Float64Array(n * d)
  for (let i = 0; i < n * d; i++) {
    data[i] = code === 1 ? payload.readFloatLE(i * 4) : payload.readDoubleLE(i * 8)
  }
  return { data, n, d, labels, ids, meta }
}
