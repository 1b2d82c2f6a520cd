import * as fs from "node:fs";

export const BKD1_MAGIC = "BKD1";
export const DESCRIPTOR_DIM = 128;

export interface DescriptorRecord {
  imageId: string;
  keypointIndex: number;
  values: Float32Array; // 128 entries, unit norm
}

/** Serialize descriptor records to the engine's BKD1 format: magic,
 * version u32 (=1), dim u32 (=128), count u64, then per record a
 * u16-length utf-8 image id, u32 keypoint index, and 128 little-endian
 * float32 values. */
export function encodeBkd1(records: DescriptorRecord[]): Buffer {
  const chunks: Buffer[] = [];
  const header = Buffer.alloc(20);
  header.write(BKD1_MAGIC, 0, "ascii");
  header.writeUInt32LE(1, 4);
  header.writeUInt32LE(DESCRIPTOR_DIM, 8);
  header.writeBigUInt64LE(BigInt(records.length), 12);
  chunks.push(header);
  for (const rec of records) {
    if (rec.values.length !== DESCRIPTOR_DIM) {
      throw new Error(
        `descriptor for ${rec.imageId}#${rec.keypointIndex} has ` +
          `${rec.values.length} dims, expected ${DESCRIPTOR_DIM}`,
      );
    }
    const id = Buffer.from(rec.imageId, "utf8");
    const head = Buffer.alloc(2 + id.length + 4);
    head.writeUInt16LE(id.length, 0);
    id.copy(head, 2);
    head.writeUInt32LE(rec.keypointIndex >>> 0, 2 + id.length);
    chunks.push(head);
    const vals = Buffer.alloc(4 * DESCRIPTOR_DIM);
    for (let i = 0; i < DESCRIPTOR_DIM; ++i) {
      vals.writeFloatLE(rec.values[i], i * 4);
    }
    chunks.push(vals);
  }
  return Buffer.concat(chunks);
}

export function writeBkd1(path: string, records: DescriptorRecord[]): void {
  fs.writeFileSync(path, encodeBkd1(records));
}

/** Parse a BKD1 buffer back into records (round-trip checks and audits). */
export function decodeBkd1(buf: Buffer): DescriptorRecord[] {
  if (buf.subarray(0, 4).toString("ascii") !== BKD1_MAGIC) {
    throw new Error("bad magic in descriptor buffer");
  }
  const version = buf.readUInt32LE(4);
  const dim = buf.readUInt32LE(8);
  const count = Number(buf.readBigUInt64LE(12));
  if (version !== 1) throw new Error(`unsupported version ${version}`);
  if (dim !== DESCRIPTOR_DIM) throw new Error(`descriptor dim ${dim}`);
  let off = 20;
  const out: DescriptorRecord[] = [];
  for (let rec = 0; rec < count; ++rec) {
    const idLen = buf.readUInt16LE(off);
    off += 2;
    const imageId = buf.subarray(off, off + idLen).toString("utf8");
    off += idLen;
    const keypointIndex = buf.readUInt32LE(off);
    off += 4;
    const values = new Float32Array(DESCRIPTOR_DIM);
    for (let i = 0; i < DESCRIPTOR_DIM; ++i) {
      values[i] = buf.readFloatLE(off + i * 4);
    }
    off += 4 * DESCRIPTOR_DIM;
    out.push({ imageId, keypointIndex, values });
  }
  return out;
}

export function readBkd1(path: string): DescriptorRecord[] {
  return decodeBkd1(fs.readFileSync(path));
}
