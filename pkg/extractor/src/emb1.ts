/**
 * EMB1 binary dataset format and its JSON manifest sidecar.
 *
 * Layout (little-endian): magic "EMB1", version u32 = 1, n_records u64,
 * d_img u32, d_txt u32, then per record: record_id u64, task_id u16,
 * label_id u16, padding u32 = 0, d_img float32s, d_txt float32s.
 * Prompt tables reuse the layout with d_img = 0 and the prompt vector in
 * the text slot. The manifest shares the dataset basename with a
 * `.manifest` extension.
 */
import { promises as fs } from 'fs';
import path from 'path';

export const EMB1_MAGIC = 'EMB1';
export const EMB1_VERSION = 1;
export const MANIFEST_SCHEMA_VERSION = 1;

const HEADER_BYTES = 4 + 4 + 8 + 4 + 4;
const RECORD_HEAD_BYTES = 8 + 2 + 2 + 4;

export interface EmbeddingRecord {
  recordId: bigint;
  taskId: number;
  labelId: number;
  imageEmbedding: Float32Array;
  textEmbedding: Float32Array;
}

export interface TaskDescriptor {
  task_id: number;
  name: string;
  labels: Record<string, number>;
  prompt_template: string;
}

export interface Manifest {
  schema_version: number;
  name: string;
  dims: { image: number; text: number };
  tasks: TaskDescriptor[];
  split: Record<string, 'train' | 'test'>;
  provenance: Record<string, string>;
  prompt_table: string | null;
}

export function manifestPathFor(datasetPath: string): string {
  const parsed = path.parse(datasetPath);
  return path.join(parsed.dir, `${parsed.name.replace(/\.emb1$/, '')}.manifest`);
}

export function encodeEmb1(records: EmbeddingRecord[], dImg: number, dTxt: number): Buffer {
  const recordBytes = RECORD_HEAD_BYTES + 4 * (dImg + dTxt);
  const buf = Buffer.alloc(HEADER_BYTES + records.length * recordBytes);
  let offset = 0;
  buf.write(EMB1_MAGIC, offset, 'ascii');
  offset += 4;
  offset = buf.writeUInt32LE(EMB1_VERSION, offset);
  offset = buf.writeBigUInt64LE(BigInt(records.length), offset);
  offset = buf.writeUInt32LE(dImg, offset);
  offset = buf.writeUInt32LE(dTxt, offset);
  for (const record of records) {
    if (record.imageEmbedding.length !== dImg || record.textEmbedding.length !== dTxt) {
      throw new Error(
        `record ${record.recordId}: dims ${record.imageEmbedding.length}/${record.textEmbedding.length} ` +
          `do not match dataset dims ${dImg}/${dTxt}`,
      );
    }
    offset = buf.writeBigUInt64LE(record.recordId, offset);
    offset = buf.writeUInt16LE(record.taskId, offset);
    offset = buf.writeUInt16LE(record.labelId, offset);
    offset = buf.writeUInt32LE(0, offset);
    for (const v of record.imageEmbedding) {
      if (!Number.isFinite(v)) throw new Error(`record ${record.recordId}: non-finite image component`);
      offset = buf.writeFloatLE(v, offset);
    }
    for (const v of record.textEmbedding) {
      if (!Number.isFinite(v)) throw new Error(`record ${record.recordId}: non-finite text component`);
      offset = buf.writeFloatLE(v, offset);
    }
  }
  return buf;
}

export function decodeEmb1(buf: Buffer): { records: EmbeddingRecord[]; dImg: number; dTxt: number } {
  if (buf.length < HEADER_BYTES) throw new Error('truncated: shorter than the EMB1 header');
  if (buf.toString('ascii', 0, 4) !== EMB1_MAGIC) {
    throw new Error(`bad magic: expected ${EMB1_MAGIC}, got ${buf.toString('ascii', 0, 4)}`);
  }
  const version = buf.readUInt32LE(4);
  if (version !== EMB1_VERSION) throw new Error(`bad version: ${version}`);
  const nRecords = buf.readBigUInt64LE(8);
  const dImg = buf.readUInt32LE(16);
  const dTxt = buf.readUInt32LE(20);
  const recordBytes = RECORD_HEAD_BYTES + 4 * (dImg + dTxt);
  const expected = HEADER_BYTES + Number(nRecords) * recordBytes;
  if (buf.length < expected) {
    throw new Error(`truncated: need ${expected} bytes for ${nRecords} records, have ${buf.length}`);
  }
  if (buf.length > expected) throw new Error(`trailing data: ${buf.length - expected} extra bytes`);
  const records: EmbeddingRecord[] = [];
  let offset = HEADER_BYTES;
  for (let i = 0; i < Number(nRecords); i++) {
    const recordId = buf.readBigUInt64LE(offset);
    const taskId = buf.readUInt16LE(offset + 8);
    const labelId = buf.readUInt16LE(offset + 10);
    offset += RECORD_HEAD_BYTES;
    const imageEmbedding = new Float32Array(dImg);
    for (let k = 0; k < dImg; k++) {
      imageEmbedding[k] = buf.readFloatLE(offset);
      offset += 4;
    }
    const textEmbedding = new Float32Array(dTxt);
    for (let k = 0; k < dTxt; k++) {
      textEmbedding[k] = buf.readFloatLE(offset);
      offset += 4;
    }
    for (const arr of [imageEmbedding, textEmbedding]) {
      for (const v of arr) {
        if (!Number.isFinite(v)) throw new Error(`record ${recordId}: non-finite payload`);
      }
    }
    records.push({ recordId, taskId, labelId, imageEmbedding, textEmbedding });
  }
  return { records, dImg, dTxt };
}

export async function writeEmb1(
  records: EmbeddingRecord[],
  manifest: Manifest,
  datasetPath: string,
): Promise<void> {
  await fs.mkdir(path.dirname(datasetPath), { recursive: true });
  await fs.writeFile(datasetPath, encodeEmb1(records, manifest.dims.image, manifest.dims.text));
  await fs.writeFile(manifestPathFor(datasetPath), `${JSON.stringify(manifest, sortedKeys, 2)}\n`);
}

export async function writePromptTable(
  prompts: EmbeddingRecord[],
  dim: number,
  outPath: string,
): Promise<void> {
  await fs.mkdir(path.dirname(outPath), { recursive: true });
  await fs.writeFile(outPath, encodeEmb1(prompts, 0, dim));
}

export async function readEmb1(datasetPath: string): Promise<{
  records: EmbeddingRecord[];
  dImg: number;
  dTxt: number;
  manifest: Manifest | null;
}> {
  const { records, dImg, dTxt } = decodeEmb1(await fs.readFile(datasetPath));
  let manifest: Manifest | null = null;
  const manifestPath = manifestPathFor(datasetPath);
  try {
    manifest = JSON.parse(await fs.readFile(manifestPath, 'utf-8')) as Manifest;
  } catch {
    manifest = null;
  }
  return { records, dImg, dTxt, manifest };
}

function sortedKeys(_key: string, value: unknown): unknown {
  if (value && typeof value === 'object' && !Array.isArray(value)) {
    return Object.fromEntries(
      Object.entries(value as Record<string, unknown>).sort(([a], [b]) => (a < b ? -1 : a > b ? 1 : 0)),
    );
  }
  return value;
}
