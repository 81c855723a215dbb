/**
 * Embedding backends. The production encoder runs a pretrained
 * contrastive vision-language model (ViT-L/14 image tower + matching text
 * tower) through transformers.js; the hash encoder is a deterministic
 * stand-in used by tests and dry runs, derived purely from input bytes.
 */
import { createHash } from 'crypto';
import { promises as fs } from 'fs';

export interface Encoder {
  readonly name: string;
  readonly imageDim: number;
  readonly textDim: number;
  embedImages(paths: string[]): Promise<Float32Array[]>;
  embedTexts(texts: string[]): Promise<Float32Array[]>;
}

export const DEFAULT_MODEL_ID = 'Xenova/clip-vit-large-patch14';

// Resolved through a variable so the compiler does not require the
// optional dependency's type declarations to be installed.
const TRANSFORMERS_MODULE = '@xenova/transformers';

export class ClipEncoder implements Encoder {
  readonly name: string;
  readonly imageDim = 768;
  readonly textDim = 768;
  private readonly batchSize: number;
  // transformers.js pipelines, loaded lazily so importing this module
  // never pulls the ONNX runtime
  private vision: any = null;
  private processor: any = null;
  private text: any = null;
  private tokenizer: any = null;
  private rawImage: any = null;

  constructor(modelId: string = DEFAULT_MODEL_ID, batchSize = 16) {
    this.name = modelId;
    this.batchSize = batchSize;
  }

  private async load(): Promise<void> {
    if (this.vision) return;
    let tf: any;
    try {
      tf = await import(TRANSFORMERS_MODULE);
    } catch (err) {
      throw new Error(
        `encoder backend unavailable: install the optional '@xenova/transformers' ` +
          `dependency to run the ${this.name} encoder (${err instanceof Error ? err.message : err})`,
      );
    }
    this.tokenizer = await tf.AutoTokenizer.from_pretrained(this.name);
    this.text = await tf.CLIPTextModelWithProjection.from_pretrained(this.name, {
      quantized: true,
    });
    this.processor = await tf.AutoProcessor.from_pretrained(this.name);
    this.vision = await tf.CLIPVisionModelWithProjection.from_pretrained(this.name, {
      quantized: true,
    });
    this.rawImage = tf.RawImage;
  }

  async embedImages(paths: string[]): Promise<Float32Array[]> {
    await this.load();
    const out: Float32Array[] = [];
    for (let start = 0; start < paths.length; start += this.batchSize) {
      const batch = paths.slice(start, start + this.batchSize);
      const images = await Promise.all(batch.map((p) => this.rawImage.read(p)));
      const inputs = await this.processor(images);
      const { image_embeds } = await this.vision(inputs);
      const [n, dim] = image_embeds.dims;
      const data = image_embeds.data as Float32Array;
      for (let i = 0; i < n; i++) out.push(data.slice(i * dim, (i + 1) * dim));
    }
    return out;
  }

  async embedTexts(texts: string[]): Promise<Float32Array[]> {
    await this.load();
    const out: Float32Array[] = [];
    for (let start = 0; start < texts.length; start += this.batchSize) {
      const batch = texts.slice(start, start + this.batchSize);
      const inputs = this.tokenizer(batch, { padding: true, truncation: true });
      const { text_embeds } = await this.text(inputs);
      const [n, dim] = text_embeds.dims;
      const data = text_embeds.data as Float32Array;
      for (let i = 0; i < n; i++) out.push(data.slice(i * dim, (i + 1) * dim));
    }
    return out;
  }
}

/** Deterministic pseudo-encoder: unit-norm vectors seeded by content hashes. */
export class HashEncoder implements Encoder {
  readonly name: string;
  readonly imageDim: number;
  readonly textDim: number;

  constructor(dim = 32) {
    this.name = `hash-${dim}`;
    this.imageDim = dim;
    this.textDim = dim;
  }

  private vectorFor(seed: Buffer, dim: number): Float32Array {
    const out = new Float32Array(dim);
    let digest = seed;
    let norm = 0;
    for (let i = 0; i < dim; i++) {
      if (i % 8 === 0) digest = createHash('sha256').update(digest).digest();
      // map 4 hash bytes to a value in [-1, 1)
      const raw = digest.readUInt32LE((i % 8) * 4);
      out[i] = raw / 2 ** 31 - 1;
      norm += out[i] * out[i];
    }
    norm = Math.sqrt(norm) || 1;
    for (let i = 0; i < dim; i++) out[i] /= norm;
    return out;
  }

  async embedImages(paths: string[]): Promise<Float32Array[]> {
    const out: Float32Array[] = [];
    for (const p of paths) {
      const bytes = await fs.readFile(p);
      out.push(this.vectorFor(createHash('sha256').update(bytes).digest(), this.imageDim));
    }
    return out;
  }

  async embedTexts(texts: string[]): Promise<Float32Array[]> {
    return texts.map((t) =>
      this.vectorFor(createHash('sha256').update(Buffer.from(t, 'utf-8')).digest(), this.textDim),
    );
  }
}
