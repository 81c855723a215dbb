/**
 * Extraction job: read VQA question files, keep the three in-scope
 * question categories, embed every referenced image and question, derive
 * the answer vocabulary, and write an EMB1 dataset + prompt table +
 * manifest consumable by the embercl engine.
 */
import { promises as fs } from 'fs';
import path from 'path';

import type { Encoder } from './encoder.js';
import {
  EmbeddingRecord,
  Manifest,
  TaskDescriptor,
  manifestPathFor,
  writeEmb1,
  writePromptTable,
} from './emb1.js';

export interface QuestionRow {
  question: string;
  imageId: string;
  answer: string;
  category: string;
}

export interface ExtractionJob {
  imageDir: string;
  trainQuestions?: string;
  testQuestions?: string;
  outPath: string;
  encoder: Encoder;
  datasetName?: string;
  promptTemplates?: Record<number, string>;
}

export interface ExtractionSummary {
  datasetPath: string;
  manifestPath: string;
  promptTablePath: string;
  nRecords: number;
  nTrain: number;
  nTest: number;
  dImg: number;
  dTxt: number;
  labelCount: number;
  excluded: number;
}

export const TASK_NAMES: Record<number, string> = {
  0: 'Yes/No',
  1: 'Image Condition',
  2: 'Road Condition',
};

const DEFAULT_PROMPT_TEMPLATES: Record<number, string> = {
  0: '{label}',
  1: 'a photo of a {label} area',
  2: 'a photo of a {label} area',
};

/**
 * Map a question to its task id, or null when out of scope. Counting
 * questions are excluded; a generic condition-recognition category is
 * split into road vs image condition by the question text.
 */
export function classifyTask(category: string, question: string): number | null {
  const cat = category.toLowerCase();
  if (cat.includes('count')) return null;
  if (cat.includes('yes')) return 0;
  if (cat.includes('road')) return 2;
  if (cat.includes('image')) return 1;
  if (cat.includes('condition')) {
    return question.toLowerCase().includes('road') ? 2 : 1;
  }
  return null;
}

const KEY_ALIASES: Record<keyof QuestionRow, string[]> = {
  question: ['question', 'Question'],
  imageId: ['image_id', 'Image_ID', 'image', 'Image'],
  answer: ['answer', 'Answer', 'ground_truth', 'Ground_Truth'],
  category: ['category', 'Category', 'question_type', 'Question_Type'],
};

function pick(row: Record<string, unknown>, field: keyof QuestionRow): string {
  for (const key of KEY_ALIASES[field]) {
    const value = row[key];
    if (value !== undefined && value !== null) return String(value);
  }
  throw new Error(`question row is missing a '${field}' field (tried ${KEY_ALIASES[field].join(', ')})`);
}

/** Question files are JSON: either an array of rows or an object keyed by question id. */
export async function loadQuestionRows(filePath: string): Promise<QuestionRow[]> {
  const doc = JSON.parse(await fs.readFile(filePath, 'utf-8'));
  const rawRows: Record<string, unknown>[] = Array.isArray(doc) ? doc : Object.values(doc);
  return rawRows.map((row) => ({
    question: pick(row, 'question'),
    imageId: pick(row, 'imageId'),
    answer: pick(row, 'answer').trim(),
    category: pick(row, 'category'),
  }));
}

interface ScopedRow extends QuestionRow {
  taskId: number;
  split: 'train' | 'test';
}

function buildVocabulary(rows: ScopedRow[]): { tasks: TaskDescriptor[]; labelOf: (taskId: number, answer: string) => number } {
  const yesNoAnswers = new Set<string>();
  const conditionAnswers = new Set<string>();
  for (const row of rows) {
    if (row.taskId === 0) yesNoAnswers.add(row.answer);
    else conditionAnswers.add(row.answer);
  }
  const labels = new Map<string, number>();
  let next = 0;
  const yesNoLabels: Record<string, number> = {};
  for (const answer of [...yesNoAnswers].sort()) {
    labels.set(`0:${answer}`, next);
    yesNoLabels[answer] = next;
    next += 1;
  }
  // image and road condition share one global label per answer string
  const conditionLabels: Record<string, number> = {};
  for (const answer of [...conditionAnswers].sort()) {
    labels.set(`c:${answer}`, next);
    conditionLabels[answer] = next;
    next += 1;
  }
  const templates = DEFAULT_PROMPT_TEMPLATES;
  const tasks: TaskDescriptor[] = [
    { task_id: 0, name: TASK_NAMES[0], labels: yesNoLabels, prompt_template: templates[0] },
    { task_id: 1, name: TASK_NAMES[1], labels: conditionLabels, prompt_template: templates[1] },
    { task_id: 2, name: TASK_NAMES[2], labels: { ...conditionLabels }, prompt_template: templates[2] },
  ].filter((t) => Object.keys(t.labels).length > 0);
  const labelOf = (taskId: number, answer: string): number => {
    const key = taskId === 0 ? `0:${answer}` : `c:${answer}`;
    const id = labels.get(key);
    if (id === undefined) throw new Error(`no label id for task ${taskId} answer '${answer}'`);
    return id;
  };
  return { tasks, labelOf };
}

export async function extract(job: ExtractionJob): Promise<ExtractionSummary> {
  const encoder = job.encoder;
  const promptTemplates = { ...DEFAULT_PROMPT_TEMPLATES, ...(job.promptTemplates ?? {}) };

  const scoped: ScopedRow[] = [];
  let excluded = 0;
  for (const [split, file] of [
    ['train', job.trainQuestions],
    ['test', job.testQuestions],
  ] as const) {
    if (!file) continue;
    for (const row of await loadQuestionRows(file)) {
      const taskId = classifyTask(row.category, row.question);
      if (taskId === null) {
        excluded += 1;
        continue;
      }
      scoped.push({ ...row, taskId, split });
    }
  }

  // deterministic record ordering: sorted by task, then image, then text
  scoped.sort((a, b) =>
    a.taskId - b.taskId ||
    a.imageId.localeCompare(b.imageId) ||
    a.question.localeCompare(b.question) ||
    a.split.localeCompare(b.split),
  );

  const imageIds = [...new Set(scoped.map((r) => r.imageId))].sort();
  const imagePaths = new Map<string, string>();
  const missing: string[] = [];
  for (const id of imageIds) {
    const candidates = [id, `${id}.jpg`, `${id}.jpeg`, `${id}.png`].map((n) =>
      path.join(job.imageDir, n),
    );
    let found: string | null = null;
    for (const candidate of candidates) {
      try {
        await fs.access(candidate);
        found = candidate;
        break;
      } catch {
        // keep trying extensions
      }
    }
    if (found) imagePaths.set(id, found);
    else missing.push(id);
  }
  if (missing.length > 0) {
    throw new Error(`missing ${missing.length} image(s): ${missing.join(', ')}`);
  }

  const { tasks, labelOf } = buildVocabulary(scoped);

  const imageVectors = await encoder.embedImages(imageIds.map((id) => imagePaths.get(id)!));
  const imageVectorOf = new Map(imageIds.map((id, i) => [id, imageVectors[i]]));
  const textVectors = await encoder.embedTexts(scoped.map((r) => r.question));

  const records: EmbeddingRecord[] = [];
  const split: Record<string, 'train' | 'test'> = {};
  scoped.forEach((row, index) => {
    records.push({
      recordId: BigInt(index),
      taskId: row.taskId,
      labelId: labelOf(row.taskId, row.answer),
      imageEmbedding: imageVectorOf.get(row.imageId)!,
      textEmbedding: textVectors[index],
    });
    split[String(index)] = row.split;
  });

  // prompt table: one embedded prompt per (task, label)
  const promptRows: { taskId: number; labelId: number; text: string }[] = [];
  for (const task of tasks) {
    const template = promptTemplates[task.task_id] ?? '{label}';
    for (const [labelName, labelId] of Object.entries(task.labels).sort((a, b) => a[1] - b[1])) {
      promptRows.push({ taskId: task.task_id, labelId, text: template.replace('{label}', labelName) });
    }
  }
  const promptVectors = await encoder.embedTexts(promptRows.map((p) => p.text));
  const promptRecords: EmbeddingRecord[] = promptRows.map((p, i) => ({
    recordId: BigInt(i),
    taskId: p.taskId,
    labelId: p.labelId,
    imageEmbedding: new Float32Array(0),
    textEmbedding: promptVectors[i],
  }));

  const promptTablePath = job.outPath.replace(/\.emb1$/, '') + '.prompts.emb1';
  const manifest: Manifest = {
    schema_version: 1,
    name: job.datasetName ?? 'vqa-embedding-export',
    dims: { image: encoder.imageDim, text: encoder.textDim },
    tasks,
    split,
    provenance: {
      encoder: encoder.name,
      image_dir: job.imageDir,
      prompt_templates: JSON.stringify(promptTemplates),
    },
    prompt_table: path.basename(promptTablePath),
  };

  await writePromptTable(promptRecords, encoder.textDim, promptTablePath);
  await writeEmb1(records, manifest, job.outPath);

  const nTrain = scoped.filter((r) => r.split === 'train').length;
  return {
    datasetPath: job.outPath,
    manifestPath: manifestPathFor(job.outPath),
    promptTablePath,
    nRecords: records.length,
    nTrain,
    nTest: records.length - nTrain,
    dImg: encoder.imageDim,
    dTxt: encoder.textDim,
    labelCount: new Set(records.map((r) => r.labelId)).size,
    excluded,
  };
}
