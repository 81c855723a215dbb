/**
 * Export verification: re-read an EMB1 dataset from the writing side and
 * check structure, dims, label/task consistency, and split counts.
 */
import { readEmb1 } from './emb1.js';

export interface VerifySummary {
  ok: boolean;
  issues: string[];
  nRecords: number;
  nTrain: number;
  nTest: number;
  dImg: number;
  dTxt: number;
  perTask: Record<string, { total: number; train: number; test: number }>;
}

export async function verifyExport(
  datasetPath: string,
  expected?: { train?: number; test?: number; total?: number },
): Promise<VerifySummary> {
  const { records, dImg, dTxt, manifest } = await readEmb1(datasetPath);
  const issues: string[] = [];
  const perTask: VerifySummary['perTask'] = {};
  let nTrain = 0;
  let nTest = 0;

  const taskLabels = new Map<number, Set<number>>();
  if (manifest) {
    for (const task of manifest.tasks) {
      taskLabels.set(task.task_id, new Set(Object.values(task.labels)));
    }
    if (manifest.dims.image !== dImg || manifest.dims.text !== dTxt) {
      issues.push(
        `manifest dims ${manifest.dims.image}/${manifest.dims.text} do not match file dims ${dImg}/${dTxt}`,
      );
    }
  } else {
    issues.push('manifest sidecar missing or unreadable');
  }

  for (const record of records) {
    const bucket = (perTask[String(record.taskId)] ??= { total: 0, train: 0, test: 0 });
    bucket.total += 1;
    const where = manifest?.split[String(record.recordId)];
    if (where === 'train') {
      nTrain += 1;
      bucket.train += 1;
    } else if (where === 'test') {
      nTest += 1;
      bucket.test += 1;
    } else {
      issues.push(`record ${record.recordId} has no split assignment`);
    }
    const allowed = taskLabels.get(record.taskId);
    if (allowed && !allowed.has(record.labelId)) {
      issues.push(`record ${record.recordId} label ${record.labelId} outside task ${record.taskId}`);
    }
  }

  if (expected?.total !== undefined && expected.total !== records.length) {
    issues.push(`expected ${expected.total} records, found ${records.length}`);
  }
  if (expected?.train !== undefined && expected.train !== nTrain) {
    issues.push(`expected ${expected.train} train records, found ${nTrain}`);
  }
  if (expected?.test !== undefined && expected.test !== nTest) {
    issues.push(`expected ${expected.test} test records, found ${nTest}`);
  }

  return {
    ok: issues.length === 0,
    issues,
    nRecords: records.length,
    nTrain,
    nTest,
    dImg,
    dTxt,
    perTask,
  };
}
