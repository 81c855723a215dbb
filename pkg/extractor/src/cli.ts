/**
 * Command line for the extractor.
 *
 *   extract --images DIR [--train FILE] [--test FILE] --out PATH
 *           [--model ID | --mock-dim N] [--batch N] [--name NAME]
 *   verify PATH [--expect-train N] [--expect-test N] [--expect-total N]
 */
import { parseArgs } from 'util';

import { ClipEncoder, DEFAULT_MODEL_ID, HashEncoder } from './encoder.js';
import { extract } from './extract.js';
import { verifyExport } from './verify.js';

function usage(): never {
  console.error(
    [
      'usage:',
      '  extract --images DIR [--train FILE] [--test FILE] --out PATH',
      '          [--model ID] [--mock-dim N] [--batch N] [--name NAME]',
      '  verify PATH [--expect-train N] [--expect-test N] [--expect-total N]',
    ].join('\n'),
  );
  process.exit(1);
}

async function runExtract(argv: string[]): Promise<number> {
  const { values } = parseArgs({
    args: argv,
    options: {
      images: { type: 'string' },
      train: { type: 'string' },
      test: { type: 'string' },
      out: { type: 'string' },
      model: { type: 'string' },
      'mock-dim': { type: 'string' },
      batch: { type: 'string', default: '16' },
      name: { type: 'string' },
    },
  });
  if (!values.images || !values.out) usage();
  if (!values.train && !values.test) {
    console.error('error: provide --train and/or --test question files');
    return 1;
  }
  const encoder = values['mock-dim']
    ? new HashEncoder(Number(values['mock-dim']))
    : new ClipEncoder(values.model ?? DEFAULT_MODEL_ID, Number(values.batch));
  const summary = await extract({
    imageDir: values.images,
    trainQuestions: values.train,
    testQuestions: values.test,
    outPath: values.out,
    encoder,
    datasetName: values.name,
  });
  console.log(
    `wrote ${summary.datasetPath}: ${summary.nRecords} records ` +
      `(${summary.nTrain} train / ${summary.nTest} test), dims ${summary.dImg}/${summary.dTxt}, ` +
      `${summary.labelCount} labels, ${summary.excluded} out-of-scope questions excluded`,
  );
  console.log(`manifest: ${summary.manifestPath}`);
  console.log(`prompt table: ${summary.promptTablePath}`);
  return 0;
}

async function runVerify(argv: string[]): Promise<number> {
  const { values, positionals } = parseArgs({
    args: argv,
    allowPositionals: true,
    options: {
      'expect-train': { type: 'string' },
      'expect-test': { type: 'string' },
      'expect-total': { type: 'string' },
    },
  });
  const [datasetPath] = positionals;
  if (!datasetPath) usage();
  const summary = await verifyExport(datasetPath, {
    train: values['expect-train'] !== undefined ? Number(values['expect-train']) : undefined,
    test: values['expect-test'] !== undefined ? Number(values['expect-test']) : undefined,
    total: values['expect-total'] !== undefined ? Number(values['expect-total']) : undefined,
  });
  console.log(
    `${summary.nRecords} records (${summary.nTrain} train / ${summary.nTest} test), ` +
      `dims ${summary.dImg}/${summary.dTxt}`,
  );
  for (const [task, counts] of Object.entries(summary.perTask)) {
    console.log(`  task ${task}: ${counts.total} total (${counts.train}/${counts.test})`);
  }
  if (!summary.ok) {
    for (const issue of summary.issues) console.error(`issue: ${issue}`);
    return 2;
  }
  console.log('export verified');
  return 0;
}

async function main(): Promise<number> {
  const [command, ...rest] = process.argv.slice(2);
  try {
    if (command === 'extract') return await runExtract(rest);
    if (command === 'verify') return await runVerify(rest);
    usage();
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 2;
  }
}

main().then((code) => process.exit(code));
