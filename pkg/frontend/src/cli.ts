/** Trainer command line.
 *
 *   tsx src/cli.ts train --patches <archive dir> --out <checkpoint.json>
 *       [--iterations N] [--batch-keypoints N] [--seed N] [--val-fraction F]
 *   tsx src/cli.ts export --model <checkpoint.json> --requests <requests.jsonl>
 *       --out <descriptors.bkd1>
 */
import * as fs from "node:fs";
import { loadPatchArchive, splitBySurface } from "./data.js";
import { exportDescriptors } from "./export.js";
import { initBackend, loadModelJson, saveModelJson } from "./model.js";
import { DEFAULT_CONFIG, train } from "./train.js";

function parseFlags(argv: string[]): Map<string, string> {
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    if (!argv[i].startsWith("--") || i + 1 >= argv.length) {
      throw new Error(`malformed flags near ${argv[i]}`);
    }
    flags.set(argv[i].slice(2), argv[i + 1]);
  }
  return flags;
}

function required(flags: Map<string, string>, name: string): string {
  const v = flags.get(name);
  if (!v) throw new Error(`--${name} is required`);
  return v;
}

async function cmdTrain(flags: Map<string, string>): Promise<void> {
  const archive = loadPatchArchive(required(flags, "patches"));
  const { train: trainDs, val: valDs } = splitBySurface(
    archive,
    Number(flags.get("val-fraction") ?? 0.25),
    Number(flags.get("seed") ?? 0),
  );
  const config = {
    ...DEFAULT_CONFIG,
    maxIterations: Number(flags.get("iterations") ?? DEFAULT_CONFIG.maxIterations),
    batchKeypoints: Number(
      flags.get("batch-keypoints") ?? DEFAULT_CONFIG.batchKeypoints,
    ),
    seed: Number(flags.get("seed") ?? 0),
    verbose: true,
  };
  console.log(
    `training on ${trainDs.groups.size} keypoints ` +
      `(${trainDs.surfaces.length} surfaces), validating on ` +
      `${valDs.groups.size} keypoints (${valDs.surfaces.length} surfaces)`,
  );
  const result = await train(trainDs, valDs, config);
  console.log(
    `best val P@1 ${result.bestPAt1.toFixed(4)} at iteration ` +
      `${result.bestIteration}; ${result.parameterCount} parameters`,
  );
  const out = required(flags, "out");
  fs.writeFileSync(out, await saveModelJson(result.model));
  fs.writeFileSync(
    out.replace(/\.json$/, "") + ".history.json",
    JSON.stringify(
      {
        history: result.history,
        bestPAt1: result.bestPAt1,
        bestIteration: result.bestIteration,
        parameterCount: result.parameterCount,
      },
      null,
      2,
    ),
  );
  console.log(`wrote checkpoint to ${out}`);
}

async function cmdExport(flags: Map<string, string>): Promise<void> {
  const model = await loadModelJson(
    fs.readFileSync(required(flags, "model"), "utf8"),
  );
  const n = exportDescriptors(
    model,
    required(flags, "requests"),
    required(flags, "out"),
  );
  console.log(`wrote ${n} descriptors to ${flags.get("out")}`);
}

async function main(): Promise<void> {
  const [command, ...rest] = process.argv.slice(2);
  const flags = parseFlags(rest);
  console.log(`backend: ${await initBackend()}`);
  if (command === "train") await cmdTrain(flags);
  else if (command === "export") await cmdExport(flags);
  else throw new Error(`unknown command ${command ?? "(none)"}`);
}

main().catch((err) => {
  console.error(err.message ?? err);
  process.exit(1);
});
