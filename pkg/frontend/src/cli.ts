#!/usr/bin/env node
/**
 * plots <kind> <run_dir> -o out.png
 *
 * kind: accuracy_curves | affinity_heatmaps | ablation_grid
 * Exits 0 on success, 1 when artifacts are missing or malformed,
 * 2 on bad usage.
 */

import { ArtifactError } from "./artifacts";
import { PlotKind, render } from "./plots";

const KINDS: PlotKind[] = ["accuracy_curves", "affinity_heatmaps", "ablation_grid"];

function usage(): string {
  return `usage: plots <${KINDS.join("|")}> <run_dir> [-o out.png]`;
}

export function main(argv: string[]): number {
  const args = [...argv];
  let output = "out.png";
  const oIdx = args.findIndex((a) => a === "-o" || a === "--out");
  if (oIdx >= 0) {
    if (oIdx + 1 >= args.length) {
      console.error(usage());
      return 2;
    }
    output = args[oIdx + 1];
    args.splice(oIdx, 2);
  }
  if (args.length !== 2 || !KINDS.includes(args[0] as PlotKind)) {
    console.error(usage());
    return 2;
  }
  const [kind, runDir] = args;
  try {
    render({ kind: kind as PlotKind, runDir, output });
  } catch (err) {
    if (err instanceof ArtifactError) {
      console.error(err.message);
      return 1;
    }
    throw err;
  }
  console.log(`wrote ${output}`);
  return 0;
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
