/**
 * Readers for the simulator's run artifacts. Only the documented file
 * schemas are consumed: metrics.jsonl, summary.json, affinity_round_{r}.csv,
 * and sweep_summary.csv. Missing or malformed files raise errors that name
 * the offending path.
 */

import { existsSync, readFileSync, readdirSync, statSync } from "node:fs";
import { join } from "node:path";

export interface MetricsRecord {
  round: number;
  client: number;
  strategy: string;
  val_loss: number;
  test_loss: number;
  test_acc: number;
  downloads: number[];
  weights: number[];
  transfers: number;
}

export interface RunSummary {
  strategy: string;
  seed: number;
  n_clients: number;
  rounds: number;
  mean_test_accuracy: number;
  n_distributions: number;
  distribution_of_client: number[];
  target_distribution_of_client: number[] | null;
  config: Record<string, unknown>;
}

export class ArtifactError extends Error {}

function requireFile(path: string): string {
  if (!existsSync(path)) {
    throw new ArtifactError(`missing artifact: ${path}`);
  }
  return readFileSync(path, "utf-8");
}

export function readSummary(runDir: string): RunSummary {
  const path = join(runDir, "summary.json");
  let parsed: any;
  try {
    parsed = JSON.parse(requireFile(path));
  } catch (err) {
    if (err instanceof ArtifactError) throw err;
    throw new ArtifactError(`corrupt artifact: ${path} (${(err as Error).message})`);
  }
  for (const key of ["strategy", "rounds", "mean_test_accuracy", "distribution_of_client"]) {
    if (!(key in parsed)) {
      throw new ArtifactError(`corrupt artifact: ${path} (missing key ${key})`);
    }
  }
  return parsed as RunSummary;
}

export function readMetrics(runDir: string): MetricsRecord[] {
  const path = join(runDir, "metrics.jsonl");
  const text = requireFile(path);
  const records: MetricsRecord[] = [];
  const lines = text.split("\n");
  for (let i = 0; i < lines.length; i++) {
    const line = lines[i].trim();
    if (!line) continue;
    try {
      records.push(JSON.parse(line));
    } catch (err) {
      throw new ArtifactError(`corrupt artifact: ${path}:${i + 1} (${(err as Error).message})`);
    }
  }
  if (records.length === 0) {
    throw new ArtifactError(`corrupt artifact: ${path} (no records)`);
  }
  return records;
}

export function readAffinityFrame(runDir: string, round: number): number[][] {
  const path = join(runDir, `affinity_round_${round}.csv`);
  const rows = requireFile(path)
    .trim()
    .split("\n")
    .map((line, i) => {
      const row = line.split(",").map(Number);
      if (row.some((v) => Number.isNaN(v))) {
        throw new ArtifactError(`corrupt artifact: ${path}:${i + 1}`);
      }
      return row;
    });
  if (rows.some((r) => r.length !== rows.length)) {
    throw new ArtifactError(`corrupt artifact: ${path} (matrix is not square)`);
  }
  return rows;
}

/** Round indices that have an affinity frame on disk, ascending. */
export function affinityRounds(runDir: string): number[] {
  const rounds: number[] = [];
  for (const name of readdirSync(runDir)) {
    const match = /^affinity_round_(\d+)\.csv$/.exec(name);
    if (match) rounds.push(Number(match[1]));
  }
  return rounds.sort((a, b) => a - b);
}

/** A run dir itself, or every direct subdirectory holding a summary.json. */
export function collectRuns(root: string): string[] {
  if (!existsSync(root) || !statSync(root).isDirectory()) {
    throw new ArtifactError(`missing artifact: ${root}`);
  }
  if (existsSync(join(root, "summary.json"))) {
    return [root];
  }
  const runs = readdirSync(root)
    .sort()
    .map((name) => join(root, name))
    .filter((p) => statSync(p).isDirectory() && existsSync(join(p, "summary.json")));
  if (runs.length === 0) {
    throw new ArtifactError(`missing artifact: ${join(root, "summary.json")}`);
  }
  return runs;
}

export interface SweepTable {
  axes: string[]; // every column before mean_test_accuracy
  rows: Array<{ values: Record<string, string>; accuracy: number | null; status: string }>;
}

export function readSweepSummary(root: string): SweepTable {
  const path = join(root, "sweep_summary.csv");
  const lines = requireFile(path).trim().split("\n");
  const header = lines[0].split(",");
  const accIdx = header.indexOf("mean_test_accuracy");
  const statusIdx = header.indexOf("status");
  if (accIdx < 0 || statusIdx < 0) {
    throw new ArtifactError(`corrupt artifact: ${path} (unexpected header)`);
  }
  const axes = header.slice(0, accIdx);
  const rows = lines.slice(1).map((line) => {
    const parts = line.split(",");
    const values: Record<string, string> = {};
    axes.forEach((axis, i) => (values[axis] = parts[i]));
    return {
      values,
      accuracy: parts[accIdx] === "" ? null : Number(parts[accIdx]),
      status: parts[statusIdx],
    };
  });
  return { axes, rows };
}
