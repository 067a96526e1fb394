/**
 * The three figure kinds rendered from run artifacts: per-round accuracy
 * curves (one line per strategy), affinity heatmap grids over rounds with
 * clients ordered so same-distribution blocks are adjacent, and ablation
 * grids of final accuracy over two swept axes.
 */

import { writeFileSync } from "node:fs";
import { basename } from "node:path";

import {
  ArtifactError,
  MetricsRecord,
  affinityRounds,
  collectRuns,
  readAffinityFrame,
  readMetrics,
  readSummary,
  readSweepSummary,
} from "./artifacts";
import {
  BLACK,
  Color,
  GRAY,
  LIGHT_GRAY,
  Raster,
  SERIES_COLORS,
  WHITE,
  heatColor,
  textWidth,
} from "./raster";

export type PlotKind = "accuracy_curves" | "affinity_heatmaps" | "ablation_grid";

export interface PlotJob {
  runDir: string;
  kind: PlotKind;
  output: string;
}

export function render(job: PlotJob): void {
  let raster: Raster;
  switch (job.kind) {
    case "accuracy_curves":
      raster = renderAccuracyCurves(job.runDir);
      break;
    case "affinity_heatmaps":
      raster = renderAffinityHeatmaps(job.runDir);
      break;
    case "ablation_grid":
      raster = renderAblationGrid(job.runDir);
      break;
    default:
      throw new ArtifactError(`unknown plot kind: ${job.kind}`);
  }
  writeFileSync(job.output, raster.toPng());
}

// ------------------------------------------------------------------
// Accuracy curves
// ------------------------------------------------------------------

function perRoundAccuracy(records: MetricsRecord[]): number[] {
  const byRound = new Map<number, number[]>();
  for (const rec of records) {
    const list = byRound.get(rec.round) ?? [];
    list.push(rec.test_acc);
    byRound.set(rec.round, list);
  }
  const rounds = [...byRound.keys()].sort((a, b) => a - b);
  return rounds.map((r) => {
    const vals = byRound.get(r)!;
    return vals.reduce((s, v) => s + v, 0) / vals.length;
  });
}

function mean(values: number[]): number {
  return values.reduce((s, v) => s + v, 0) / values.length;
}

export function renderAccuracyCurves(root: string): Raster {
  const runs = collectRuns(root);
  const byStrategy = new Map<string, number[][]>();
  for (const run of runs) {
    const summary = readSummary(run);
    const curve = perRoundAccuracy(readMetrics(run));
    const list = byStrategy.get(summary.strategy) ?? [];
    list.push(curve);
    byStrategy.set(summary.strategy, list);
  }
  const series = [...byStrategy.entries()]
    .sort(([a], [b]) => a.localeCompare(b))
    .map(([strategy, curves]) => {
      const longest = Math.max(...curves.map((c) => c.length));
      const averaged: number[] = [];
      for (let r = 0; r < longest; r++) {
        const present = curves.filter((c) => r < c.length).map((c) => c[r]);
        averaged.push(mean(present));
      }
      return { strategy, curve: averaged };
    });

  const width = 720;
  const height = 480;
  const left = 64;
  const right = 24;
  const top = 36;
  const bottom = 48;
  const plotW = width - left - right;
  const plotH = height - top - bottom;
  const raster = new Raster(width, height);

  raster.drawText(left, 10, "mean test accuracy per round", BLACK, 2);
  const maxRound = Math.max(...series.map((s) => s.curve.length - 1), 1);
  const toX = (round: number) => left + (round / maxRound) * plotW;
  const toY = (acc: number) => top + (1 - acc) * plotH;

  for (let tick = 0; tick <= 10; tick += 2) {
    const y = toY(tick / 10);
    raster.drawLine(left, y, left + plotW, y, LIGHT_GRAY);
    raster.drawText(left - textWidth((tick / 10).toFixed(1)) - 6, y - 3, (tick / 10).toFixed(1));
  }
  const xStep = Math.max(1, Math.ceil(maxRound / 8));
  for (let r = 0; r <= maxRound; r += xStep) {
    const x = toX(r);
    raster.drawLine(x, top, x, top + plotH, LIGHT_GRAY);
    raster.drawText(x - textWidth(String(r)) / 2, top + plotH + 8, String(r));
  }
  raster.strokeRect(left, top, plotW, plotH, GRAY);
  raster.drawText(left + plotW / 2 - textWidth("round") / 2, height - 16, "round");

  series.forEach(({ strategy, curve }, idx) => {
    const color = SERIES_COLORS[idx % SERIES_COLORS.length];
    for (let r = 1; r < curve.length; r++) {
      raster.drawLine(toX(r - 1), toY(curve[r - 1]), toX(r), toY(curve[r]), color, 2);
    }
    const ly = top + 10 + idx * 14;
    raster.drawLine(left + 10, ly + 3, left + 34, ly + 3, color, 3);
    raster.drawText(left + 40, ly, strategy);
  });
  return raster;
}

// ------------------------------------------------------------------
// Affinity heatmaps
// ------------------------------------------------------------------

function pickFrames(available: number[], count: number): number[] {
  if (available.length <= count) return available;
  const picks = new Set<number>();
  for (let i = 0; i < count; i++) {
    picks.add(available[Math.round((i * (available.length - 1)) / (count - 1))]);
  }
  return [...picks].sort((a, b) => a - b);
}

export function renderAffinityHeatmaps(runDir: string, maxFrames = 6): Raster {
  const summary = readSummary(runDir);
  const available = affinityRounds(runDir);
  if (available.length === 0) {
    throw new ArtifactError(`missing artifact: ${runDir}/affinity_round_0.csv`);
  }
  const rounds = pickFrames(available, maxFrames);
  const frames = rounds.map((r) => readAffinityFrame(runDir, r));
  const k = frames[0].length;

  // Same-distribution clients rendered adjacently (stable by id inside a block).
  const dist = summary.distribution_of_client ?? Array(k).fill(0);
  const order = [...Array(k).keys()].sort((a, b) => dist[a] - dist[b] || a - b);

  let lo = Infinity;
  let hi = -Infinity;
  for (const frame of frames) {
    for (const row of frame) {
      for (const v of row) {
        lo = Math.min(lo, v);
        hi = Math.max(hi, v);
      }
    }
  }
  const span = hi - lo || 1;

  const cell = Math.max(6, Math.floor(150 / k));
  const frameSize = cell * k;
  const pad = 34;
  const cols = Math.min(3, frames.length);
  const rows = Math.ceil(frames.length / cols);
  const width = cols * (frameSize + pad) + pad;
  const height = rows * (frameSize + pad) + pad + 28;
  const raster = new Raster(width, height);
  raster.drawText(pad, 8, "client-to-client affinity over rounds", BLACK, 2);

  frames.forEach((frame, f) => {
    const gx = pad + (f % cols) * (frameSize + pad);
    const gy = 36 + Math.floor(f / cols) * (frameSize + pad);
    for (let i = 0; i < k; i++) {
      for (let j = 0; j < k; j++) {
        const v = frame[order[i]][order[j]];
        raster.fillRect(gx + j * cell, gy + i * cell, cell, cell, heatColor((v - lo) / span));
      }
    }
    // white separators between distribution blocks
    for (let i = 1; i < k; i++) {
      if (dist[order[i]] !== dist[order[i - 1]]) {
        raster.fillRect(gx, gy + i * cell, frameSize, 1, WHITE);
        raster.fillRect(gx + i * cell, gy, 1, frameSize, WHITE);
      }
    }
    raster.strokeRect(gx, gy, frameSize, frameSize, GRAY);
    raster.drawText(gx, gy + frameSize + 6, `round ${rounds[f]}`);
  });
  raster.drawText(
    pad,
    height - 14,
    `low=${lo.toFixed(2)} high=${hi.toFixed(2)} rows=requester, cols=owner`
  );
  return raster;
}

// ------------------------------------------------------------------
// Ablation grid
// ------------------------------------------------------------------

interface GridData {
  xName: string;
  yName: string;
  xValues: string[];
  yValues: string[];
  cells: Array<Array<number | null>>; // [y][x]
}

function gridFromSweep(root: string): GridData {
  const table = readSweepSummary(root);
  const distinct = new Map<string, string[]>();
  for (const axis of table.axes) {
    const values = [...new Set(table.rows.map((r) => r.values[axis]))];
    values.sort((a, b) => {
      const na = Number(a);
      const nb = Number(b);
      return Number.isNaN(na) || Number.isNaN(nb) ? a.localeCompare(b) : na - nb;
    });
    distinct.set(axis, values);
  }
  const varying = table.axes.filter((a) => distinct.get(a)!.length > 1);
  const preferred = ["epsilon", "downloads_per_client"].filter((a) => varying.includes(a));
  const chosen = [...preferred, ...varying.filter((a) => !preferred.includes(a))].slice(0, 2);
  const xName = chosen[0] ?? table.axes[0];
  const yName = chosen[1] ?? "";
  const xValues = distinct.get(xName) ?? [""];
  const yValues = yName ? distinct.get(yName)! : [""];

  const cells: Array<Array<number | null>> = yValues.map(() => xValues.map(() => null));
  for (let yi = 0; yi < yValues.length; yi++) {
    for (let xi = 0; xi < xValues.length; xi++) {
      const matching = table.rows.filter(
        (r) =>
          r.values[xName] === xValues[xi] &&
          (!yName || r.values[yName] === yValues[yi]) &&
          r.accuracy !== null
      );
      if (matching.length) {
        cells[yi][xi] = mean(matching.map((r) => r.accuracy as number));
      }
    }
  }
  return { xName, yName, xValues, yValues, cells };
}

function gridFromSingleRun(root: string): GridData {
  const summary = readSummary(root);
  const config = summary.config ?? {};
  return {
    xName: "epsilon",
    yName: "downloads_per_client",
    xValues: [String(config["epsilon"] ?? "")],
    yValues: [String(config["downloads_per_client"] ?? "")],
    cells: [[summary.mean_test_accuracy]],
  };
}

export function renderAblationGrid(root: string): Raster {
  let grid: GridData;
  try {
    grid = gridFromSweep(root);
  } catch (err) {
    if (!(err instanceof ArtifactError)) throw err;
    grid = gridFromSingleRun(root);
  }
  const values = grid.cells.flat().filter((v): v is number => v !== null);
  if (values.length === 0) {
    throw new ArtifactError(`missing artifact: no successful cells under ${root}`);
  }
  const lo = Math.min(...values);
  const hi = Math.max(...values);
  const span = hi - lo || 1;

  const cellW = 86;
  const cellH = 46;
  const left = 110;
  const top = 54;
  const width = left + grid.xValues.length * cellW + 30;
  const height = top + grid.yValues.length * cellH + 60;
  const raster = new Raster(width, height);
  raster.drawText(16, 10, `final accuracy over ${grid.xName}${grid.yName ? " x " + grid.yName : ""}`, BLACK, 2);

  grid.yValues.forEach((yv, yi) => {
    const label = yv === "" ? "" : yv;
    raster.drawText(left - textWidth(label) - 10, top + yi * cellH + cellH / 2 - 3, label);
    grid.xValues.forEach((xv, xi) => {
      const v = grid.cells[yi][xi];
      const x = left + xi * cellW;
      const y = top + yi * cellH;
      if (v === null) {
        raster.fillRect(x, y, cellW, cellH, LIGHT_GRAY);
        raster.drawText(x + cellW / 2 - textWidth("n/a") / 2, y + cellH / 2 - 3, "n/a");
      } else {
        const t = (v - lo) / span;
        raster.fillRect(x, y, cellW, cellH, heatColor(t));
        const label = v.toFixed(3);
        raster.drawText(
          x + cellW / 2 - textWidth(label) / 2,
          y + cellH / 2 - 3,
          label,
          t > 0.6 ? BLACK : WHITE
        );
      }
      raster.strokeRect(x, y, cellW, cellH, WHITE);
    });
  });
  grid.xValues.forEach((xv, xi) => {
    raster.drawText(
      left + xi * cellW + cellW / 2 - textWidth(xv) / 2,
      top + grid.yValues.length * cellH + 8,
      xv
    );
  });
  raster.drawText(
    left + (grid.xValues.length * cellW) / 2 - textWidth(grid.xName) / 2,
    height - 30,
    grid.xName
  );
  if (grid.yName) {
    raster.drawText(8, top - 16, grid.yName);
  }
  raster.drawText(16, height - 14, `${basename(root)}: low=${lo.toFixed(3)} high=${hi.toFixed(3)}`);
  return raster;
}
