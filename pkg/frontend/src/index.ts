export { ArtifactError, collectRuns, readAffinityFrame, readMetrics, readSummary, readSweepSummary, affinityRounds } from "./artifacts";
export { encodePng, PNG_SIGNATURE } from "./png";
export { Raster, heatColor, textWidth } from "./raster";
export { PlotJob, PlotKind, render, renderAblationGrid, renderAccuracyCurves, renderAffinityHeatmaps } from "./plots";
