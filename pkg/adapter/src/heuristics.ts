/**
 * Built-in predictors.
 *
 * A real model integration implements Predictor and hands it to serve():
 * read the depth image and instance image from the given paths, run
 * inference with the instruction text, and return one nav and one fac
 * array of length width*height (row-major, values in [0, 1]).  Everything
 * else (protocol framing, file encoding, validation) is handled by the
 * serve loop, so the integration point stays free of wire concerns.
 */
import { readFileSync } from "node:fs";

import { decodeInstances } from "./format";

export interface PredictorInput {
  width: number;
  height: number;
  instruction: string;
  depthPath: string;
  instancesPath: string;
}

export interface HeatmapPair {
  nav: Float32Array;
  fac: Float32Array;
}

export type Predictor = (input: PredictorInput) => HeatmapPair;

export const zerosPredictor: Predictor = ({ width, height }) => ({
  nav: new Float32Array(width * height),
  fac: new Float32Array(width * height),
});

/**
 * Single 1.0 spike at the pixel centroid of the largest object mask, on both
 * maps.  Wall and floor pixels are ignored; ties go to the smallest id; an
 * object-free image yields all-zero maps.
 */
export const centroidPredictor: Predictor = (input) => {
  const seg = decodeInstances(readFileSync(input.instancesPath));
  if (seg.width !== input.width || seg.height !== input.height) {
    throw new Error(
      `instance image is ${seg.height}x${seg.width}, request says ${input.height}x${input.width}`,
    );
  }
  const counts = new Map<number, { n: number; sumU: number; sumV: number }>();
  for (let v = 0; v < seg.height; v++) {
    for (let u = 0; u < seg.width; u++) {
      const id = seg.values[v * seg.width + u];
      if (id <= 0) {
        continue;
      }
      const entry = counts.get(id);
      if (entry === undefined) {
        counts.set(id, { n: 1, sumU: u, sumV: v });
      } else {
        entry.n += 1;
        entry.sumU += u;
        entry.sumV += v;
      }
    }
  }
  const nav = new Float32Array(input.width * input.height);
  const fac = new Float32Array(input.width * input.height);
  let bestId = -1;
  let best: { n: number; sumU: number; sumV: number } | undefined;
  for (const [id, entry] of counts) {
    if (best === undefined || entry.n > best.n || (entry.n === best.n && id < bestId)) {
      bestId = id;
      best = entry;
    }
  }
  if (best !== undefined) {
    const u = Math.min(input.width - 1, Math.max(0, Math.round(best.sumU / best.n)));
    const v = Math.min(input.height - 1, Math.max(0, Math.round(best.sumV / best.n)));
    nav[v * input.width + u] = 1;
    fac[v * input.width + u] = 1;
  }
  return { nav, fac };
};
