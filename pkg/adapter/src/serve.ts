/**
 * Request loop of the reference adapter.
 *
 * The loop is single-threaded and strictly sequential: the protocol allows
 * one in-flight request per endpoint, so each response may reuse the fixed
 * output file names (out-nav.hmf / out-fac.hmf): the requester consumes
 * them before sending the next request, which keeps disk usage flat across
 * arbitrarily long sessions.
 */
import { readFileSync, writeFileSync } from "node:fs";
import * as path from "node:path";
import * as readline from "node:readline";

import { FAC_KIND, NAV_KIND, decodeHeatmap, encodeHeatmap } from "./format";
import { Predictor, centroidPredictor, zerosPredictor } from "./heuristics";
import {
  WireRequest,
  WireResponse,
  parseRequest,
  serializeHandshake,
  serializeResponse,
} from "./protocol";

export const HEURISTICS = ["echo_gt", "centroid", "zeros"] as const;
export type Heuristic = (typeof HEURISTICS)[number];

export function isHeuristic(value: string): value is Heuristic {
  return (HEURISTICS as readonly string[]).includes(value);
}

export interface ServeOptions {
  heuristic: Heuristic;
  input: NodeJS.ReadableStream;
  output: NodeJS.WritableStream;
  /** Directory for exchanged files; defaults to the process working directory. */
  workdir?: string;
  /** Handshake name prefix; the heuristic is appended after a slash. */
  name?: string;
  /** Predictor override for custom integrations (ignored by echo_gt). */
  predictor?: Predictor;
}

const OUT_NAV = "out-nav.hmf";
const OUT_FAC = "out-fac.hmf";

function metaString(meta: Record<string, unknown>, key: string): string {
  const value = meta[key];
  if (typeof value !== "string") {
    throw new Error(`request meta lacks a '${key}' path; echo_gt needs ground-truth maps`);
  }
  return value;
}

/** Copy a ground-truth heatmap, re-validating format, kind, and size. */
function echoFile(
  sourcePath: string,
  outName: string,
  expectedKind: number,
  request: WireRequest,
  workdir: string,
): void {
  const blob = readFileSync(path.resolve(workdir, sourcePath));
  const image = decodeHeatmap(blob);
  if (image.kind !== expectedKind) {
    throw new Error(`ground-truth map ${sourcePath} has kind ${image.kind}, expected ${expectedKind}`);
  }
  if (image.width !== request.width || image.height !== request.height) {
    throw new Error(
      `ground-truth map ${sourcePath} is ${image.height}x${image.width}, request says ${request.height}x${request.width}`,
    );
  }
  writeFileSync(path.join(workdir, outName), blob);
}

function handleEchoGt(request: WireRequest, workdir: string): void {
  const metaBlob = readFileSync(path.resolve(workdir, request.meta), "utf8");
  const meta = JSON.parse(metaBlob) as Record<string, unknown>;
  echoFile(metaString(meta, "nav_gt"), OUT_NAV, NAV_KIND, request, workdir);
  echoFile(metaString(meta, "fac_gt"), OUT_FAC, FAC_KIND, request, workdir);
}

function handlePredictor(request: WireRequest, workdir: string, predictor: Predictor): void {
  const { nav, fac } = predictor({
    width: request.width,
    height: request.height,
    instruction: request.instruction,
    depthPath: path.resolve(workdir, request.depth),
    instancesPath: path.resolve(workdir, request.instances),
  });
  writeFileSync(path.join(workdir, OUT_NAV), encodeHeatmap(NAV_KIND, request.height, request.width, nav));
  writeFileSync(path.join(workdir, OUT_FAC), encodeHeatmap(FAC_KIND, request.height, request.width, fac));
}

export function serve(options: ServeOptions): Promise<void> {
  const workdir = options.workdir ?? process.cwd();
  const name = `${options.name ?? "reference-adapter"}/${options.heuristic}`;
  const predictor =
    options.predictor ?? (options.heuristic === "centroid" ? centroidPredictor : zerosPredictor);

  const respond = (response: WireResponse): void => {
    options.output.write(serializeResponse(response));
  };

  const handleLine = (line: string): void => {
    if (line.trim() === "") {
      return;
    }
    const parsed = parseRequest(line);
    if (!parsed.ok) {
      respond({ id: parsed.id, error: parsed.error });
      return;
    }
    const request = parsed.request;
    try {
      if (options.heuristic === "echo_gt") {
        handleEchoGt(request, workdir);
      } else {
        handlePredictor(request, workdir, predictor);
      }
    } catch (err) {
      respond({ id: request.id, error: err instanceof Error ? err.message : String(err) });
      return;
    }
    respond({ id: request.id, nav: OUT_NAV, fac: OUT_FAC });
  };

  options.output.write(serializeHandshake(name));
  const rl = readline.createInterface({ input: options.input, crlfDelay: Infinity });
  return new Promise((resolve) => {
    rl.on("line", handleLine);
    rl.on("close", resolve);
  });
}
