#!/usr/bin/env node
import { HEURISTICS, isHeuristic, serve } from "./serve";

function main(): void {
  const heuristic = process.argv[2];
  if (heuristic === undefined || !isHeuristic(heuristic)) {
    process.stderr.write(`usage: main.js {${HEURISTICS.join(" | ")}}\n`);
    process.exit(2);
  }
  serve({ heuristic, input: process.stdin, output: process.stdout })
    .then(() => process.exit(0))
    .catch((err) => {
      process.stderr.write(`fatal: ${err instanceof Error ? err.message : String(err)}\n`);
      process.exit(1);
    });
}

main();
