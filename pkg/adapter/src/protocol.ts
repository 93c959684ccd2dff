/**
 * Line-delimited JSON protocol spoken over stdin/stdout (version heatnav/1).
 *
 * The harness spawns the adapter, reads one handshake line, then sends one
 * request per line and waits for the matching response line before sending
 * the next.  Large arrays travel as file paths; relative paths resolve
 * against the adapter's working directory.
 */

export const PROTO = "heatnav/1";

export type RequestId = number | string;

export interface WireRequest {
  id: RequestId;
  width: number;
  height: number;
  instruction: string;
  depth: string;
  instances: string;
  meta: string;
}

export interface Handshake {
  proto: string;
  name: string;
}

export interface WireOk {
  id: RequestId;
  nav: string;
  fac: string;
}

export interface WireError {
  id: RequestId | null;
  error: string;
}

export type WireResponse = WireOk | WireError;

export type ParseResult =
  | { ok: true; request: WireRequest }
  | { ok: false; id: RequestId | null; error: string };

function idOf(value: unknown): RequestId | null {
  if (typeof value === "number" || typeof value === "string") {
    return value;
  }
  return null;
}

export function parseRequest(line: string): ParseResult {
  let data: unknown;
  try {
    data = JSON.parse(line);
  } catch {
    return { ok: false, id: null, error: "request line is not valid JSON" };
  }
  if (typeof data !== "object" || data === null || Array.isArray(data)) {
    return { ok: false, id: null, error: "request must be a JSON object" };
  }
  const obj = data as Record<string, unknown>;
  const id = idOf(obj.id);
  if (id === null) {
    return { ok: false, id: null, error: "request lacks a numeric or string id" };
  }
  const { width, height } = obj;
  if (!Number.isInteger(width) || (width as number) <= 0 || !Number.isInteger(height) || (height as number) <= 0) {
    return { ok: false, id, error: "width and height must be positive integers" };
  }
  for (const field of ["instruction", "depth", "instances", "meta"] as const) {
    if (typeof obj[field] !== "string") {
      return { ok: false, id, error: `request field '${field}' must be a string` };
    }
  }
  return {
    ok: true,
    request: {
      id,
      width: width as number,
      height: height as number,
      instruction: obj.instruction as string,
      depth: obj.depth as string,
      instances: obj.instances as string,
      meta: obj.meta as string,
    },
  };
}

export function serializeHandshake(name: string): string {
  const handshake: Handshake = { proto: PROTO, name };
  return JSON.stringify(handshake) + "\n";
}

export function serializeResponse(response: WireResponse): string {
  return JSON.stringify(response) + "\n";
}
