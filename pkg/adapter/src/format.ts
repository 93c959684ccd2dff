/**
 * Binary image formats shared with the benchmark harness.
 *
 * All three formats are little-endian with a 4-byte ASCII magic:
 *   HMF1: magic, u8 kind (0 = nav, 1 = fac), u32 height, u32 width,
 *         float32 row-major values in [0, 1].
 *   DPT1: magic, u32 height, u32 width, float32 row-major depth in metres.
 *   SEG1: magic, u32 height, u32 width, int32 row-major instance ids
 *         (-1 wall, 0 floor, positive ids are scene objects).
 */

export const NAV_KIND = 0;
export const FAC_KIND = 1;

export const WALL_ID = -1;
export const FLOOR_ID = 0;

const HEATMAP_MAGIC = "HMF1";
const DEPTH_MAGIC = "DPT1";
const SEG_MAGIC = "SEG1";

export class FormatError extends Error {}

export interface HeatmapImage {
  kind: number;
  height: number;
  width: number;
  values: Float32Array;
}

export interface FloatImage {
  height: number;
  width: number;
  values: Float32Array;
}

export interface IntImage {
  height: number;
  width: number;
  values: Int32Array;
}

function checkDims(height: number, width: number): void {
  if (!Number.isInteger(height) || !Number.isInteger(width) || height <= 0 || width <= 0) {
    throw new FormatError(`image dimensions must be positive integers, got ${height}x${width}`);
  }
}

export function encodeHeatmap(
  kind: number,
  height: number,
  width: number,
  values: Float32Array,
): Buffer {
  if (kind !== NAV_KIND && kind !== FAC_KIND) {
    throw new FormatError(`kind must be ${NAV_KIND} (nav) or ${FAC_KIND} (fac), got ${kind}`);
  }
  checkDims(height, width);
  if (values.length !== height * width) {
    throw new FormatError(`expected ${height * width} values, got ${values.length}`);
  }
  const buf = Buffer.alloc(13 + 4 * values.length);
  buf.write(HEATMAP_MAGIC, 0, "ascii");
  buf.writeUInt8(kind, 4);
  buf.writeUInt32LE(height, 5);
  buf.writeUInt32LE(width, 9);
  const view = new DataView(buf.buffer, buf.byteOffset + 13);
  for (let i = 0; i < values.length; i++) {
    const v = values[i];
    if (!(v >= 0 && v <= 1)) {
      throw new FormatError(`heatmap values must lie in [0, 1], got ${v} at index ${i}`);
    }
    view.setFloat32(4 * i, v, true);
  }
  return buf;
}

function checkHeader(buf: Buffer, magic: string, headerSize: number): { height: number; width: number } {
  if (buf.length < headerSize || buf.toString("ascii", 0, 4) !== magic) {
    throw new FormatError(`bad magic, expected ${magic}`);
  }
  const height = buf.readUInt32LE(headerSize - 8);
  const width = buf.readUInt32LE(headerSize - 4);
  if (height === 0 || width === 0) {
    throw new FormatError("image dimensions must be positive");
  }
  if (buf.length !== headerSize + 4 * height * width) {
    throw new FormatError(`payload length ${buf.length} != expected ${headerSize + 4 * height * width}`);
  }
  return { height, width };
}

export function decodeHeatmap(buf: Buffer): HeatmapImage {
  const { height, width } = checkHeader(buf, HEATMAP_MAGIC, 13);
  const kind = buf.readUInt8(4);
  if (kind !== NAV_KIND && kind !== FAC_KIND) {
    throw new FormatError(`unknown heatmap kind code ${kind}`);
  }
  const view = new DataView(buf.buffer, buf.byteOffset + 13);
  const values = new Float32Array(height * width);
  for (let i = 0; i < values.length; i++) {
    const v = view.getFloat32(4 * i, true);
    if (!(v >= 0 && v <= 1)) {
      throw new FormatError(`heatmap values must lie in [0, 1], got ${v} at index ${i}`);
    }
    values[i] = v;
  }
  return { kind, height, width, values };
}

export function decodeDepth(buf: Buffer): FloatImage {
  const { height, width } = checkHeader(buf, DEPTH_MAGIC, 12);
  const view = new DataView(buf.buffer, buf.byteOffset + 12);
  const values = new Float32Array(height * width);
  for (let i = 0; i < values.length; i++) {
    values[i] = view.getFloat32(4 * i, true);
  }
  return { height, width, values };
}

export function decodeInstances(buf: Buffer): IntImage {
  const { height, width } = checkHeader(buf, SEG_MAGIC, 12);
  const view = new DataView(buf.buffer, buf.byteOffset + 12);
  const values = new Int32Array(height * width);
  for (let i = 0; i < values.length; i++) {
    values[i] = view.getInt32(4 * i, true);
  }
  return { height, width, values };
}
