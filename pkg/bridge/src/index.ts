/**
 * Bridge to the `dexhand` command-line tool.
 *
 * Every call shells out to the CLI with `--full-precision` so that the
 * numbers crossing the process boundary are shortest round-trip decimal
 * representations of the underlying doubles: parsing them back with
 * `Number()` reproduces the exact bit patterns the solver produced.
 */
import { spawnSync } from "node:child_process";
import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

export const N_KEYPOINTS = 21;
export const WRIST_DIM = 7;
export const HAND_DOF = 16;
export const ACTION_DIM = 88;

export interface BridgeOptions {
  /** Executable to invoke; defaults to `dexhand` on PATH. */
  cli?: string;
  /** Model argument for retargeting; defaults to the built-in reference. */
  model?: string;
  /** `key=value,key=value` retargeting config overrides. */
  config?: string;
}

export interface BridgeHandle {
  readonly cli: string;
  readonly model: string;
  readonly config: string;
  readonly workdir: string;
  closed: boolean;
  calls: number;
}

export interface RetargetFrame {
  timestamp: number;
  /** Wrist pose as x y z qw qx qy qz. */
  wrist: ArrayLike<number>;
  /** 21 keypoints, row-major x y z. NaN marks an unobserved keypoint. */
  keypoints: ArrayLike<number>;
  /** Per-keypoint confidences in [0, 1]. */
  confidences: ArrayLike<number>;
}

export interface RetargetResult {
  timestamp: number;
  joints: Float64Array;
  status: string;
}

export interface SmoothGroupStats {
  maxVel: number;
  maxAcc: number;
  maxJerk: number;
}

export interface SmoothResult {
  times: Float64Array;
  /** k rows of 88 values, flattened row-major. */
  values: Float64Array;
  groups: Record<string, SmoothGroupStats>;
  dilation: number;
}

export class BridgeError extends Error {}

export function openBridge(opts: BridgeOptions = {}): BridgeHandle {
  return {
    cli: opts.cli ?? "dexhand",
    model: opts.model ?? "reference",
    config: opts.config ?? "",
    workdir: mkdtempSync(join(tmpdir(), "dexhand-bridge-")),
    closed: false,
    calls: 0,
  };
}

/** Releases the handle's scratch directory. Closing twice is a no-op. */
export function closeBridge(handle: BridgeHandle): void {
  if (handle.closed) return;
  handle.closed = true;
  rmSync(handle.workdir, { recursive: true, force: true });
}

function requireOpen(handle: BridgeHandle): void {
  if (handle.closed) throw new BridgeError("bridge handle is closed");
}

function fmt(v: number): string {
  if (Number.isNaN(v)) return "nan";
  if (v === Infinity) return "inf";
  if (v === -Infinity) return "-inf";
  return Object.is(v, -0) ? "-0.0" : String(v);
}

function runCli(handle: BridgeHandle, args: string[]): string {
  const res = spawnSync(handle.cli, ["--full-precision", ...args], {
    encoding: "utf8",
    maxBuffer: 256 * 1024 * 1024,
  });
  if (res.error) {
    throw new BridgeError(`failed to launch ${handle.cli}: ${res.error.message}`);
  }
  if (res.status !== 0) {
    throw new BridgeError(
      `${handle.cli} ${args[0]} exited with ${res.status}: ${res.stderr.trim()}`,
    );
  }
  return res.stdout;
}

function checkLength(name: string, got: number, want: number): void {
  if (got !== want) {
    throw new BridgeError(`${name} must have ${want} values, got ${got}`);
  }
}

function observationLine(frame: RetargetFrame): string {
  checkLength("wrist", frame.wrist.length, WRIST_DIM);
  checkLength("keypoints", frame.keypoints.length, 3 * N_KEYPOINTS);
  checkLength("confidences", frame.confidences.length, N_KEYPOINTS);
  if (!Number.isFinite(frame.timestamp)) {
    throw new BridgeError("frame timestamp must be finite");
  }
  const vals: number[] = [frame.timestamp];
  for (let i = 0; i < WRIST_DIM; i++) vals.push(Number(frame.wrist[i]));
  for (let i = 0; i < 3 * N_KEYPOINTS; i++) vals.push(Number(frame.keypoints[i]));
  for (let i = 0; i < N_KEYPOINTS; i++) {
    const c = Number(frame.confidences[i]);
    if (!Number.isFinite(c) || c < 0 || c > 1) {
      throw new BridgeError(`confidence ${i} must be in [0, 1], got ${c}`);
    }
    vals.push(c);
  }
  return vals.map(fmt).join(" ");
}

/**
 * Retargets a sequence of observation frames to 16 hand joint commands
 * each. Frames in one call form one stream: warm starts, hold logic and
 * gap handling apply across them exactly as in the CLI.
 */
export function bridgeRetarget(
  handle: BridgeHandle,
  frames: RetargetFrame[],
): RetargetResult[] {
  requireOpen(handle);
  if (frames.length === 0) return [];
  const streamPath = join(handle.workdir, `stream-${handle.calls++}.txt`);
  writeFileSync(streamPath, frames.map(observationLine).join("\n") + "\n");
  const args = ["retarget", "--model", handle.model, "--stream", streamPath];
  if (handle.config) args.push("--config", handle.config);
  const out = runCli(handle, args);
  const results: RetargetResult[] = [];
  for (const line of out.split("\n")) {
    if (!line.trim()) continue;
    const tok = line.trim().split(/\s+/);
    if (tok.length !== 2 + HAND_DOF) {
      throw new BridgeError(`unexpected retarget line: ${line}`);
    }
    const joints = new Float64Array(HAND_DOF);
    for (let i = 0; i < HAND_DOF; i++) joints[i] = Number(tok[1 + i]);
    results.push({
      timestamp: Number(tok[0]),
      joints,
      status: tok[tok.length - 1],
    });
  }
  if (results.length !== frames.length) {
    throw new BridgeError(
      `expected ${frames.length} result lines, got ${results.length}`,
    );
  }
  return results;
}

/**
 * Smooths one k x 88 action chunk sampled at interval dt. `values` is the
 * chunk flattened row-major and must hold exactly k * 88 numbers.
 */
export function bridgeSmooth(
  handle: BridgeHandle,
  values: ArrayLike<number>,
  k: number,
  dt: number,
): SmoothResult {
  requireOpen(handle);
  if (!Number.isInteger(k) || k < 1) {
    throw new BridgeError(`k must be a positive integer, got ${k}`);
  }
  if (!Number.isFinite(dt) || dt <= 0) {
    throw new BridgeError(`dt must be positive, got ${dt}`);
  }
  checkLength("values", values.length, k * ACTION_DIM);
  const lines = [`chunk ${k} ${fmt(dt)}`];
  for (let r = 0; r < k; r++) {
    const row: string[] = [];
    for (let c = 0; c < ACTION_DIM; c++) row.push(fmt(Number(values[r * ACTION_DIM + c])));
    lines.push(row.join(" "));
  }
  const chunkPath = join(handle.workdir, `chunk-${handle.calls++}.txt`);
  writeFileSync(chunkPath, lines.join("\n") + "\n");
  const out = runCli(handle, ["smooth", "--chunk", chunkPath]);
  const times: number[] = [];
  const flat: number[] = [];
  const groups: Record<string, SmoothGroupStats> = {};
  let dilation = NaN;
  for (const line of out.split("\n")) {
    const trimmed = line.trim();
    if (!trimmed) continue;
    if (trimmed.startsWith("#")) {
      const tok = trimmed.slice(1).trim().split(/\s+/);
      if (tok[0] === "dilation") {
        dilation = Number(tok[1]);
      } else if (tok.length === 4 && tok[1] !== "max_vel") {
        groups[tok[0]] = {
          maxVel: Number(tok[1]),
          maxAcc: Number(tok[2]),
          maxJerk: Number(tok[3]),
        };
      }
      continue;
    }
    const tok = trimmed.split(/\s+/);
    if (tok.length !== 1 + ACTION_DIM) {
      throw new BridgeError(`unexpected smooth line: ${trimmed.slice(0, 60)}`);
    }
    times.push(Number(tok[0]));
    for (let c = 0; c < ACTION_DIM; c++) flat.push(Number(tok[1 + c]));
  }
  if (times.length !== k || !Number.isFinite(dilation)) {
    throw new BridgeError(`malformed smooth output: ${times.length} rows`);
  }
  return {
    times: Float64Array.from(times),
    values: Float64Array.from(flat),
    groups,
    dilation,
  };
}
