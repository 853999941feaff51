import { spawnSync } from "node:child_process";
import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, describe, expect, it } from "vitest";
import {
  ACTION_DIM,
  BridgeError,
  bridgeRetarget,
  bridgeSmooth,
  closeBridge,
  HAND_DOF,
  N_KEYPOINTS,
  openBridge,
  type RetargetFrame,
} from "../src/index.js";

// Deterministic PRNG so the random inputs are reproducible across runs.
function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

const IDENTITY_WRIST = [0, 0, 0, 1, 0, 0, 0];

function randomFrame(rng: () => number, t: number): RetargetFrame {
  const keypoints = new Array(3 * N_KEYPOINTS);
  for (let i = 0; i < keypoints.length; i++) {
    keypoints[i] = -0.06 + 0.18 * rng();
  }
  const confidences = new Array(N_KEYPOINTS);
  for (let i = 0; i < N_KEYPOINTS; i++) confidences[i] = 0.6 + 0.4 * rng();
  return { timestamp: t, wrist: IDENTITY_WRIST, keypoints, confidences };
}

function darkFrame(t: number): RetargetFrame {
  return {
    timestamp: t,
    wrist: IDENTITY_WRIST,
    keypoints: new Array(3 * N_KEYPOINTS).fill(NaN),
    confidences: new Array(N_KEYPOINTS).fill(0),
  };
}

// Independent invocation of the CLI, bypassing the bridge, so the tests
// below can check that the bridge's marshalling adds or loses nothing.
const scratch = mkdtempSync(join(tmpdir(), "bridge-native-"));
afterAll(() => rmSync(scratch, { recursive: true, force: true }));

function nativeCli(args: string[]): string {
  const res = spawnSync("dexhand", ["--full-precision", ...args], {
    encoding: "utf8",
    maxBuffer: 256 * 1024 * 1024,
  });
  expect(res.status).toBe(0);
  return res.stdout;
}

function nativeRetarget(frames: RetargetFrame[], tag: string) {
  const lines = frames.map((f) =>
    [f.timestamp, ...Array.from(f.wrist), ...Array.from(f.keypoints),
     ...Array.from(f.confidences)]
      .map((v) => (Number.isNaN(v) ? "nan" : String(v)))
      .join(" "),
  );
  const path = join(scratch, `${tag}.txt`);
  writeFileSync(path, lines.join("\n") + "\n");
  const out = nativeCli(["retarget", "--model", "reference", "--stream", path]);
  return out
    .split("\n")
    .filter((l) => l.trim())
    .map((l) => l.trim().split(/\s+/));
}

function nativeSmooth(values: number[], k: number, dt: number, tag: string) {
  const lines = [`chunk ${k} ${dt}`];
  for (let r = 0; r < k; r++) {
    lines.push(values.slice(r * ACTION_DIM, (r + 1) * ACTION_DIM).join(" "));
  }
  const path = join(scratch, `${tag}.txt`);
  writeFileSync(path, lines.join("\n") + "\n");
  return nativeCli(["smooth", "--chunk", path]);
}

describe("bridge vs native CLI", () => {
  it("retargets 60 random frames bit-exactly", { timeout: 300000 }, () => {
    const rng = mulberry32(7);
    const frames: RetargetFrame[] = [];
    for (let i = 0; i < 60; i++) frames.push(randomFrame(rng, 0.02 * i));
    const handle = openBridge();
    try {
      const bridged = bridgeRetarget(handle, frames);
      const native = nativeRetarget(frames, "retarget60");
      expect(bridged.length).toBe(60);
      expect(native.length).toBe(60);
      for (let i = 0; i < 60; i++) {
        const tok = native[i];
        expect(tok.length).toBe(2 + HAND_DOF);
        expect(Object.is(bridged[i].timestamp, Number(tok[0]))).toBe(true);
        for (let j = 0; j < HAND_DOF; j++) {
          expect(Object.is(bridged[i].joints[j], Number(tok[1 + j]))).toBe(true);
        }
        expect(bridged[i].status).toBe(tok[tok.length - 1]);
      }
    } finally {
      closeBridge(handle);
    }
  });

  it("smooths 40 random chunks bit-exactly", { timeout: 300000 }, () => {
    const rng = mulberry32(11);
    const handle = openBridge();
    try {
      for (let c = 0; c < 40; c++) {
        const k = 2 + Math.floor(5 * rng());
        const dt = 0.01 + 0.04 * rng();
        const values: number[] = [];
        for (let i = 0; i < k * ACTION_DIM; i++) values.push(2 * rng() - 1);
        const res = bridgeSmooth(handle, values, k, dt);
        const out = nativeSmooth(values, k, dt, `smooth${c}`);
        const rows = out.split("\n").filter((l) => l.trim() && !l.startsWith("#"));
        expect(rows.length).toBe(k);
        for (let r = 0; r < k; r++) {
          const tok = rows[r].trim().split(/\s+/);
          expect(Object.is(res.times[r], Number(tok[0]))).toBe(true);
          for (let j = 0; j < ACTION_DIM; j++) {
            expect(Object.is(res.values[r * ACTION_DIM + j], Number(tok[1 + j]))).toBe(true);
          }
        }
        const dil = out.split("\n").find((l) => l.startsWith("# dilation"));
        expect(dil).toBeDefined();
        expect(Object.is(res.dilation, Number(dil!.split(/\s+/)[2]))).toBe(true);
        expect(Object.keys(res.groups).length).toBe(8);
      }
    } finally {
      closeBridge(handle);
    }
  });
});

describe("hold passthrough", () => {
  it("repeats the previous command on zero-confidence frames", { timeout: 120000 }, () => {
    const rng = mulberry32(3);
    const frames = [randomFrame(rng, 0.0), darkFrame(0.02), darkFrame(0.04)];
    const handle = openBridge();
    try {
      const res = bridgeRetarget(handle, frames);
      expect(res[1].status).toBe("hold");
      expect(res[2].status).toBe("hold");
      for (let j = 0; j < HAND_DOF; j++) {
        expect(Object.is(res[1].joints[j], res[0].joints[j])).toBe(true);
        expect(Object.is(res[2].joints[j], res[0].joints[j])).toBe(true);
      }
    } finally {
      closeBridge(handle);
    }
  });
});

describe("handle lifecycle and validation", () => {
  it("rejects a chunk with the wrong row width before spawning", () => {
    const handle = openBridge();
    try {
      const bad = new Float64Array(3 * 87);
      expect(() => bridgeSmooth(handle, bad, 3, 0.02)).toThrow(BridgeError);
      expect(() => bridgeSmooth(handle, bad, 3, 0.02)).toThrow(/264/);
    } finally {
      closeBridge(handle);
    }
  });

  it("rejects malformed frames", () => {
    const handle = openBridge();
    try {
      const f = darkFrame(0);
      expect(() =>
        bridgeRetarget(handle, [{ ...f, wrist: [0, 0, 0] }]),
      ).toThrow(/wrist/);
      expect(() =>
        bridgeRetarget(handle, [
          { ...f, confidences: new Array(N_KEYPOINTS).fill(2) },
        ]),
      ).toThrow(/confidence/);
    } finally {
      closeBridge(handle);
    }
  });

  it("survives use after close and double close", () => {
    const handle = openBridge();
    closeBridge(handle);
    closeBridge(handle);
    expect(() => bridgeSmooth(handle, new Float64Array(ACTION_DIM), 1, 0.02)).toThrow(
      /closed/,
    );
    expect(() => bridgeRetarget(handle, [darkFrame(0)])).toThrow(/closed/);
  });

  it("reports a useful error when the CLI is missing", () => {
    const handle = openBridge({ cli: "/nonexistent/dexhand" });
    try {
      expect(() =>
        bridgeSmooth(handle, new Float64Array(ACTION_DIM), 1, 0.02),
      ).toThrow(/launch/);
    } finally {
      closeBridge(handle);
    }
  });
});
