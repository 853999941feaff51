"""Command-line entry point for the toolkit.

Subcommands: model validate, retarget, smooth, ingest, resample,
kapandji, session replay. Exit codes: 0 success, 1 validation failure,
2 usage error, 3 runtime error. Numeric output uses 9 significant
digits by default; --full-precision switches to repr for bit-exact
downstream consumers. DEXTER_THREADS caps internal parallelism.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import pipeline, retarget, session, smoothing, sqp
from .geometry import Pose
from .kinematics import forward_kinematics, kapandji_targets
from .model import FINGERS, ModelError, load_model_file, load_reference_model
from .retarget import (HumanHandObservation, RetargetConfig, RetargetError,
                       observation_from_tips, read_observation_stream,
                       retarget_frame, retarget_stream)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("DEXTER_THREADS", "1")))
    except ValueError:
        return 1


def _fmt_factory(full: bool):
    if full:
        return lambda v: repr(float(v))
    return lambda v: f"{float(v):.9g}"


def _load_model(path: str):
    if path == "reference":
        return load_reference_model()
    return load_model_file(path)


def _read_config(path: str) -> dict:
    """Simple key=value overrides; blank lines and # comments ignored."""
    out = {}
    if not path:
        return out
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line needs key=value: {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _retarget_config(overrides: dict) -> RetargetConfig:
    cfg = RetargetConfig()
    fields = {"w_align": float, "w_thumb": float, "w_reg": float,
              "d_min": float, "scale": float, "joint_speed_clamp": float,
              "gap_threshold": float, "min_confidence": float,
              "collisions": lambda s: s.lower() in ("1", "true", "yes")}
    kw = {}
    for k, conv in fields.items():
        if k in overrides:
            kw[k] = conv(overrides[k])
    return replace(cfg, **kw)


# ------------------------------------------------------------ subcommands
def cmd_model_validate(args, out) -> int:
    try:
        model = _load_model(args.file)
        model.validate()
    except (ModelError, OSError, ValueError) as e:
        print(f"error: model: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    out.write(f"model {model.name} ok: {len(model.joints)} joints, "
              f"{len(model.active_joints)} active, "
              f"{len(model.couplings)} couplings\n")
    return EXIT_OK


def cmd_retarget(args, out) -> int:
    fmt = _fmt_factory(args.full_precision)
    model = _load_model(args.model)
    cfg = _retarget_config(_read_config(args.config))
    with open(args.stream) as fh:
        observations = list(read_observation_stream(fh))
    sols = retarget_stream(model, observations, cfg)
    for obs, sol in zip(observations, sols):
        flag = "hold" if sol.held else sol.status
        out.write(" ".join([fmt(obs.timestamp)]
                           + [fmt(v) for v in sol.q]
                           + [flag]) + "\n")
    return EXIT_OK


def cmd_smooth(args, out) -> int:
    fmt = _fmt_factory(args.full_precision)
    k, dt, values = _read_chunk(args.chunk)
    chunk = smoothing.ActionChunk(k, dt, values)
    state = _read_state(args.state) if args.state else \
        smoothing.SmootherState.rest(values[0])
    blended = smoothing.blend_boundary(state, chunk)
    traj, new_state = smoothing.fit_chunk(blended, state)
    traj = smoothing.enforce_limits(traj, state.vel_limit, state.acc_limit)
    for t, row in zip(traj.times, traj.values):
        out.write(" ".join([fmt(t)] + [fmt(v) for v in row]) + "\n")
    names = ("arm_left", "arm_right", "ee_left", "ee_right", "hand_left",
             "hand_right", "fingertips_left", "fingertips_right")
    out.write("# group max_vel max_acc max_jerk\n")
    for g in names:
        r = chunk.layout.group_range(g)
        out.write(f"# {g} {fmt(traj.max_vel[r.start:r.stop].max())} "
                  f"{fmt(traj.max_acc[r.start:r.stop].max())} "
                  f"{fmt(traj.max_jerk[r.start:r.stop].max())}\n")
    out.write(f"# dilation {fmt(traj.dilation)}\n")
    _write_state(args.state_out, new_state) if args.state_out else None
    return EXIT_OK


def _read_chunk(path: str):
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "chunk":
            raise ValueError("chunk file must start with: chunk <k> <dt>")
        k, dt = int(header[1]), float(header[2])
        rows = [np.array([float(x) for x in line.split()])
                for line in fh if line.strip() and not line.startswith("#")]
    return k, dt, np.array(rows)


def _read_state(path: str) -> smoothing.SmootherState:
    with open(path) as fh:
        rows = [np.array([float(x) for x in line.split()])
                for line in fh if line.strip() and not line.startswith("#")]
    if len(rows) != 4:
        raise ValueError("state file needs 4 rows: value, velocity, "
                         "vel_limit, acc_limit")
    return smoothing.SmootherState(*rows)


def _write_state(path: str, state: smoothing.SmootherState):
    with open(path, "w") as fh:
        for row in (state.value, state.velocity, state.vel_limit,
                    state.acc_limit):
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def _read_descriptor(path: str) -> pipeline.EmbodimentDescriptor:
    kv = _read_config(path)
    fm = tuple(tuple(p.split(":")) for p in kv["fingers"].split(",")) \
        if kv.get("fingers") else ()
    return pipeline.EmbodimentDescriptor(
        kv.get("name", "source"), int(kv.get("hand_dof", "16")), fm,
        tuple(kv["groups"].split(",")),
        tuple(kv.get("views", "").split(",")) if kv.get("views") else ())


def _read_trajectory(path: str) -> pipeline.SourceTrajectory:
    """Frame lines: t x y z qw qx qy qz finger:x,y,z ... [arm:a1,...,a7]"""
    frames = []
    source_id = os.path.splitext(os.path.basename(path))[0]
    category, instruction = "uncategorized", ""
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                kv = line[1:].strip()
                if kv.startswith("category="):
                    category = kv.split("=", 1)[1]
                elif kv.startswith("instruction="):
                    instruction = kv.split("=", 1)[1]
                continue
            parts = line.split()
            t = float(parts[0])
            wrist = Pose.from_flat([float(x) for x in parts[1:8]])
            tips, arm = {}, {}
            for tok in parts[8:]:
                key, vals = tok.split(":")
                nums = [float(x) for x in vals.split(",")]
                if key == "arm":
                    arm["right"] = np.array(nums)
                elif key in FINGERS:
                    tips[key] = np.array(nums)
                else:
                    raise ValueError(f"unknown frame token {key!r}")
            frames.append(pipeline.SourceFrame(t, {"right": wrist},
                                               {"right": tips},
                                               arm={"right": arm["right"]}
                                               if arm else {}))
    return pipeline.SourceTrajectory(tuple(frames), category, source_id,
                                     instruction)


def cmd_ingest(args, out) -> int:
    descriptor = _read_descriptor(args.descriptor)
    model = _load_model(args.model)
    thresholds = pipeline.FilterThresholds()
    corpus, reports = [], []
    paths = sorted(p for p in os.listdir(args.source)
                   if p.endswith(".traj"))
    if not paths:
        print("error: ingest: no .traj files in source directory",
              file=sys.stderr)
        return EXIT_VALIDATION
    for name in paths:
        traj = _read_trajectory(os.path.join(args.source, name))
        obs = [observation_from_tips(fr.timestamp, fr.wrist["right"],
                                     fr.tips["right"])
               for fr in traj.frames]
        report = pipeline.quality_filter(obs, thresholds)
        reports.append((traj.source_id, report))
        if report.verdict == "keep":
            records, _ = pipeline.convert_trajectory(traj, descriptor, model)
            corpus.extend(records)
    manifest = [pipeline.ManifestEntry(r.source_id, i, r.category)
                for i, r in enumerate(corpus)]
    os.makedirs(args.out, exist_ok=True)
    stats = pipeline.export(manifest, corpus,
                            os.path.join(args.out, "corpus.txt"))
    with open(os.path.join(args.out, "stats.txt"), "w") as fh:
        fh.write(f"records {stats['records']}\n")
        for c, n in stats["categories"].items():
            fh.write(f"category {c} {n}\n")
        for name, report in reports:
            fh.write(f"filter {name} {report.verdict}"
                     + "".join(f" [{r}]" for r in report.reasons) + "\n")
    out.write(f"ingested {stats['records']} records from "
              f"{len(paths)} trajectories\n")
    return EXIT_OK


def cmd_resample(args, out) -> int:
    with open(args.manifest) as fh:
        lines = [l for l in fh if not l.startswith("#")]
    corpus = [pipeline.parse_record(l) for l in lines]
    weights = {}
    for tok in args.weights.split(","):
        c, w = tok.split(":")
        weights[c] = float(w)
    manifest = pipeline.resample_balanced(corpus, weights, args.count,
                                          args.seed)
    for e in manifest:
        out.write(f"{e.source_id} {e.index} {e.category} "
                  f"{int(e.with_replacement)}\n")
    return EXIT_OK


def cmd_kapandji(args, out) -> int:
    fmt = _fmt_factory(args.full_precision)
    model = _load_model(args.model)
    targets = kapandji_targets(model)
    cfg = RetargetConfig(fingers=("thumb",), scale=1.0, d_min=0.0,
                         collisions=False)
    q_prev = model.kapandji_flexion.copy()
    tol = args.tolerance
    all_ok = True
    out.write("landmark error_mm verdict\n")
    for i, target in enumerate(targets):
        obs = observation_from_tips(float(i), Pose.identity(),
                                    {"thumb": target})
        sol = retarget_frame(model, obs, cfg, q_prev)
        fk = forward_kinematics(model, sol.q)
        err = float(np.linalg.norm(fk.fingertips_wrist["thumb"] - target))
        ok = err <= tol
        all_ok = all_ok and ok
        out.write(f"{i + 1} {fmt(err * 1e3)} "
                  f"{'reached' if ok else 'missed'}\n")
    out.write(f"score {10 if all_ok else 'incomplete'}\n")
    return EXIT_OK if all_ok else EXIT_VALIDATION


def cmd_session_replay(args, out) -> int:
    fmt = _fmt_factory(args.full_precision)
    cfg = session.SessionConfig()
    with open(args.log) as fh:
        events = [session.parse_event(l.strip()) for l in fh
                  if l.strip() and not l.startswith("#")]
    for ev, mode, cmd in session.replay(events, cfg):
        row = [fmt(ev.timestamp), ev.kind, mode]
        if cmd is not None:
            row.extend(fmt(v) for v in cmd)
        out.write(" ".join(row) + "\n")
    return EXIT_OK


# ------------------------------------------------------------ entry point
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dexhand",
        description="Dexterous hand retargeting and dataset toolkit")
    p.add_argument("--full-precision", action="store_true",
                   help="print repr floats instead of 9 significant digits")
    sub = p.add_subparsers(dest="command", required=True)

    pm = sub.add_parser("model", help="model file operations")
    msub = pm.add_subparsers(dest="model_command", required=True)
    mv = msub.add_parser("validate", help="check a model file")
    mv.add_argument("file", help="model path or 'reference'")

    pr = sub.add_parser("retarget", help="retarget an observation stream")
    pr.add_argument("--model", required=True)
    pr.add_argument("--stream", required=True,
                    help="92-numbers-per-line observation file")
    pr.add_argument("--config", default="", help="key=value overrides")

    ps = sub.add_parser("smooth", help="smooth an action chunk")
    ps.add_argument("--chunk", required=True)
    ps.add_argument("--state", default="",
                    help="boundary state file (4 rows of 88)")
    ps.add_argument("--state-out", default="",
                    help="write the updated boundary state here")

    pi = sub.add_parser("ingest", help="convert a source directory")
    pi.add_argument("--source", required=True)
    pi.add_argument("--descriptor", required=True)
    pi.add_argument("--model", default="reference")
    pi.add_argument("--out", required=True)

    pb = sub.add_parser("resample", help="balanced manifest draw")
    pb.add_argument("--manifest", required=True, help="corpus file")
    pb.add_argument("--weights", required=True,
                    help="category:weight,category:weight")
    pb.add_argument("--count", type=int, required=True)
    pb.add_argument("--seed", type=int, default=0)

    pk = sub.add_parser("kapandji", help="thumb opposition table")
    pk.add_argument("--model", default="reference")
    pk.add_argument("--tolerance", type=float, default=0.005,
                    help="reach tolerance in meters")

    pe = sub.add_parser("session", help="teleop session tools")
    esub = pe.add_subparsers(dest="session_command", required=True)
    er = esub.add_parser("replay", help="replay an event log")
    er.add_argument("log")
    return p


def run(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    os.environ.setdefault("OMP_NUM_THREADS", str(_threads()))
    try:
        if args.command == "model":
            return cmd_model_validate(args, out)
        if args.command == "retarget":
            return cmd_retarget(args, out)
        if args.command == "smooth":
            return cmd_smooth(args, out)
        if args.command == "ingest":
            return cmd_ingest(args, out)
        if args.command == "resample":
            return cmd_resample(args, out)
        if args.command == "kapandji":
            return cmd_kapandji(args, out)
        if args.command == "session":
            return cmd_session_replay(args, out)
    except (ModelError, RetargetError, pipeline.PipelineError,
            session.SessionError, smoothing.SmoothingError) as e:
        print(f"error: {args.command}: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_USAGE


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
