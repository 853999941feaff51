"""Cross-embodiment dataset ingestion: quality filtering, view
standardization, fingertip-centric conversion onto the target hand,
dimension masking, balanced resampling, and deterministic export.

Records carry an 88-dim state/action vector in the smoothing layout with
a per-dimension validity mask. Masked-out dimensions are exported as the
0.0 sentinel and never counted as supervision.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import Pose, quat_to_rotvec
from .kinematics import forward_kinematics
from .model import FINGERS, HandModel
from .retarget import (HumanHandObservation, RetargetConfig, RetargetError,
                       TIP_INDEX, retarget_source_robot)
from .smoothing import DEFAULT_LAYOUT, N_CHANNELS, ActionLayout

SCHEMA_VERSION = "dexcorpus 1"
SIDES = ("left", "right")
CANONICAL = set(FINGERS)


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class EmbodimentDescriptor:
    """What a source platform can supply, per side."""
    name: str
    hand_dof: int
    finger_map: tuple          # (source_finger, canonical_finger) pairs
    groups: tuple              # available layout group names
    views: tuple = ()          # camera view roles

    def __post_init__(self):
        targets = [c for _, c in self.finger_map]
        if len(set(targets)) != len(targets):
            raise PipelineError("finger mapping must be injective")
        for c in targets:
            if c not in CANONICAL:
                raise PipelineError(f"unknown canonical finger {c!r}")
        if not self.groups:
            raise PipelineError("descriptor needs at least one action group")
        known = {g for g, _, _ in DEFAULT_LAYOUT.groups}
        for g in self.groups:
            if g not in known:
                raise PipelineError(f"unknown action group {g!r}")

    def canonical_fingers(self) -> tuple:
        return tuple(sorted({c for _, c in self.finger_map},
                            key=FINGERS.index))


@dataclass(frozen=True)
class CropSpec:
    source_resolution: tuple   # (width, height)
    crop: tuple                # (x, y, width, height)
    output_resolution: tuple
    role: str = "third-person-1"

    def __post_init__(self):
        sw, sh = self.source_resolution
        x, y, w, h = self.crop
        ow, oh = self.output_resolution
        if w <= 0 or h <= 0 or ow <= 0 or oh <= 0:
            raise PipelineError("degenerate crop or output size")
        if x < 0 or y < 0 or x + w > sw or y + h > sh:
            raise PipelineError("crop rectangle exceeds source bounds")
        if abs(w * oh - h * ow) > 1e-9 * w * h:
            raise PipelineError("output aspect must match crop aspect")

    def compose(self, inner: "CropSpec") -> "CropSpec":
        """Collapse self followed by `inner` (expressed in this spec's
        output pixels) into a single crop of the original source."""
        if inner.source_resolution != self.output_resolution:
            raise PipelineError("inner crop does not match output resolution")
        sx = self.crop[2] / self.output_resolution[0]
        sy = self.crop[3] / self.output_resolution[1]
        x = self.crop[0] + inner.crop[0] * sx
        y = self.crop[1] + inner.crop[1] * sy
        w = inner.crop[2] * sx
        h = inner.crop[3] * sy
        return CropSpec(self.source_resolution, (x, y, w, h),
                        inner.output_resolution, inner.role)


@dataclass(frozen=True)
class DatasetRecord:
    timestamp: float
    instruction: str
    state: np.ndarray
    action: np.ndarray
    mask: np.ndarray
    category: str
    source_id: str
    views: tuple = ()          # (image_path, CropSpec) pairs
    layout: ActionLayout = DEFAULT_LAYOUT

    def __post_init__(self):
        for name in ("state", "action"):
            v = np.asarray(getattr(self, name), float)
            object.__setattr__(self, name, v)
            if v.shape != (N_CHANNELS,):
                raise PipelineError(f"{name} must have {N_CHANNELS} entries")
        m = np.asarray(self.mask, bool)
        object.__setattr__(self, "mask", m)
        if m.shape != (N_CHANNELS,):
            raise PipelineError("mask must have 88 entries")
        if not np.all(np.isfinite(self.action[m])):
            raise PipelineError("supervised action dims must be finite")
        if not np.all(np.isfinite(self.state[m])):
            raise PipelineError("valid state dims must be finite")


@dataclass(frozen=True)
class QualityReport:
    visible_fraction: float
    max_fingertip_speed: float
    max_wrist_speed: float
    jitter_rms: float
    verdict: str               # "keep" or "drop"
    reasons: tuple = ()


@dataclass(frozen=True)
class FilterThresholds:
    visibility: float = 0.5          # per-keypoint confidence floor
    visible_fraction: float = 0.9    # fraction of frames with all tips seen
    fingertip_speed: float = 3.0     # m/s
    wrist_speed: float = 2.0         # m/s
    jitter: float = 0.005            # m RMS of keypoint second differences


def quality_filter(traj, thresholds: FilterThresholds = FilterThresholds()
                   ) -> QualityReport:
    """Visibility and velocity screening of a raw observation stream."""
    frames = list(traj)
    if not frames:
        raise PipelineError("empty trajectory")
    tips = [TIP_INDEX[f] for f in FINGERS]
    conf = np.array([o.confidence for o in frames])
    visible = np.all(conf[:, tips] >= thresholds.visibility, axis=1)
    frac = float(np.mean(visible))

    times = np.array([o.timestamp for o in frames])
    kp = np.array([o.keypoints for o in frames])
    wrist = np.array([o.wrist.translation for o in frames])
    max_tip, max_wrist, jitter = 0.0, 0.0, 0.0
    if len(frames) > 1:
        dt = np.diff(times)
        if np.any(dt <= 0):
            raise PipelineError("timestamps must be strictly increasing")
        tip_step = np.linalg.norm(np.diff(kp[:, tips], axis=0), axis=2)
        max_tip = float(np.max(tip_step / dt[:, None]))
        max_wrist = float(np.max(np.linalg.norm(np.diff(wrist, axis=0),
                                                axis=1) / dt))
    if len(frames) > 2:
        jitter = float(np.sqrt(np.mean(
            np.sum(np.diff(kp, 2, axis=0) ** 2, axis=2))))

    reasons = []
    if frac < thresholds.visible_fraction:
        reasons.append(f"visibility: all-finger frames {frac:.3f} < "
                       f"{thresholds.visible_fraction}")
    if max_tip > thresholds.fingertip_speed:
        reasons.append(f"velocity: fingertip {max_tip:.3f} m/s > "
                       f"{thresholds.fingertip_speed}")
    if max_wrist > thresholds.wrist_speed:
        reasons.append(f"velocity: wrist {max_wrist:.3f} m/s > "
                       f"{thresholds.wrist_speed}")
    if jitter > thresholds.jitter:
        reasons.append(f"jitter: {jitter * 1e3:.2f} mm RMS > "
                       f"{thresholds.jitter * 1e3:.1f} mm")
    verdict = "drop" if reasons else "keep"
    return QualityReport(frac, max_tip, max_wrist, jitter, verdict,
                         tuple(reasons))


def standardize_views(record: DatasetRecord, target: dict) -> DatasetRecord:
    """Compose each view's CropSpec with the per-role standardization crop
    (configured once per source). Pixels are untouched; this is metadata."""
    views = []
    for path, spec in record.views:
        extra = target.get(spec.role)
        views.append((path, spec.compose(extra) if extra else spec))
    return replace(record, views=tuple(views))


# -------------------------------------------------------- conversion
@dataclass(frozen=True)
class SourceFrame:
    timestamp: float
    wrist: dict                # side -> Pose
    tips: dict                 # side -> {canonical finger: xyz in wrist frame}
    arm: dict = field(default_factory=dict)    # side -> 7 joint values
    images: tuple = ()         # (role, path) pairs


@dataclass(frozen=True)
class SourceTrajectory:
    frames: tuple
    category: str
    source_id: str
    instruction: str = ""
    views: tuple = ()          # (role, path_prefix, CropSpec)


@dataclass(frozen=True)
class ConversionConfig:
    retarget: RetargetConfig = RetargetConfig(scale=1.0)
    max_failure_fraction: float = 0.2
    settings: Optional[object] = None  # SqpSettings override


def _group_slice(layout: ActionLayout, name: str) -> slice:
    r = layout.group_range(name)
    return slice(r.start, r.stop)


def convert_trajectory(traj: SourceTrajectory,
                       descriptor: EmbodimentDescriptor,
                       model: HandModel,
                       cfg: ConversionConfig = ConversionConfig()):
    """Fingertip-centric conversion of one source trajectory onto the
    target hand. Hand-joint channels come from the retargeter, fingertip
    channels from target-model FK of those joints, EE pose from the wrist
    track, arm joints copied when the source has them. Everything the
    source cannot supply is masked out."""
    layout = DEFAULT_LAYOUT
    frames = list(traj.frames)
    if not frames:
        raise PipelineError("empty trajectory")
    mapped = descriptor.canonical_fingers()
    actions = [np.zeros(N_CHANNELS) for _ in frames]
    mask = np.zeros(N_CHANNELS, bool)
    worst_resid = 0.0

    for side in SIDES:
        hand_g = f"hand_{side}"
        tip_g = f"fingertips_{side}"
        ee_g = f"ee_{side}"
        arm_g = f"arm_{side}"
        has_side = any(side in fr.tips for fr in frames)
        if hand_g in descriptor.groups and has_side:
            pairs = [(fr.wrist[side],
                      {f: p for f, p in fr.tips[side].items() if f in mapped})
                     for fr in frames]
            qs, sols = retarget_source_robot(model, pairs, cfg.retarget,
                                             cfg.settings)
            held = sum(1 for s in sols if s.held)
            if held > cfg.max_failure_fraction * len(sols):
                raise PipelineError(
                    f"retarget failure rate {held}/{len(sols)} exceeds "
                    f"{cfg.max_failure_fraction}")
            worst_resid = max(worst_resid,
                              max((s.residual for s in sols if not s.held),
                                  default=0.0))
            joint_mask = _hand_joint_mask(model, mapped)
            hs = _group_slice(layout, hand_g)
            mask[hs] = joint_mask
            finger_mask = np.zeros(15, bool)
            for f in mapped:
                fi = FINGERS.index(f)
                finger_mask[3 * fi:3 * fi + 3] = True
            ts = _group_slice(layout, tip_g)
            mask[ts] = finger_mask if tip_g in descriptor.groups else False
            for a, q in zip(actions, qs):
                a[hs] = q
                if tip_g in descriptor.groups:
                    fk = forward_kinematics(model, q)
                    a[ts] = np.concatenate(
                        [fk.fingertips_wrist[f] for f in FINGERS])
        if ee_g in descriptor.groups and has_side:
            es = _group_slice(layout, ee_g)
            mask[es] = True
            for a, fr in zip(actions, frames):
                pose = fr.wrist[side]
                a[es] = np.concatenate(
                    [pose.translation, quat_to_rotvec(pose.rotation)])
        if arm_g in descriptor.groups:
            has_arm = all(side in fr.arm for fr in frames)
            if has_arm:
                ar = _group_slice(layout, arm_g)
                mask[ar] = True
                for a, fr in zip(actions, frames):
                    a[ar] = np.asarray(fr.arm[side], float)

    records = []
    for i, fr in enumerate(frames):
        action = np.where(mask, actions[i], 0.0)
        state = np.where(mask, actions[i - 1] if i else actions[0], 0.0)
        views = tuple((path, spec) for role, path in fr.images
                      for vrole, _, spec in traj.views if vrole == role)
        records.append(DatasetRecord(fr.timestamp, traj.instruction,
                                     state, action, mask, traj.category,
                                     traj.source_id, views))
    return records, worst_resid


def _hand_joint_mask(model: HandModel, mapped) -> np.ndarray:
    """Active-joint dims supervisable given the mapped fingers."""
    m = np.zeros(16, bool)
    want = set(mapped)
    for col, jid in enumerate(model.active_joints[:16]):
        finger = model.finger_of_link(
            model.joints[model.joint_index[jid]].child_link)
        if finger in want:
            m[col] = True
    return m


# -------------------------------------------------------- resampling
@dataclass(frozen=True)
class ManifestEntry:
    source_id: str
    index: int
    category: str
    with_replacement: bool = False


def resample_balanced(corpus, weights: dict, total: int,
                      seed: int = 0) -> list:
    """Task-balanced draw. Per-category counts follow the weights by
    largest remainder (within 1 record); draws are without replacement
    until a category runs out, then with replacement and flagged."""
    if not corpus:
        raise PipelineError("empty corpus")
    cats = sorted(weights)
    wsum = sum(weights[c] for c in cats)
    if wsum <= 0:
        raise PipelineError("weights must sum to a positive value")
    quota = {c: int(total * weights[c] / wsum) for c in cats}
    remainders = sorted(cats, key=lambda c: (-(total * weights[c] / wsum
                                              - quota[c]), c))
    for c in remainders[: total - sum(quota.values())]:
        quota[c] += 1

    by_cat = {c: [] for c in cats}
    for i, rec in enumerate(corpus):
        if rec.category in by_cat:
            by_cat[rec.category].append(i)
    rng = np.random.default_rng(seed)
    manifest = []
    for c in cats:
        pool = by_cat[c]
        if quota[c] > 0 and not pool:
            raise PipelineError(f"no records available for category {c!r}")
        order = rng.permutation(len(pool))
        for k in range(quota[c]):
            if k < len(pool):
                idx = pool[order[k]]
                flag = False
            else:
                idx = pool[rng.integers(len(pool))]
                flag = True
            manifest.append(ManifestEntry(corpus[idx].source_id, idx, c,
                                          flag))
    return manifest


# -------------------------------------------------------- export
def _fmt(v: float) -> str:
    return repr(float(v))


def format_record(rec: DatasetRecord) -> str:
    mask = "".join("1" if b else "0" for b in rec.mask)
    state = " ".join(_fmt(v) for v in np.where(rec.mask, rec.state, 0.0))
    action = " ".join(_fmt(v) for v in np.where(rec.mask, rec.action, 0.0))
    views = ";".join(
        f"{p}:{s.role}:{s.source_resolution[0]}x{s.source_resolution[1]}"
        f":{s.crop[0]},{s.crop[1]},{s.crop[2]},{s.crop[3]}"
        f":{s.output_resolution[0]}x{s.output_resolution[1]}"
        for p, s in rec.views) or "-"
    instr = rec.instruction.replace("|", " ") or "-"
    return "|".join([_fmt(rec.timestamp), rec.source_id, rec.category,
                     instr, views, mask, state, action])


def parse_record(line: str) -> DatasetRecord:
    parts = line.rstrip("\n").split("|")
    if len(parts) != 8:
        raise PipelineError("record line needs 8 fields")
    ts, source_id, category, instr, views_s, mask_s, state_s, action_s = parts
    mask = np.array([c == "1" for c in mask_s])
    state = np.array([float(x) for x in state_s.split()])
    action = np.array([float(x) for x in action_s.split()])
    views = []
    if views_s != "-":
        for item in views_s.split(";"):
            p, role, src, crop, out = item.split(":")
            sw, sh = src.split("x")
            ow, oh = out.split("x")
            x, y, w, h = crop.split(",")
            views.append((p, CropSpec((float(sw), float(sh)),
                                      (float(x), float(y), float(w), float(h)),
                                      (float(ow), float(oh)), role)))
    return DatasetRecord(float(ts), "" if instr == "-" else instr,
                         state, action, mask, category, source_id,
                         tuple(views))


def export(manifest, corpus, out) -> dict:
    """Write the corpus (one record per line, schema-versioned) and a
    stats summary. Returns the stats. `out` is a writable text stream or
    a path."""
    close = False
    if isinstance(out, str):
        out = open(out, "w")
        close = True
    try:
        out.write(f"# {SCHEMA_VERSION}\n")
        counts = {}
        coverage = np.zeros(N_CHANNELS, int)
        for entry in manifest:
            rec = corpus[entry.index]
            counts[entry.category] = counts.get(entry.category, 0) + 1
            coverage += rec.mask.astype(int)
            out.write(format_record(rec) + "\n")
        stats = {"records": len(manifest),
                 "categories": dict(sorted(counts.items())),
                 "mask_coverage": coverage.tolist(),
                 "with_replacement": sum(e.with_replacement
                                         for e in manifest)}
        out.write("# stats records=%d replacement=%d\n"
                  % (stats["records"], stats["with_replacement"]))
        for c, n in sorted(counts.items()):
            out.write(f"# stats category {c}={n}\n")
        out.write("# stats coverage " +
                  " ".join(str(int(x)) for x in coverage) + "\n")
        return stats
    finally:
        if close:
            out.close()


def export_string(manifest, corpus) -> str:
    buf = io.StringIO()
    export(manifest, corpus, buf)
    return buf.getvalue()
