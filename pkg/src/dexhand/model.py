"""Hand-description model: schema parsing, validation, serialization.

File format (line oriented, '#' comments):

    [meta]
    name = <id>                 handedness = left|right
    height_mm = <f>             width_mm = <f>
    fingertips = thumb:<link> index:<link> middle:<link> ring:<link> little:<link>
    rest_config = 16 floats     kapandji_flexion = 16 floats
    palm_landmarks = x,y,z; x,y,z

    [links]     id parent tx ty tz qw qx qy qz
                # parent: 'none' (wrist), a link id, or a joint id
    [joints]    id parent_link child_link ax ay az kind lo hi actuation
    [couplings] driver driven g a c f offset_in offset_out rest_in rest_out
    [capsules]  link ax ay az bx by bz radius
    [selftest]  fingertip <finger> x y z      # zero config, identity wrist

Angles radians, lengths meters; meta dims in mm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fourbar import FourBarCoupling
from .geometry import Pose

FINGERS = ("thumb", "index", "middle", "ring", "little")

REVOLUTE = "revolute"
UNIVERSAL = "universal-component"
ACTIVE = "active"
COUPLED = "coupled"


class ModelError(ValueError):
    """Parse or invariant failure; message lists every violation found."""


@dataclass(frozen=True)
class JointSpec:
    id: str
    parent_link: str
    child_link: str
    axis: np.ndarray
    kind: str
    limits: tuple
    actuation: str


@dataclass(frozen=True)
class LinkSpec:
    id: str
    parent: str  # 'none', link id, or joint id
    offset: Pose


@dataclass(frozen=True)
class CapsuleSpec:
    link: str
    a: np.ndarray  # segment endpoints, link frame, m
    b: np.ndarray
    radius: float


@dataclass
class HandModel:
    name: str
    handedness: str
    joints: list
    links: list
    couplings: list
    fingertip_frames: dict
    collision_capsules: list
    overall_dims: tuple  # (height_mm, width_mm)
    rest_config: np.ndarray
    kapandji_flexion: np.ndarray
    palm_landmarks: list
    selftest: dict  # finger -> 3-vector, zero config fingertip positions

    # derived, filled in __post_init__
    joint_index: dict = field(default_factory=dict)
    link_index: dict = field(default_factory=dict)
    active_joints: list = field(default_factory=list)
    coupled_drivers: dict = field(default_factory=dict)  # driven id -> coupling
    collision_pairs: list = field(default_factory=list)

    def __post_init__(self):
        self.joint_index = {j.id: k for k, j in enumerate(self.joints)}
        self.link_index = {l.id: k for k, l in enumerate(self.links)}
        self.active_joints = [j.id for j in self.joints if j.actuation == ACTIVE]
        self.active_col = {jid: k for k, jid in enumerate(self.active_joints)}
        self.coupled_drivers = {c.driven: c for c in self.couplings}
        self._chain_cache = {}
        self.collision_pairs = self._build_collision_pairs()
        self._pair_i = np.array([i for i, _ in self.collision_pairs], int)
        self._pair_j = np.array([j for _, j in self.collision_pairs], int)
        radii = np.array([c.radius for c in self.collision_capsules])
        self._pair_rsum = (radii[self._pair_i] + radii[self._pair_j]
                           if self.collision_pairs else np.zeros(0))

    # ------------------------------------------------------------- invariants
    def validate(self) -> None:
        errs = []
        if self.handedness not in ("left", "right"):
            errs.append(f"handedness must be left/right, got {self.handedness!r}")
        if len(self.joints) != 21:
            errs.append(f"joint count must be 21, got {len(self.joints)}")
        n_active = len(self.active_joints)
        if n_active != 16:
            errs.append(f"active joint count must be 16, got {n_active}")
        ids = [j.id for j in self.joints]
        if len(set(ids)) != len(ids):
            errs.append("duplicate joint ids")
        lids = [l.id for l in self.links]
        if len(set(lids)) != len(lids):
            errs.append("duplicate link ids")
        known_links = set(lids)
        known_joints = set(ids)
        for l in self.links:
            if l.parent != "none" and l.parent not in known_links | known_joints:
                errs.append(f"link {l.id}: dangling parent {l.parent!r}")
        for j in self.joints:
            if abs(np.linalg.norm(j.axis) - 1.0) > 1e-9:
                errs.append(f"joint {j.id}: axis not unit norm")
            if not j.limits[0] < j.limits[1]:
                errs.append(f"joint {j.id}: limits lo must be < hi")
            if j.parent_link not in known_links:
                errs.append(f"joint {j.id}: dangling parent link {j.parent_link!r}")
            if j.child_link not in known_links:
                errs.append(f"joint {j.id}: dangling child link {j.child_link!r}")
            if j.kind not in (REVOLUTE, UNIVERSAL):
                errs.append(f"joint {j.id}: unknown kind {j.kind!r}")
        driven_ids = set()
        for c in self.couplings:
            for end, jid in (("driver", c.driver), ("driven", c.driven)):
                if jid not in known_joints:
                    errs.append(f"coupling {c.driver}->{c.driven}: dangling {end} joint {jid!r}")
            driven_ids.add(c.driven)
        for j in self.joints:
            coupled = j.actuation == COUPLED
            if coupled != (j.id in driven_ids):
                errs.append(
                    f"joint {j.id}: actuation={j.actuation} inconsistent with couplings")
        for c in self.couplings:
            if c.driver in self.joint_index:
                lo, hi = self.joints[self.joint_index[c.driver]].limits
                try:
                    for t in np.linspace(lo, hi, 64):
                        c.solve(float(t))
                except ValueError:
                    errs.append(
                        f"coupling {c.driver}->{c.driven}: closure infeasible inside driver limits")
        for cap in self.collision_capsules:
            if cap.radius <= 0:
                errs.append(f"capsule on {cap.link}: radius must be > 0")
            if cap.link not in known_links:
                errs.append(f"capsule: dangling link {cap.link!r}")
        for f in FINGERS:
            if f not in self.fingertip_frames:
                errs.append(f"missing fingertip frame for {f}")
            elif self.fingertip_frames[f] not in known_links:
                errs.append(f"fingertip frame {self.fingertip_frames[f]!r} not a link")
        if len(self.rest_config) != n_active:
            errs.append("rest_config length must match active joint count")
        if errs:
            raise ModelError("invalid hand model:\n  " + "\n  ".join(errs))

    # --------------------------------------------------------------- topology
    def joint_chain(self, link_id: str) -> list:
        """Joint ids on the path wrist -> link, proximal first."""
        cached = self._chain_cache.get(link_id)
        if cached is not None:
            return cached
        chain = []
        cur = link_id
        guard = 0
        while cur != "none":
            guard += 1
            if guard > 200:
                raise ModelError("link parent cycle detected")
            link = self.links[self.link_index[cur]]
            if link.parent in self.joint_index:
                j = self.joints[self.joint_index[link.parent]]
                chain.append(j.id)
                cur = j.parent_link
            else:
                cur = link.parent
        chain.reverse()
        self._chain_cache[link_id] = chain
        return chain

    def finger_of_link(self, link_id: str):
        """Finger owning a link, by fingertip-chain membership; None = palm."""
        for f, tip in self.fingertip_frames.items():
            tip_chain = self.joint_chain(tip)
            if set(self.joint_chain(link_id)) and set(self.joint_chain(link_id)) <= set(tip_chain):
                if self.joint_chain(link_id)[0] == tip_chain[0]:
                    return f
        return None

    def _build_collision_pairs(self) -> list:
        # Pairs on distinct fingers only. Same-finger pairs (and palm pairs)
        # are excluded: a closed fist legitimately stacks those surfaces.
        pairs = []
        owners = [self.finger_of_link(c.link) for c in self.collision_capsules]
        for i in range(len(self.collision_capsules)):
            for j in range(i + 1, len(self.collision_capsules)):
                if owners[i] is None or owners[j] is None:
                    continue
                if owners[i] != owners[j]:
                    pairs.append((i, j))
        return pairs

    def limits_lo_hi(self):
        lo = np.array([self.joints[self.joint_index[j]].limits[0] for j in self.active_joints])
        hi = np.array([self.joints[self.joint_index[j]].limits[1] for j in self.active_joints])
        return lo, hi


# ------------------------------------------------------------------- parsing
def _fmt(x: float) -> str:
    return repr(float(x))


def load_model(text: str) -> HandModel:
    """Parse and validate a hand-description document."""
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, [])
            continue
        if current is None:
            raise ModelError(f"line {lineno}: content before any [section]")
        sections[current].append((lineno, line))

    for req in ("meta", "links", "joints"):
        if req not in sections:
            raise ModelError(f"missing required section [{req}]")

    meta = {}
    for lineno, line in sections["meta"]:
        if "=" not in line:
            raise ModelError(f"line {lineno}: [meta] entries are key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        meta[k] = v

    def meta_floats(key, n, default=None):
        if key not in meta:
            if default is not None:
                return np.asarray(default, float)
            raise ModelError(f"[meta] missing field {key!r}")
        vals = np.array([float(x) for x in meta[key].split()])
        if len(vals) != n:
            raise ModelError(f"[meta] {key}: expected {n} values, got {len(vals)}")
        return vals

    links = []
    for lineno, line in sections["links"]:
        p = line.split()
        if len(p) != 9:
            raise ModelError(f"line {lineno}: [links] needs 9 fields, got {len(p)}")
        try:
            pose = Pose(np.array(p[2:5], float), np.array(p[5:9], float))
        except ValueError as e:
            raise ModelError(f"line {lineno}: link {p[0]}: {e}") from None
        links.append(LinkSpec(p[0], p[1], pose))

    joints = []
    for lineno, line in sections["joints"]:
        p = line.split()
        if len(p) != 10:
            raise ModelError(f"line {lineno}: [joints] needs 10 fields, got {len(p)}")
        joints.append(JointSpec(
            id=p[0], parent_link=p[1], child_link=p[2],
            axis=np.array(p[3:6], float), kind=p[6],
            limits=(float(p[7]), float(p[8])), actuation=p[9]))

    couplings = []
    for lineno, line in sections.get("couplings", []):
        p = line.split()
        if len(p) != 10:
            raise ModelError(f"line {lineno}: [couplings] needs 10 fields, got {len(p)}")
        try:
            couplings.append(FourBarCoupling(
                driver=p[0], driven=p[1],
                g=float(p[2]), a=float(p[3]), c=float(p[4]), f=float(p[5]),
                offset_in=float(p[6]), offset_out=float(p[7]),
                rest_in=float(p[8]), rest_out=float(p[9])))
        except ValueError as e:
            raise ModelError(f"line {lineno}: {e}") from None

    capsules = []
    for lineno, line in sections.get("capsules", []):
        p = line.split()
        if len(p) != 8:
            raise ModelError(f"line {lineno}: [capsules] needs 8 fields, got {len(p)}")
        capsules.append(CapsuleSpec(
            p[0], np.array(p[1:4], float), np.array(p[4:7], float), float(p[7])))

    selftest = {}
    for lineno, line in sections.get("selftest", []):
        p = line.split()
        if len(p) != 5 or p[0] != "fingertip":
            raise ModelError(f"line {lineno}: [selftest] lines are 'fingertip <finger> x y z'")
        selftest[p[1]] = np.array(p[2:5], float)

    tips = {}
    for item in meta.get("fingertips", "").split():
        f, _, link = item.partition(":")
        tips[f] = link

    landmarks = []
    if "palm_landmarks" in meta:
        for chunk in meta["palm_landmarks"].split(";"):
            chunk = chunk.strip()
            if chunk:
                landmarks.append(np.array([float(x) for x in chunk.split(",")]))

    n_active = sum(1 for j in joints if j.actuation == ACTIVE)
    try:
        model = _build_model(meta, joints, links, couplings, tips, capsules,
                             landmarks, selftest, n_active, meta_floats)
    except KeyError as e:
        # dangling cross-reference hit during index construction
        raise ModelError(f"dangling reference: {e}") from e
    model.validate()
    return model


def _build_model(meta, joints, links, couplings, tips, capsules, landmarks,
                 selftest, n_active, meta_floats) -> HandModel:
    return HandModel(
        name=meta.get("name", "unnamed"),
        handedness=meta.get("handedness", ""),
        joints=joints, links=links, couplings=couplings,
        fingertip_frames=tips, collision_capsules=capsules,
        overall_dims=(float(meta.get("height_mm", 0)), float(meta.get("width_mm", 0))),
        rest_config=meta_floats("rest_config", n_active, default=np.zeros(n_active)),
        kapandji_flexion=meta_floats("kapandji_flexion", n_active,
                                     default=np.zeros(n_active)),
        palm_landmarks=landmarks,
        selftest=selftest)


def serialize_model(m: HandModel) -> str:
    out = ["[meta]"]
    out.append(f"name = {m.name}")
    out.append(f"handedness = {m.handedness}")
    out.append(f"height_mm = {_fmt(m.overall_dims[0])}")
    out.append(f"width_mm = {_fmt(m.overall_dims[1])}")
    out.append("fingertips = " + " ".join(
        f"{f}:{m.fingertip_frames[f]}" for f in FINGERS if f in m.fingertip_frames))
    out.append("rest_config = " + " ".join(_fmt(x) for x in m.rest_config))
    out.append("kapandji_flexion = " + " ".join(_fmt(x) for x in m.kapandji_flexion))
    if m.palm_landmarks:
        out.append("palm_landmarks = " + "; ".join(
            ",".join(_fmt(x) for x in p) for p in m.palm_landmarks))
    out.append("")
    out.append("[links]")
    for l in m.links:
        out.append(f"{l.id} {l.parent} " + " ".join(_fmt(x) for x in l.offset.flat()))
    out.append("")
    out.append("[joints]")
    for j in m.joints:
        out.append(f"{j.id} {j.parent_link} {j.child_link} "
                   + " ".join(_fmt(x) for x in j.axis)
                   + f" {j.kind} {_fmt(j.limits[0])} {_fmt(j.limits[1])} {j.actuation}")
    out.append("")
    out.append("[couplings]")
    for c in m.couplings:
        out.append(f"{c.driver} {c.driven} " + " ".join(
            _fmt(x) for x in (c.g, c.a, c.c, c.f, c.offset_in, c.offset_out,
                              c.rest_in, c.rest_out)))
    out.append("")
    out.append("[capsules]")
    for cap in m.collision_capsules:
        out.append(f"{cap.link} " + " ".join(_fmt(x) for x in (*cap.a, *cap.b))
                   + f" {_fmt(cap.radius)}")
    out.append("")
    out.append("[selftest]")
    for f in FINGERS:
        if f in m.selftest:
            out.append(f"fingertip {f} " + " ".join(_fmt(x) for x in m.selftest[f]))
    return "\n".join(out) + "\n"


def load_model_file(path) -> HandModel:
    with open(path, "r", encoding="utf-8") as fh:
        return load_model(fh.read())


def reference_model_path():
    import importlib.resources as res
    return res.files("dexhand.data") / "reference_right.model"


def load_reference_model() -> HandModel:
    return load_model(reference_model_path().read_text())
