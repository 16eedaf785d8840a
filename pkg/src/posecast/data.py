"""Dataset manifests, file formats, windowing, and the puppet generator.

On-disk layout (all paths relative to the manifest, overridable via the
DATA_ROOT environment variable):

  manifest.json             dataset name, layout, vocabularies, splits
  cameras/<id>.json         one pinhole camera per sequence
  sequences/<id>.jsonl      one annotated step per line
  db.p3db                   binary 3D pose database (uncorrelated with sequences)

Sequence steps store raw pixel coordinates; loading centers every pose at
the neck. Step schema: {frame, frame_end, action_id, object_ids,
charpose_frame, pose2d: J x [x, y, conf]}.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataValidationError, VocabularyError
from .skeleton import (ActionLabel, Camera, HistoryStep, JointLayout, SequenceSample,
                       Skeleton2D, center_at_neck, upper_body_layout)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
P3DB_MAGIC = b"P3DB"


# ---------------------------------------------------------------------------
# 3D pose database (binary).
# ---------------------------------------------------------------------------


def save_pose_db(path, poses):
    """Write [P,J,3] mm poses: magic, count u64, J u8, then f32 data."""
    arr = np.ascontiguousarray(poses, dtype="<f4")
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataValidationError(f"pose database must be [P,J,3], got {arr.shape}")
    with open(path, "wb") as f:
        f.write(P3DB_MAGIC)
        f.write(struct.pack("<Q", arr.shape[0]))
        f.write(struct.pack("<B", arr.shape[1]))
        f.write(arr.tobytes())


def load_pose_db(path, expected_joints=None):
    with open(path, "rb") as f:
        if f.read(4) != P3DB_MAGIC:
            raise DataValidationError(f"{path}: not a pose database (bad magic)")
        (count,) = struct.unpack("<Q", f.read(8))
        (j,) = struct.unpack("<B", f.read(1))
        data = np.frombuffer(f.read(count * j * 3 * 4), dtype="<f4")
    if data.size != count * j * 3:
        raise DataValidationError(f"{path}: truncated pose database")
    poses = data.reshape(count, j, 3).astype(np.float32)
    if expected_joints is not None and j != expected_joints:
        raise DataValidationError(f"{path}: database has {j} joints, layout has {expected_joints}")
    if not np.all(np.isfinite(poses)):
        raise DataValidationError(f"{path}: database contains non-finite poses")
    return poses


# ---------------------------------------------------------------------------
# Sequence files.
# ---------------------------------------------------------------------------


def write_sequence(path, steps):
    """steps: list of dicts with keys frame, frame_end, action_id, object_ids,
    charpose_frame, pose2d (J x [x, y, conf])."""
    with open(path, "w", encoding="utf-8") as f:
        for step in steps:
            f.write(json.dumps(step, sort_keys=True))
            f.write("\n")


def read_sequence(path):
    steps = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                steps.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataValidationError(f"{path}:{line_no}: bad JSON ({exc})") from exc
    return steps


# ---------------------------------------------------------------------------
# Manifest.
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    name: str
    layout: JointLayout
    actions: list
    objects: list
    sequences: dict            # id -> {"file": ..., "camera": ...}
    splits: dict               # "train"/"val"/"test" -> [ids]
    pose_db: str = "db.p3db"
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        seen = {}
        for split, ids in self.splits.items():
            for sid in ids:
                if sid in seen:
                    raise DataValidationError(
                        f"sequence {sid!r} appears in both {seen[sid]!r} and {split!r} splits")
                seen[sid] = split
                if sid not in self.sequences:
                    raise DataValidationError(f"split {split!r} references unknown sequence {sid!r}")

    def to_dict(self):
        return {
            "format_version": self.format_version,
            "name": self.name,
            "layout": self.layout.to_dict(),
            "actions": list(self.actions),
            "objects": list(self.objects),
            "sequences": self.sequences,
            "splits": self.splits,
            "pose_db": self.pose_db,
        }

    @classmethod
    def from_dict(cls, d):
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            from .errors import VersionError

            raise VersionError(f"manifest format_version {version}, expected {FORMAT_VERSION}")
        return cls(
            name=d["name"], layout=JointLayout.from_dict(d["layout"]),
            actions=list(d["actions"]), objects=list(d["objects"]),
            sequences=dict(d["sequences"]), splits=dict(d["splits"]),
            pose_db=d.get("pose_db", "db.p3db"),
        )


def save_manifest(manifest, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(path):
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return DatasetManifest.from_dict(json.load(f))


def data_base(manifest_path):
    """Directory files are resolved against; DATA_ROOT wins when set."""
    root = os.environ.get("DATA_ROOT")
    return Path(root) if root else Path(manifest_path).parent


@dataclass
class AnnotatedStep:
    """One loaded step: neck-centered characteristic 2D pose plus labels."""

    pose2d: Skeleton2D
    action: ActionLabel
    objects: tuple
    frame: int
    charpose_frame: int


class Dataset:
    """A manifest bound to its directory, with loading and windowing."""

    def __init__(self, manifest_path):
        self.manifest_path = Path(manifest_path)
        self.manifest = load_manifest(self.manifest_path)
        self.base = data_base(self.manifest_path)
        self._check_files()

    def _check_files(self):
        missing = []
        for sid, entry in self.manifest.sequences.items():
            for key in ("file", "camera"):
                if not (self.base / entry[key]).exists():
                    missing.append(str(self.base / entry[key]))
        if not (self.base / self.manifest.pose_db).exists():
            missing.append(str(self.base / self.manifest.pose_db))
        if missing:
            raise DataValidationError(f"manifest references missing files: {missing[:5]}")

    @property
    def layout(self):
        return self.manifest.layout

    @property
    def n_actions(self):
        return len(self.manifest.actions)

    @property
    def n_objects(self):
        return len(self.manifest.objects)

    def camera(self, sid):
        with open(self.base / self.manifest.sequences[sid]["camera"], "r", encoding="utf-8") as f:
            return Camera.from_dict(json.load(f))

    def load_sequence(self, sid):
        """Ordered, validated, neck-centered steps of one sequence."""
        entry = self.manifest.sequences.get(sid)
        if entry is None:
            raise DataValidationError(f"unknown sequence id {sid!r}")
        raw = read_sequence(self.base / entry["file"])
        j = self.layout.n_joints
        steps = []
        for k, step in enumerate(raw):
            action_id = int(step["action_id"])
            if not 0 <= action_id < self.n_actions:
                raise VocabularyError(
                    f"{sid} step {k}: action id {action_id} outside vocabulary "
                    f"of size {self.n_actions}")
            for obj in step.get("object_ids", []):
                if not 0 <= int(obj) < max(self.n_objects, 1):
                    raise VocabularyError(f"{sid} step {k}: object id {obj} outside vocabulary")
            frame, frame_end = int(step["frame"]), int(step["frame_end"])
            char = int(step["charpose_frame"])
            if not frame <= char <= frame_end:
                raise DataValidationError(
                    f"{sid} step {k}: characteristic frame {char} outside action "
                    f"range [{frame}, {frame_end}]")
            pose = np.asarray(step["pose2d"], dtype=np.float32)
            if pose.shape != (j, 3):
                raise DataValidationError(
                    f"{sid} step {k}: pose2d shape {pose.shape}, expected ({j}, 3)")
            skel = center_at_neck(Skeleton2D(pose[:, :2], pose[:, 2]), self.layout.neck)
            steps.append(AnnotatedStep(
                pose2d=skel,
                action=ActionLabel(action_id, self.n_actions),
                objects=tuple(int(o) for o in step.get("object_ids", [])),
                frame=frame, charpose_frame=char))
        return steps

    def window_samples(self, sid, n_history):
        """Sliding windows over one sequence; [] when too short."""
        steps = self.load_sequence(sid)
        camera = self.camera(sid)
        if len(steps) < n_history + 1:
            return []
        samples = []
        for i in range(len(steps) - n_history):
            history = tuple(
                HistoryStep(pose2d=s.pose2d, action=s.action, objects=s.objects)
                for s in steps[i:i + n_history])
            target = steps[i + n_history]
            samples.append(SequenceSample(
                history=history, target_action=target.action,
                target_pose2d=target.pose2d, camera=camera,
                sequence_id=sid, step_index=i))
        return samples

    def split_samples(self, split, n_history):
        """All windows of a split; returns (samples, skipped_sequence_count)."""
        if split not in self.manifest.splits:
            raise DataValidationError(f"unknown split {split!r}")
        samples, skipped = [], 0
        for sid in self.manifest.splits[split]:
            got = self.window_samples(sid, n_history)
            if got:
                samples.extend(got)
            else:
                skipped += 1
        if skipped:
            log.warning("split %s: skipped %d sequences shorter than N+1=%d",
                        split, skipped, n_history + 1)
        return samples, skipped

    def pose_database(self):
        return load_pose_db(self.base / self.manifest.pose_db,
                            expected_joints=self.layout.n_joints)


# ---------------------------------------------------------------------------
# Puppet grammar and synthetic generation.
# ---------------------------------------------------------------------------


@dataclass
class PuppetGrammar:
    """Markov grammar over actions, each with a canonical 3D pose and object."""

    action_names: list
    object_names: list
    canonical_poses: np.ndarray        # [n_actions, J, 3] mm, neck at origin
    transitions: np.ndarray            # [n_actions, n_actions] row-stochastic
    initial: np.ndarray                # [n_actions] distribution
    action_objects: list = field(default_factory=list)  # object ids per action
    layout: JointLayout = field(default_factory=upper_body_layout)

    def __post_init__(self):
        self.canonical_poses = np.asarray(self.canonical_poses, dtype=np.float32)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        n = len(self.action_names)
        if n < 2:
            raise DataValidationError("grammar needs at least 2 actions")
        if self.canonical_poses.shape != (n, self.layout.n_joints, 3):
            raise DataValidationError(
                f"canonical poses must be [{n},{self.layout.n_joints},3], "
                f"got {self.canonical_poses.shape}")
        if self.transitions.shape != (n, n):
            raise DataValidationError("transition table must be square over actions")
        rowsum = self.transitions.sum(axis=1)
        if np.any(np.abs(rowsum - 1.0) > 1e-9):
            raise DataValidationError("transition rows must sum to 1")
        if np.any(self.transitions.max(axis=1) <= 0):
            raise DataValidationError("grammar has an absorbing state with no successor")
        if not self.action_objects:
            self.action_objects = [0] * n

    @property
    def n_actions(self):
        return len(self.action_names)

    @property
    def deterministic(self):
        return bool(np.all(self.transitions.max(axis=1) == 1.0))

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "action_names": list(self.action_names),
            "object_names": list(self.object_names),
            "canonical_poses_mm": self.canonical_poses.tolist(),
            "transitions": self.transitions.tolist(),
            "initial": self.initial.tolist(),
            "action_objects": list(self.action_objects),
            "layout": self.layout.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            action_names=list(d["action_names"]),
            object_names=list(d["object_names"]),
            canonical_poses=np.asarray(d["canonical_poses_mm"], dtype=np.float32),
            transitions=np.asarray(d["transitions"], dtype=np.float64),
            initial=np.asarray(d["initial"], dtype=np.float64),
            action_objects=list(d.get("action_objects", [])),
            layout=JointLayout.from_dict(d["layout"]) if "layout" in d else upper_body_layout(),
        )


def load_grammar(path):
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"grammar spec not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return PuppetGrammar.from_dict(json.load(f))


def _arm_pose(azimuth, elevation, reach):
    """Unit direction for an arm segment from spherical angles."""
    ce = np.cos(elevation)
    return np.array([np.cos(azimuth) * ce, -np.sin(elevation), np.sin(azimuth) * ce]) * reach


def _pose_shape(index, n_shapes, layout):
    """One canonical upper-body pose with symmetric bone lengths and
    shape-specific arm directions that vary in depth, so 2D-only training
    foreshortens them observably."""
    upper, fore = 280.0, 250.0
    pose = np.zeros((layout.n_joints, 3), dtype=np.float64)
    pose[0] = (0.0, -220.0, -30.0)       # head
    pose[1] = (0.0, 0.0, 0.0)            # neck
    pose[2] = (180.0, 20.0, 0.0)         # right shoulder
    pose[5] = (-180.0, 20.0, 0.0)        # left shoulder
    pose[8] = (0.0, 520.0, 20.0)         # hip
    az_r = 2.0 * np.pi * index / n_shapes
    az_l = np.pi - 2.0 * np.pi * ((index + 2) % n_shapes) / n_shapes
    el_r = np.deg2rad(15.0 + 40.0 * ((index * 3) % n_shapes) / n_shapes)
    el_l = np.deg2rad(10.0 + 45.0 * ((index * 5 + 2) % n_shapes) / n_shapes)
    pose[3] = pose[2] + _arm_pose(az_r, el_r, upper)
    pose[4] = pose[3] + _arm_pose(az_r + 0.6, el_r - 0.4, fore)
    pose[6] = pose[5] + _arm_pose(az_l, el_l, upper)
    pose[7] = pose[6] + _arm_pose(az_l - 0.6, el_l - 0.3, fore)
    return pose


def default_pose_classes(n_actions):
    """Map actions onto a smaller pose inventory with one colliding window.

    Actions alias shared poses (k mod n_actions//2) except the last, which
    gets a shape of its own. For the default cycle this repeats one pose
    trigram with two different successors, so the pose stream alone cannot
    identify the grammar state: the action labels carry real information,
    as they do in natural activity data.
    """
    half = max(2, n_actions // 2)
    return [k % half for k in range(n_actions - 1)] + [half]


def default_puppet_grammar(n_actions=8, n_objects=4):
    """Desk-scale grammar: a deterministic action cycle over aliased poses."""
    layout = upper_body_layout()
    classes = default_pose_classes(n_actions)
    n_shapes = max(classes) + 1
    poses = [_pose_shape(classes[k], n_shapes, layout) for k in range(n_actions)]
    transitions = np.zeros((n_actions, n_actions))
    for k in range(n_actions):
        transitions[k, (k + 1) % n_actions] = 1.0
    initial = np.full(n_actions, 1.0 / n_actions)
    return PuppetGrammar(
        action_names=[f"act_{k:02d}" for k in range(n_actions)],
        object_names=[f"obj_{k:02d}" for k in range(n_objects)],
        canonical_poses=np.asarray(poses, dtype=np.float32),
        transitions=transitions,
        initial=initial,
        action_objects=[k % n_objects for k in range(n_actions)],
        layout=layout,
    )


def random_camera(rng):
    """A plausible fixed third-person camera looking at the actor."""
    fx = rng.uniform(700.0, 1100.0)
    fy = rng.uniform(700.0, 1100.0)
    cx = rng.uniform(420.0, 620.0)
    cy = rng.uniform(320.0, 480.0)
    yaw = rng.uniform(-0.5, 0.5)
    pitch = rng.uniform(-0.25, 0.25)
    roll = rng.uniform(-0.08, 0.08)
    cy_, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    r_yaw = np.array([[cy_, 0, sy], [0, 1, 0], [-sy, 0, cy_]])
    r_pitch = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    r_roll = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    rot = r_roll @ r_pitch @ r_yaw
    t = np.array([rng.uniform(-200.0, 200.0), rng.uniform(-100.0, 100.0),
                  rng.uniform(2300.0, 3300.0)])
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, R=rot, t=t)


def _perturb(pose, rng, noise_mm, neck):
    """Displace every non-neck joint by a random vector of norm <= noise_mm."""
    out = pose.astype(np.float64).copy()
    j = len(pose)
    direction = rng.normal(size=(j, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.uniform(0.0, noise_mm, size=(j, 1))
    out += direction * radius
    out[neck] = 0.0
    return out.astype(np.float32)


def synthesize_sequence(grammar, length, camera, rng, noise_mm=20.0, occlusion_rate=0.0):
    """Sample one sequence. Returns (actions, poses3d [L,J,3], pixels [L,J,2],
    confidences [L,J]); pixels are raw (uncentered)."""
    from .geometry import project

    neck = grammar.layout.neck
    actions = [int(rng.choice(grammar.n_actions, p=grammar.initial))]
    while len(actions) < length:
        actions.append(int(rng.choice(grammar.n_actions, p=grammar.transitions[actions[-1]])))
    poses, pixels, confs = [], [], []
    for a in actions:
        pose = _perturb(grammar.canonical_poses[a], rng, noise_mm, neck)
        px = project(pose, camera)
        conf = np.ones(grammar.layout.n_joints, dtype=np.float32)
        if occlusion_rate > 0:
            hide = rng.uniform(size=grammar.layout.n_joints) < occlusion_rate
            hide[neck] = False
            conf[hide] = 0.0
        poses.append(pose)
        pixels.append(px)
        confs.append(conf)
    return actions, np.stack(poses), np.stack(pixels), np.stack(confs)


def generate_puppet_dataset(grammar, num_sequences, seed, out_dir,
                            length_range=(8, 12), noise_mm=20.0,
                            db_size=5000, db_noise_mm=20.0,
                            occlusion_rate=0.0, split=(0.7, 0.15, 0.15),
                            frames_per_step=30):
    """Write a full synthetic dataset tree; byte-identical for a given seed.

    The 3D database is drawn from independently perturbed canonical poses and
    checked to share no exact pose with any sequence, preserving the
    "uncorrelated database" property the adversarial loss relies on.
    """
    out = Path(out_dir)
    (out / "sequences").mkdir(parents=True, exist_ok=True)
    (out / "cameras").mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    seq_rng, db_rng, split_rng = (np.random.default_rng(s) for s in root.spawn(3))

    layout = grammar.layout
    ids, sequence_entries = [], {}
    seen_poses = set()
    for s in range(num_sequences):
        sid = f"seq_{s:04d}"
        ids.append(sid)
        camera = random_camera(seq_rng)
        length = int(seq_rng.integers(length_range[0], length_range[1] + 1))
        actions, poses, pixels, confs = synthesize_sequence(
            grammar, length, camera, seq_rng, noise_mm, occlusion_rate)
        steps = []
        for i, a in enumerate(actions):
            seen_poses.add(poses[i].tobytes())
            pose2d = [[float(x), float(y), float(c)]
                      for (x, y), c in zip(pixels[i], confs[i])]
            steps.append({
                "frame": i * frames_per_step,
                "frame_end": i * frames_per_step + frames_per_step - 1,
                "charpose_frame": i * frames_per_step + frames_per_step // 2,
                "action_id": a,
                "object_ids": [grammar.action_objects[a]],
                "pose2d": pose2d,
            })
        write_sequence(out / "sequences" / f"{sid}.jsonl", steps)
        with open(out / "cameras" / f"{sid}.json", "w", encoding="utf-8") as f:
            json.dump(camera.to_dict(), f, sort_keys=True)
            f.write("\n")
        sequence_entries[sid] = {"file": f"sequences/{sid}.jsonl",
                                 "camera": f"cameras/{sid}.json"}

    db = []
    while len(db) < db_size:
        a = int(db_rng.integers(grammar.n_actions))
        pose = _perturb(grammar.canonical_poses[a], db_rng, db_noise_mm, layout.neck)
        if pose.tobytes() in seen_poses:
            continue
        db.append(pose)
    save_pose_db(out / "db.p3db", np.stack(db))

    order = list(range(num_sequences))
    split_rng.shuffle(order)
    n_train = int(round(split[0] * num_sequences))
    n_val = int(round(split[1] * num_sequences))
    splits = {
        "train": sorted(ids[i] for i in order[:n_train]),
        "val": sorted(ids[i] for i in order[n_train:n_train + n_val]),
        "test": sorted(ids[i] for i in order[n_train + n_val:]),
    }
    manifest = DatasetManifest(
        name="puppet", layout=layout,
        actions=list(grammar.action_names), objects=list(grammar.object_names),
        sequences=sequence_entries, splits=splits)
    save_manifest(manifest, out / "manifest.json")
    return out / "manifest.json"


# ---------------------------------------------------------------------------
# Thin real-dataset adapters (ship without data).
# ---------------------------------------------------------------------------

# OpenPose BODY_25 indices for our joints, in layout order.
OPENPOSE_BODY25_INDICES = (0, 1, 2, 3, 4, 5, 6, 7, 8)


def parse_openpose_keypoints(path, person=0):
    """Read one OpenPose BODY_25 JSON file into raw pixels + confidence."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    people = doc.get("people", [])
    if len(people) <= person:
        raise DataValidationError(f"{path}: no person {person} in keypoint file")
    flat = np.asarray(people[person]["pose_keypoints_2d"], dtype=np.float32).reshape(-1, 3)
    picked = flat[list(OPENPOSE_BODY25_INDICES)]
    return picked[:, :2], picked[:, 2]


def dataset_preset(name):
    """Vocabulary declarations for the supported real datasets."""
    if name == "cooking":
        return {"n_actions": 37, "n_objects": 187, "rollout_steps": 10}
    if name == "assembly":
        return {"n_actions": 31, "n_objects": 0, "rollout_steps": 5}
    raise DataValidationError(f"unknown dataset preset {name!r}")
