"""Skeleton, camera, label, and sequence types shared by every module.

The canonical layout is the 9 upper-body joints (head, neck, shoulders,
elbows, hands, hip) with the bone tree rooted at the neck. 2D joints are
pixels, 3D joints are millimeters in camera-aligned axes; both conventions
put the neck at the origin after centering.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, DataValidationError, VocabularyError

NECK_NAME = "neck"


@dataclass(frozen=True)
class JointLayout:
    """Ordered joint names, bone tree (parent, child), left/right mirror pairs."""

    joints: tuple
    bones: tuple
    mirror_pairs: tuple

    def __post_init__(self):
        if NECK_NAME not in self.joints:
            raise DataValidationError(f"layout has no {NECK_NAME!r} joint")
        n = len(self.joints)
        children = [c for _, c in self.bones]
        if sorted(children) != sorted(set(range(n)) - {self.neck}):
            raise DataValidationError("bones must form a tree rooted at the neck "
                                      "(every non-neck joint exactly once as child)")
        for p, c in self.bones:
            if not (0 <= p < n and 0 <= c < n):
                raise DataValidationError(f"bone ({p},{c}) outside joint range")
        mirror = self.mirror_map()
        for j in range(n):
            if mirror[mirror[j]] != j:
                raise DataValidationError("mirror pairs are not involutive")

    @property
    def neck(self):
        return self.joints.index(NECK_NAME)

    @property
    def n_joints(self):
        return len(self.joints)

    @property
    def n_bones(self):
        return len(self.bones)

    def mirror_map(self):
        """Per-joint mirrored index; joints on the spine map to themselves."""
        m = list(range(len(self.joints)))
        for a, b in self.mirror_pairs:
            m[a], m[b] = b, a
        return m

    def mirrored_bones(self):
        """Pairs of bone indices (right, left) that mirror each other."""
        mirror = self.mirror_map()
        index = {bone: i for i, bone in enumerate(self.bones)}
        pairs = []
        for i, (p, c) in enumerate(self.bones):
            twin = index.get((mirror[p], mirror[c]))
            if twin is not None and i < twin:
                pairs.append((i, twin))
        return pairs

    def to_dict(self):
        return {
            "joints": list(self.joints),
            "bones": [list(b) for b in self.bones],
            "mirror_pairs": [list(p) for p in self.mirror_pairs],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            joints=tuple(d["joints"]),
            bones=tuple((int(p), int(c)) for p, c in d["bones"]),
            mirror_pairs=tuple((int(a), int(b)) for a, b in d["mirror_pairs"]),
        )


def upper_body_layout():
    """The canonical 9-joint upper-body layout."""
    return JointLayout(
        joints=("head", "neck", "right_shoulder", "right_elbow", "right_hand",
                "left_shoulder", "left_elbow", "left_hand", "hip"),
        bones=((1, 0), (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7), (1, 8)),
        mirror_pairs=((2, 5), (3, 6), (4, 7)),
    )


@dataclass
class Skeleton2D:
    """Pixel-space joints [J, 2] with per-joint confidence in [0, 1]."""

    joints: np.ndarray
    confidence: np.ndarray = None

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float32)
        if self.joints.ndim != 2 or self.joints.shape[1] != 2:
            raise DataValidationError(f"2D joints must be [J,2], got {self.joints.shape}")
        if self.confidence is None:
            self.confidence = np.ones(len(self.joints), dtype=np.float32)
        else:
            self.confidence = np.asarray(self.confidence, dtype=np.float32)
        if self.confidence.shape != (len(self.joints),):
            raise DataValidationError("confidence must have one entry per joint")
        if not np.all(np.isfinite(self.joints)):
            raise DataValidationError("2D joints contain non-finite values")
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise DataValidationError("confidence must lie in [0,1]")

    @property
    def n_joints(self):
        return len(self.joints)


@dataclass
class Skeleton3D:
    """Millimeter joints [J, 3] in camera-aligned axes."""

    joints: np.ndarray

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float32)
        if self.joints.ndim != 2 or self.joints.shape[1] != 3:
            raise DataValidationError(f"3D joints must be [J,3], got {self.joints.shape}")
        if not np.all(np.isfinite(self.joints)):
            raise DataValidationError("3D joints contain non-finite values")

    @property
    def n_joints(self):
        return len(self.joints)


def center_at_neck(skeleton, neck_index=1):
    """Translate so the neck sits at the origin; relative geometry unchanged."""
    shifted = skeleton.joints - skeleton.joints[neck_index]
    if isinstance(skeleton, Skeleton2D):
        return Skeleton2D(shifted, skeleton.confidence.copy())
    return Skeleton3D(shifted)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics (fx, fy, cx, cy, zero skew) and extrinsics.

    R rotates pose-frame coordinates into camera axes, t translates in mm;
    both are fixed for a whole sequence.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise DataValidationError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > 1e-6:
            raise DataValidationError("R is not orthonormal within 1e-6")
        if np.linalg.det(self.R) < 0:
            raise DataValidationError("R must be a proper rotation (det +1)")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "R": [float(v) for v in self.R.reshape(-1)],
                "t": [float(v) for v in self.t]}

    @classmethod
    def from_dict(cls, d):
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                   cy=float(d["cy"]), R=np.asarray(d["R"], dtype=np.float64),
                   t=np.asarray(d["t"], dtype=np.float64))


def one_hot(index, vocab_size):
    """Unit basis vector for a label index."""
    if not 0 <= index < vocab_size:
        raise VocabularyError(f"label index {index} outside vocabulary of size {vocab_size}")
    vec = np.zeros(vocab_size, dtype=np.float32)
    vec[index] = 1.0
    return vec


@dataclass(frozen=True)
class ActionLabel:
    index: int
    vocab_size: int

    def __post_init__(self):
        if not 0 <= self.index < self.vocab_size:
            raise VocabularyError(f"action index {self.index} outside vocabulary "
                                  f"of size {self.vocab_size}")

    def one_hot(self):
        return one_hot(self.index, self.vocab_size)


@dataclass(frozen=True)
class ObjectLabel:
    index: int
    vocab_size: int

    def __post_init__(self):
        if not 0 <= self.index < self.vocab_size:
            raise VocabularyError(f"object index {self.index} outside vocabulary "
                                  f"of size {self.vocab_size}")

    def one_hot(self):
        return one_hot(self.index, self.vocab_size)


@dataclass(frozen=True)
class HistoryStep:
    """One observed step: neck-centered 2D pose, its action, involved objects."""

    pose2d: Skeleton2D
    action: ActionLabel
    objects: tuple = ()


@dataclass(frozen=True)
class SequenceSample:
    """A sliding window of N observed steps plus the next step's targets."""

    history: tuple
    target_action: ActionLabel
    target_pose2d: Skeleton2D
    camera: Camera
    sequence_id: str = ""
    step_index: int = 0

    def __post_init__(self):
        if len(self.history) == 0:
            raise ContractError("sample history may not be empty")

    @property
    def window(self):
        return len(self.history)


def replace_history(sample, history):
    return replace(sample, history=tuple(history))
