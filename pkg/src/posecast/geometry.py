"""Pinhole projection, the 2D pose loss, kinematic statistics, pose metrics.

Two parallel surfaces: plain numpy functions for data generation and
evaluation (exact, raising on degenerate depth), and Tensor functions used
inside training graphs (depth softly clamped so early random networks keep
finite gradients).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, LossUndefinedError, ProjectionError
from .skeleton import Camera, Skeleton2D, Skeleton3D

Z_MIN_MM = 1.0

# Softness of the training-time depth clamp, per mm. Chosen so depths beyond
# ~1 m are distorted by < 1e-6 mm while the clamp never reaches zero depth.
SOFT_CLAMP_BETA = 0.01

PERSPECTIVE = "perspective"
AFFINE = "affine"


def _pose_array(pose):
    return pose.joints if isinstance(pose, (Skeleton2D, Skeleton3D)) else np.asarray(pose)


def project(pose, camera, mode=PERSPECTIVE, z_min=Z_MIN_MM, layout=None):
    """Project [J,3] mm joints to [J,2] pixels through K(Ry + t).

    Perspective mode divides by the camera-frame depth; affine mode keeps the
    literal matrix product (no divide). Depth at or below z_min raises,
    naming the offending joint.
    """
    pts = _pose_array(pose).astype(np.float64)
    cam_pts = pts @ camera.R.T + camera.t
    z = cam_pts[:, 2]
    if mode == PERSPECTIVE:
        bad = np.nonzero(z <= z_min)[0]
        if bad.size:
            j = int(bad[0])
            name = layout.joints[j] if layout is not None else f"joint {j}"
            raise ProjectionError(
                f"{name} has camera depth {z[j]:.3f} mm <= z_min {z_min} mm",
                joint_index=j,
                joint_name=name if layout is not None else None)
        u = camera.fx * cam_pts[:, 0] / z + camera.cx
        v = camera.fy * cam_pts[:, 1] / z + camera.cy
    elif mode == AFFINE:
        u = camera.fx * cam_pts[:, 0] + camera.cx * z
        v = camera.fy * cam_pts[:, 1] + camera.cy * z
    else:
        raise ContractError(f"unknown projection mode {mode!r}")
    return np.stack([u, v], axis=1).astype(np.float32)


def lift_with_depth(pixels, depths, camera):
    """Invert a perspective projection given per-joint camera depths.

    Returns [J,3] pose-frame mm coordinates; the analytic inverse of
    project(..., mode="perspective").
    """
    px = np.asarray(pixels, dtype=np.float64)
    z = np.asarray(depths, dtype=np.float64)
    x = (px[:, 0] - camera.cx) * z / camera.fx
    y = (px[:, 1] - camera.cy) * z / camera.fy
    cam_pts = np.stack([x, y, z], axis=1)
    return ((cam_pts - camera.t) @ camera.R).astype(np.float32)


def camera_depths(pose, camera):
    """Camera-frame depth per joint, the z of K(Ry + t)."""
    pts = _pose_array(pose).astype(np.float64)
    return (pts @ camera.R.T + camera.t)[:, 2]


@dataclass
class CameraArrays:
    """Per-sample camera constants packed for batched differentiable projection."""

    r_t: np.ndarray   # [B,3,3], transposed rotations
    t: np.ndarray     # [B,1,3]
    fx: np.ndarray    # [B,1,1]
    fy: np.ndarray
    cx: np.ndarray
    cy: np.ndarray

    @classmethod
    def from_cameras(cls, cameras):
        n = len(cameras)
        r_t = np.stack([c.R.T for c in cameras]).astype(np.float32)
        t = np.stack([c.t for c in cameras]).astype(np.float32).reshape(n, 1, 3)
        packs = {}
        for field_name in ("fx", "fy", "cx", "cy"):
            packs[field_name] = np.array(
                [getattr(c, field_name) for c in cameras], dtype=np.float32
            ).reshape(n, 1, 1)
        return cls(r_t=r_t, t=t, **packs)


def soft_clamp_depth(z, z_min=Z_MIN_MM, beta=SOFT_CLAMP_BETA):
    """Smooth lower bound: z_min + softplus(beta (z - z_min)) / beta.

    Strictly above z_min everywhere, indistinguishable from identity for
    depths well past the clamp, and with finite gradients for any input.
    """
    shifted = ad.mul(ad.sub(z, ad.constant(np.float32(z_min))), ad.constant(np.float32(beta)))
    return ad.add(ad.constant(np.float32(z_min)),
                  ad.div(ad.softplus(shifted), ad.constant(np.float32(beta))))


def project_diff(pose, cams: CameraArrays, mode=PERSPECTIVE, z_min=Z_MIN_MM):
    """Differentiable batched projection of [B,J,3] Tensors to [B,J,2] pixels."""
    cam_pts = ad.add(ad.bmm(pose, ad.constant(cams.r_t)), ad.constant(cams.t))
    x = ad.slice_axis(cam_pts, 2, 0, 1)
    y = ad.slice_axis(cam_pts, 2, 1, 2)
    z = ad.slice_axis(cam_pts, 2, 2, 3)
    fx, fy = ad.constant(cams.fx), ad.constant(cams.fy)
    cx, cy = ad.constant(cams.cx), ad.constant(cams.cy)
    if mode == PERSPECTIVE:
        z = soft_clamp_depth(z, z_min)
        u = ad.add(ad.mul(fx, ad.div(x, z)), cx)
        v = ad.add(ad.mul(fy, ad.div(y, z)), cy)
    elif mode == AFFINE:
        u = ad.add(ad.mul(fx, x), ad.mul(cx, z))
        v = ad.add(ad.mul(fy, y), ad.mul(cy, z))
    else:
        raise ContractError(f"unknown projection mode {mode!r}")
    return ad.concat([u, v], axis=2)


def center2d_diff(pixels, neck_index):
    """Subtract the projected neck so predictions match neck-centered targets."""
    neck = ad.slice_axis(pixels, 1, neck_index, neck_index + 1)
    return ad.sub(pixels, neck)


def pose2d_loss(pred, target, mask=None):
    """Mean over unmasked joints of squared pixel distance (Eq. of record).

    mask defaults to target confidence > 0; raises if nothing is visible.
    """
    p = _pose_array(pred).astype(np.float64)
    t = _pose_array(target).astype(np.float64)
    if mask is None:
        mask = (target.confidence > 0) if isinstance(target, Skeleton2D) \
            else np.ones(len(t), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise LossUndefinedError("all joints are masked; 2D pose loss undefined")
    d = ((p - t) ** 2).sum(axis=1)
    return float(d[mask].mean())


def pose2d_loss_diff(pred, target, mask):
    """Batched differentiable 2D loss: per-sample mean over visible joints,
    then mean over the batch. target [B,J,2] and mask [B,J] are constants."""
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise LossUndefinedError("a sample has every joint masked; loss undefined")
    d = ad.sub(pred, ad.constant(target))
    sq = ad.bsum(ad.mul(d, d), axis=2)
    masked = ad.mul(sq, ad.constant(mask.astype(np.float32)))
    per_sample = ad.div(ad.bsum(masked, axis=1),
                        ad.constant(counts.astype(np.float32)))
    return ad.mean(per_sample)


@dataclass
class KinematicStats:
    """Bone-vector matrix [3, n_bones] and its Gram matrix Psi = B^T B."""

    bone_matrix: np.ndarray
    psi: np.ndarray


def bone_vectors(pose, layout):
    """Bone vectors child - parent, laid out as rows [n_bones, 3]."""
    pts = _pose_array(pose)
    parents = np.array([p for p, _ in layout.bones])
    children = np.array([c for _, c in layout.bones])
    return pts[children] - pts[parents]


def kinematic_stats(pose, layout):
    bones = bone_vectors(pose, layout).astype(np.float64)
    b_matrix = bones.T
    return KinematicStats(bone_matrix=b_matrix.astype(np.float32),
                          psi=(b_matrix.T @ b_matrix).astype(np.float32))


def bone_selector(layout):
    """Constant [n_bones, J] matrix with +1 at child, -1 at parent."""
    sel = np.zeros((layout.n_bones, layout.n_joints), dtype=np.float32)
    for i, (p, c) in enumerate(layout.bones):
        sel[i, c] = 1.0
        sel[i, p] = -1.0
    return sel


def bone_vectors_diff(pose, selector_batch):
    """Batched bone vectors: [B,J,3] -> [B,n_bones,3] via a constant selector."""
    return ad.bmm(ad.constant(selector_batch), pose)


def psi_diff(bones):
    """Batched Psi: [B,n_bones,3] -> [B,n_bones,n_bones] Gram matrices."""
    return ad.bmm(bones, bones, tb=True)


def mpjpe_2d(pred_seq, target_seq):
    """Mean per-joint Euclidean pixel distance over a sequence of 2D poses."""
    pred = [_pose_array(p) for p in pred_seq]
    target = [_pose_array(t) for t in target_seq]
    if len(pred) != len(target):
        raise ContractError(f"sequence lengths differ: {len(pred)} vs {len(target)}")
    if len(pred) == 0:
        raise ContractError("MPJPE of an empty sequence is undefined")
    dists = [np.linalg.norm(p.astype(np.float64) - t.astype(np.float64), axis=1)
             for p, t in zip(pred, target)]
    return float(np.mean(np.concatenate(dists)))


def symmetry_error(pose, layout):
    """Mean absolute length difference between mirrored bone pairs, in mm."""
    bones = bone_vectors(pose, layout).astype(np.float64)
    lengths = np.linalg.norm(bones, axis=1)
    pairs = layout.mirrored_bones()
    if not pairs:
        return 0.0
    return float(np.mean([abs(lengths[i] - lengths[j]) for i, j in pairs]))
