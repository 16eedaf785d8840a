"""The generator: history encoders, fusion trunk, action and 3D pose decoders.

Pose history goes through a single linear layer plus three residual blocks,
label histories through small MLPs; the concatenated features (plus a noise
vector) are fused into a latent code that two parallel MLP heads decode into
next-action logits and a neck-centered 3D pose in millimeters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .nn import MLP, Linear, ResidualBlock, load_params, save_params
from .skeleton import JointLayout, Skeleton3D, one_hot, upper_body_layout


@dataclass
class ForecasterConfig:
    n_actions: int
    n_objects: int
    n_history: int = 3
    n_joints: int = 9
    latent_dim: int = 512
    hidden_dim: int = 512
    noise_dim: int = 32
    slope: float = 0.2
    # Input pixels and output millimeters are rescaled so activations stay O(1).
    pose2d_scale_px: float = 100.0
    pose_out_scale_mm: float = 1000.0

    @property
    def label_hidden(self):
        return max(32, self.hidden_dim // 4)

    def to_dict(self):
        return {
            "n_actions": self.n_actions, "n_objects": self.n_objects,
            "n_history": self.n_history, "n_joints": self.n_joints,
            "latent_dim": self.latent_dim, "hidden_dim": self.hidden_dim,
            "noise_dim": self.noise_dim, "slope": self.slope,
            "pose2d_scale_px": self.pose2d_scale_px,
            "pose_out_scale_mm": self.pose_out_scale_mm,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ForecasterOutput:
    action_logits: np.ndarray
    pose3d: Skeleton3D


@dataclass
class Batch:
    """Featurized samples ready for a batched forward pass."""

    pose_hist: np.ndarray      # [B, N, J, 2] neck-centered pixels
    action_hist: np.ndarray    # [B, N, n_actions] one-hots
    objects: np.ndarray        # [B, n_objects] multi-hot
    target_action: np.ndarray  # [B] int indices
    target_pose2d: np.ndarray  # [B, J, 2] neck-centered pixels
    target_mask: np.ndarray    # [B, J] visibility from target confidence
    cameras: list = field(default_factory=list)

    @property
    def size(self):
        return len(self.pose_hist)


def featurize_history(histories, config):
    """Stack lists of HistoryStep into (pose_hist, action_hist, objects) arrays."""
    n, j = config.n_history, config.n_joints
    b = len(histories)
    pose_hist = np.zeros((b, n, j, 2), dtype=np.float32)
    action_hist = np.zeros((b, n, config.n_actions), dtype=np.float32)
    objects = np.zeros((b, max(config.n_objects, 0)), dtype=np.float32)
    for i, history in enumerate(histories):
        if len(history) != n:
            raise ShapeError(f"history has window {len(history)}, model expects {n}")
        for k, step in enumerate(history):
            pose_hist[i, k] = step.pose2d.joints
            action_hist[i, k] = one_hot(step.action.index, config.n_actions)
            for obj in step.objects:
                if config.n_objects > 0:
                    objects[i, obj] = 1.0
    return pose_hist, action_hist, objects


def featurize_samples(samples, config):
    """Stack SequenceSamples into the dense arrays a forward pass consumes."""
    b, j = len(samples), config.n_joints
    pose_hist, action_hist, objects = featurize_history(
        [s.history for s in samples], config)
    target_action = np.zeros(b, dtype=np.int64)
    target_pose2d = np.zeros((b, j, 2), dtype=np.float32)
    target_mask = np.zeros((b, j), dtype=np.float32)
    cameras = []
    for i, s in enumerate(samples):
        target_action[i] = s.target_action.index
        target_pose2d[i] = s.target_pose2d.joints
        target_mask[i] = (s.target_pose2d.confidence > 0).astype(np.float32)
        cameras.append(s.camera)
    return Batch(pose_hist, action_hist, objects, target_action, target_pose2d,
                 target_mask, cameras)


class Forecaster:
    """Joint action-and-pose generator."""

    def __init__(self, config: ForecasterConfig, layout: JointLayout, rng):
        if layout.n_joints != config.n_joints:
            raise ShapeError(f"layout has {layout.n_joints} joints, config says {config.n_joints}")
        self.config = config
        self.layout = layout
        c = config
        lab = c.label_hidden
        pose_in_dim = c.n_history * c.n_joints * 2
        self.pose_in = Linear(pose_in_dim, c.hidden_dim, rng, "pose_enc.fc_in", c.slope)
        self.pose_blocks = [
            ResidualBlock(c.hidden_dim, rng, f"pose_enc.res{i}", c.slope) for i in range(3)
        ]
        self.action_enc = MLP([c.n_history * c.n_actions, lab, lab], rng, "action_enc", c.slope)
        self.object_enc = (
            MLP([c.n_objects, lab, lab], rng, "object_enc", c.slope) if c.n_objects > 0 else None
        )
        fusion_in = c.hidden_dim + lab + (lab if self.object_enc else 0) + c.noise_dim
        self.fusion = MLP([fusion_in, c.latent_dim, c.latent_dim], rng, "fusion", c.slope)
        self.action_dec = MLP([c.latent_dim, c.latent_dim, c.n_actions], rng, "action_dec", c.slope)
        self.pose_dec = MLP([c.latent_dim, c.latent_dim, c.n_joints * 3], rng, "pose_dec", c.slope)
        # A freshly initialized net must emit near-neck poses: full-scale head
        # weights would put joints meters away, often behind the camera. Small
        # but nonzero so gradients still reach every pose-decoder layer.
        self.pose_dec.layers[-1].weight.data *= np.float32(0.02)

    def parameter_groups(self):
        groups = {
            "pose_encoder": self.pose_in.parameters()
            + [p for blk in self.pose_blocks for p in blk.parameters()],
            "action_encoder": self.action_enc.parameters(),
            "fusion": self.fusion.parameters(),
            "action_decoder": self.action_dec.parameters(),
            "pose_decoder": self.pose_dec.parameters(),
        }
        if self.object_enc is not None:
            groups["object_encoder"] = self.object_enc.parameters()
        return groups

    def parameters(self):
        return [p for group in self.parameter_groups().values() for p in group]

    def encode_pose_history(self, pose_hist):
        """[B,N,J,2] pixels -> [B,hidden] feature. Flattened, so order-sensitive."""
        c = self.config
        b = pose_hist.shape[0] if isinstance(pose_hist, np.ndarray) else pose_hist.shape[0]
        x = ad.constant(np.asarray(pose_hist, dtype=np.float32) / c.pose2d_scale_px) \
            if not isinstance(pose_hist, Tensor) else pose_hist
        x = ad.reshape(x, (b, c.n_history * c.n_joints * 2))
        feat = self.pose_in(x)
        for blk in self.pose_blocks:
            feat = blk(feat)
        return feat

    def encode_labels(self, action_hist, objects):
        """One-hot histories -> concatenated label features [B, lab(+lab)]."""
        c = self.config
        b = action_hist.shape[0]
        a = ad.constant(np.asarray(action_hist, dtype=np.float32))
        af = self.action_enc(ad.reshape(a, (b, c.n_history * c.n_actions)))
        if self.object_enc is None:
            return af
        of = self.object_enc(ad.constant(np.asarray(objects, dtype=np.float32)))
        return ad.concat([af, of], axis=1)

    def forward_batch(self, pose_hist, action_hist, objects, noise):
        """Batched forward. Returns (logits Tensor [B,Na], pose Tensor [B,J,3] mm)."""
        c = self.config
        b = pose_hist.shape[0]
        if noise.shape != (b, c.noise_dim):
            raise ShapeError(f"noise must be [{b},{c.noise_dim}], got {noise.shape}")
        pf = self.encode_pose_history(pose_hist)
        lf = self.encode_labels(action_hist, objects)
        z = self.fusion(ad.concat([pf, lf, ad.constant(noise)], axis=1))
        h = ad.leaky_relu(z, c.slope)
        logits = self.action_dec(h)
        pose = ad.mul(self.pose_dec(h), ad.constant(np.float32(c.pose_out_scale_mm)))
        return logits, ad.reshape(pose, (b, c.n_joints, 3))

    def forward(self, sample, noise=None):
        """Single-sample convenience wrapper; zero noise when none given."""
        c = self.config
        batch = featurize_samples([sample], c)
        if noise is None:
            noise = np.zeros((1, c.noise_dim), dtype=np.float32)
        else:
            noise = np.asarray(noise, dtype=np.float32).reshape(1, c.noise_dim)
        logits, pose = self.forward_batch(batch.pose_hist, batch.action_hist,
                                          batch.objects, noise)
        return ForecasterOutput(action_logits=logits.data[0].copy(),
                                pose3d=Skeleton3D(pose.data[0]))

    def save(self, path, extra_metadata=None):
        meta = {"kind": "forecaster", "config": self.config.to_dict(),
                "layout": self.layout.to_dict()}
        meta.update(extra_metadata or {})
        save_params(path, self.parameters(), meta)

    @classmethod
    def from_checkpoint(cls, path):
        from .nn import load_checkpoint

        _, meta = load_checkpoint(path)
        config = ForecasterConfig.from_dict(meta["config"])
        layout = JointLayout.from_dict(meta["layout"]) if "layout" in meta \
            else upper_body_layout()
        model = cls(config, layout, np.random.default_rng(0))
        load_params(path, model.parameters())
        return model, meta
