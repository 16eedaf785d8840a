"""Wasserstein critic over 3D poses and their kinematic statistics.

Two parallel branches: four linear layers on the raw (scaled) joints, three
on the flattened upper triangle of the Gram matrix Psi = B^T B of bone
vectors, merged by two more linear layers into a single realness score.
Higher scores mean "judged more real".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .geometry import bone_selector, bone_vectors_diff, psi_diff
from .nn import MLP, load_params, save_params
from .skeleton import JointLayout, upper_body_layout


@dataclass
class CriticConfig:
    joint_widths: tuple = (256, 256, 256, 256)
    kin_widths: tuple = (128, 128, 128)
    merge_width: int = 256
    slope: float = 0.2
    gp_weight: float = 10.0
    # Millimeter inputs are scaled to meters so Psi entries stay O(1).
    input_scale: float = 1e-3

    def to_dict(self):
        return {"joint_widths": list(self.joint_widths),
                "kin_widths": list(self.kin_widths),
                "merge_width": self.merge_width, "slope": self.slope,
                "gp_weight": self.gp_weight, "input_scale": self.input_scale}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["joint_widths"] = tuple(d["joint_widths"])
        d["kin_widths"] = tuple(d["kin_widths"])
        return cls(**d)


def _upper_tri_selector(n):
    """[n*n, n(n+1)/2] constant picking the upper triangle of a flattened matrix."""
    cols = [(i, j) for i in range(n) for j in range(i, n)]
    sel = np.zeros((n * n, len(cols)), dtype=np.float32)
    for k, (i, j) in enumerate(cols):
        sel[i * n + j, k] = 1.0
    return sel


class Critic:
    def __init__(self, config: CriticConfig, layout: JointLayout, rng):
        self.config = config
        self.layout = layout
        j, nb = layout.n_joints, layout.n_bones
        self.bone_sel = bone_selector(layout)
        self.tri_sel = _upper_tri_selector(nb)
        n_tri = self.tri_sel.shape[1]
        c = config
        self.joint_mlp = MLP([j * 3, *c.joint_widths], rng, "critic.joint", c.slope)
        self.kin_mlp = MLP([n_tri, *c.kin_widths], rng, "critic.kin", c.slope)
        merge_in = c.joint_widths[-1] + c.kin_widths[-1]
        self.merge = MLP([merge_in, c.merge_width, 1], rng, "critic.merge", c.slope)

    def parameters(self):
        return self.joint_mlp.parameters() + self.kin_mlp.parameters() + self.merge.parameters()

    def score(self, pose):
        """[B,J,3] mm poses (Tensor or array) -> [B,1] realness scores."""
        if not isinstance(pose, Tensor):
            pose = ad.constant(np.asarray(pose, dtype=np.float32))
        if not np.all(np.isfinite(pose.data)):
            raise ContractError("critic input pose contains non-finite values")
        scaled = ad.mul(pose, ad.constant(np.float32(self.config.input_scale)))
        return self.score_scaled(scaled)

    def score_scaled(self, scaled):
        """Score poses already in the critic's internal (meter) units.

        The gradient penalty lives in this space: constraining the slope in
        raw millimeters would force internal gradients of ~1/input_scale and
        blow the weights up.
        """
        b, j = scaled.shape[0], self.layout.n_joints
        jf = ad.leaky_relu(self.joint_mlp(ad.reshape(scaled, (b, j * 3))), self.config.slope)
        sel = np.broadcast_to(self.bone_sel, (b, *self.bone_sel.shape))
        bones = bone_vectors_diff(scaled, np.ascontiguousarray(sel))
        psi = psi_diff(bones)
        tri = ad.matmul(ad.reshape(psi, (b, psi.shape[1] * psi.shape[2])),
                        ad.constant(self.tri_sel))
        kf = ad.leaky_relu(self.kin_mlp(tri), self.config.slope)
        return self.merge(ad.concat([jf, kf], axis=1))

    def score_values(self, poses):
        """Plain numpy scores for evaluation, one float per pose."""
        return self.score(np.asarray(poses, dtype=np.float32)).data[:, 0].copy()

    def save(self, path, extra_metadata=None):
        meta = {"kind": "critic", "config": self.config.to_dict(),
                "layout": self.layout.to_dict()}
        meta.update(extra_metadata or {})
        save_params(path, self.parameters(), meta)

    @classmethod
    def from_checkpoint(cls, path):
        from .nn import load_checkpoint

        _, meta = load_checkpoint(path)
        config = CriticConfig.from_dict(meta["config"])
        layout = JointLayout.from_dict(meta["layout"]) if "layout" in meta \
            else upper_body_layout()
        model = cls(config, layout, np.random.default_rng(0))
        load_params(path, model.parameters())
        return model, meta


def gradient_penalty(tape, critic, real, fake, rng):
    """WGAN-GP penalty at uniform interpolates between real and fake poses.

    Interpolation and differentiation happen in the critic's scaled input
    space. Differentiating the scores w.r.t. the interpolates is recorded on
    the tape (create_graph), so the penalty trains the critic's parameters.
    """
    scale = np.float32(critic.config.input_scale)
    real = np.asarray(real, dtype=np.float32) * scale
    fake = np.asarray(fake, dtype=np.float32) * scale
    if real.shape != fake.shape:
        raise ContractError(f"real {real.shape} and fake {fake.shape} batches must match")
    b = real.shape[0]
    eps = rng.uniform(0.0, 1.0, size=(b, 1, 1)).astype(np.float32)
    interp = Tensor(eps * real + (1.0 - eps) * fake, requires_grad=True)
    scores = critic.score_scaled(interp)
    (gx,) = ad.grad(tape, ad.bsum(scores), [interp], create_graph=True)
    flat = ad.reshape(gx, (b, real.shape[1] * real.shape[2]))
    norms = ad.sqrt(ad.add(ad.bsum(ad.mul(flat, flat), axis=1),
                           ad.constant(np.float32(1e-12))))
    excess = ad.sub(norms, ad.constant(np.float32(1.0)))
    return ad.mean(ad.mul(excess, excess))


def adversarial_losses(tape, critic, real, fake, gp_weight=None, rng=None):
    """Wasserstein losses for one alternating step.

    real: [B,J,3] array of database poses. fake: generator output, either a
    graph Tensor (generator update) or an array (critic update; it is used
    detached either way for the critic side).

    Returns (critic_loss, generator_term, info) where critic_loss =
    mean(score(fake)) - mean(score(real)) + gp_weight * GP and
    generator_term = -mean(score(fake)), whose gradient reaches the
    generator only through the fake poses.
    """
    if gp_weight is None:
        gp_weight = critic.config.gp_weight
    real = np.asarray(real, dtype=np.float32)
    fake_tensor = fake if isinstance(fake, Tensor) else ad.constant(np.asarray(fake, dtype=np.float32))
    if real.shape[0] == 0 or fake_tensor.shape[0] == 0:
        raise ContractError("adversarial losses need non-empty real and fake batches")
    fake_data = fake_tensor.data

    real_scores = critic.score(real)
    fake_scores_detached = critic.score(ad.constant(fake_data))
    w_gap = ad.sub(ad.mean(fake_scores_detached), ad.mean(real_scores))
    if gp_weight > 0:
        if rng is None:
            raise ContractError("gradient penalty needs an rng for interpolates")
        gp = gradient_penalty(tape, critic, real, fake_data, rng)
        critic_loss = ad.add(w_gap, ad.mul(gp, ad.constant(np.float32(gp_weight))))
    else:
        gp = ad.constant(np.float32(0.0))
        critic_loss = w_gap

    generator_term = ad.neg(ad.mean(critic.score(fake_tensor)))
    info = {"w_gap": float(w_gap.data), "gp": float(gp.data)}
    return critic_loss, generator_term, info


def clip_weights(critic, limit):
    """Literal weight clipping as the alternative Lipschitz constraint."""
    for p in critic.parameters():
        np.clip(p.data, -limit, limit, out=p.data)
