"""Autoregressive multi-step inference.

Each predicted 3D pose is projected through the sequence camera, re-centered
at the neck, and pushed into the sliding history window together with the
argmax action; object labels stay fixed to the initial set. A projection
failure mid-rollout truncates the result and annotates the failing step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ProjectionError
from .forecaster import featurize_history
from .geometry import PERSPECTIVE, project
from .skeleton import (ActionLabel, HistoryStep, Skeleton2D, Skeleton3D,
                       center_at_neck)

ZERO_NOISE = "zero"
RESAMPLE_NOISE = "resample"


@dataclass
class RolloutStep:
    action: ActionLabel
    pose3d: Skeleton3D
    pose2d: Skeleton2D
    logits: np.ndarray


@dataclass
class RolloutResult:
    steps: list
    error: dict = None

    @property
    def actions(self):
        return [s.action.index for s in self.steps]


def _draw_noise(policy, rng, dim):
    if isinstance(policy, np.ndarray):
        return policy.reshape(1, dim).astype(np.float32)
    if policy == ZERO_NOISE:
        return np.zeros((1, dim), dtype=np.float32)
    if policy == RESAMPLE_NOISE:
        if rng is None:
            raise ContractError("resample noise policy needs an rng")
        return rng.standard_normal((1, dim)).astype(np.float32)
    raise ContractError(f"unknown noise policy {policy!r}")


def _pick_action(logits, sample_actions, temperature, rng):
    if not sample_actions:
        return int(np.argmax(logits))  # argmax breaks ties at the lowest index
    if rng is None:
        raise ContractError("sampled action selection needs an rng")
    z = (logits.astype(np.float64) - logits.max()) / max(temperature, 1e-6)
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def rollout(model, history, camera, steps, noise=RESAMPLE_NOISE, rng=None,
            sample_actions=False, temperature=1.0, projection=PERSPECTIVE):
    """Forecast `steps` future (action, 3D pose, projected 2D pose) triples.

    history: N HistoryStep with neck-centered 2D poses. The window slides and
    never grows; deterministic given parameters, history, and noise policy.
    """
    if steps < 1:
        raise ContractError(f"rollout needs at least one step, got {steps}")
    cfg = model.config
    if len(history) != cfg.n_history:
        raise ContractError(f"history length {len(history)} != model window {cfg.n_history}")
    window = list(history)
    objects = tuple(sorted(set(o for step in window for o in step.objects)))
    out = []
    for k in range(steps):
        pose_hist, action_hist, object_arr = featurize_history([window], cfg)
        noise_vec = _draw_noise(noise, rng, cfg.noise_dim)
        logits_t, pose_t = model.forward_batch(pose_hist, action_hist, object_arr, noise_vec)
        logits = logits_t.data[0].copy()
        pose3d = Skeleton3D(pose_t.data[0])
        action = ActionLabel(_pick_action(logits, sample_actions, temperature, rng),
                             cfg.n_actions)
        try:
            pixels = project(pose3d, camera, mode=projection)
        except ProjectionError as exc:
            return RolloutResult(steps=out, error={"step": k, "message": str(exc)})
        pose2d = center_at_neck(Skeleton2D(pixels), model.layout.neck)
        out.append(RolloutStep(action=action, pose3d=pose3d, pose2d=pose2d,
                               logits=logits))
        window = window[1:] + [HistoryStep(pose2d=pose2d, action=action, objects=objects)]
    return RolloutResult(steps=out)


def rollout_record(sequence_id, result, action_names):
    """JSON-ready dict for one sequence's rollout."""
    record = {
        "sequence_id": sequence_id,
        "steps": [
            {
                "action_id": s.action.index,
                "action_name": action_names[s.action.index],
                "pose3d_mm": s.pose3d.joints.tolist(),
                "pose2d_px": s.pose2d.joints.tolist(),
                "action_logits": s.logits.tolist(),
            }
            for s in result.steps
        ],
    }
    if result.error is not None:
        record["error"] = result.error
    return record
