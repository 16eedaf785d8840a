"""Combined loss assembly, alternating generator/critic training, telemetry.

The total generator objective is a weighted sum of the action cross-entropy,
the projected 2D pose loss, and the adversarial 3D term. Weights of zero
drop a term entirely (its parameters then receive no gradient at all).
"""

from __future__ import annotations

import datetime
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .critic import Critic, CriticConfig, adversarial_losses, clip_weights
from .errors import ContractError, TrainingAbort, VocabularyError
from .forecaster import Batch, Forecaster, ForecasterConfig, featurize_samples
from .geometry import (CameraArrays, center2d_diff, pose2d_loss_diff, project_diff,
                       symmetry_error)
from .nn import Adam, save_adam
from .skeleton import ActionLabel

log = logging.getLogger(__name__)

RNG_STREAMS = ("generator_init", "critic_init", "batching", "noise",
               "real_sampling", "gp", "pool")


def rng_streams(seed):
    """Named, device-independent RNG streams derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(RNG_STREAMS, children)}


@dataclass
class TrainConfig:
    lambda_action: float = 1e6
    lambda_pose2d: float = 1.0
    lambda_adv3d: float = 1.0
    batch_size: int = 256
    accum_steps: int = 1
    lr: float = 1e-4
    weight_decay: float = 1e-3
    epochs: int = 100
    seed: int = 0
    n_critic: int = 1
    lipschitz: str = "gp"        # "gp" or "clip:<limit>"
    gp_weight: float = 10.0
    projection: str = "perspective"
    patience: int = 20
    early_stop: bool = True
    checkpoint_every: int = 10
    fake_pool_per_checkpoint: int = 512

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def clip_limit(self):
        """None in gradient-penalty mode, else the weight clip bound."""
        if self.lipschitz == "gp":
            return None
        if self.lipschitz.startswith("clip:"):
            return float(self.lipschitz.split(":", 1)[1])
        raise ContractError(f"lipschitz must be 'gp' or 'clip:<limit>', got {self.lipschitz!r}")


# ---------------------------------------------------------------------------
# Losses.
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits, onehot):
    """Mean softmax cross-entropy of a [B,C] logits Tensor vs constant one-hots."""
    shift = ad.constant(logits.data.max(axis=1, keepdims=True))
    z = ad.sub(logits, shift)
    lse = ad.log(ad.bsum(ad.exp(z), axis=1, keepdims=True))
    log_probs = ad.sub(z, lse)
    nll = ad.neg(ad.bsum(ad.mul(log_probs, ad.constant(onehot)), axis=1))
    return ad.mean(nll)


def action_loss(logits, target):
    """Scalar cross-entropy for one logit vector and a target label."""
    logits = np.asarray(logits, dtype=np.float64)
    index = target.index if isinstance(target, ActionLabel) else int(target)
    if not 0 <= index < len(logits):
        raise VocabularyError(f"target action {index} outside vocabulary of size {len(logits)}")
    z = logits - logits.max()
    return float(np.log(np.exp(z).sum()) - z[index])


def one_hot_rows(indices, n_classes):
    return np.eye(n_classes, dtype=np.float32)[np.asarray(indices, dtype=np.int64)]


def generator_loss(model, critic, batch: Batch, cams: CameraArrays, noise, cfg: TrainConfig):
    """Assemble the weighted loss on the active tape.

    Returns (total Tensor, breakdown dict of unweighted term values, outputs).
    Terms with zero weight are skipped, so their parameter groups see no
    gradient whatsoever.
    """
    logits, pose = model.forward_batch(batch.pose_hist, batch.action_hist,
                                       batch.objects, noise)
    total = None
    breakdown = {"action": 0.0, "pose2d": 0.0, "adv3d": 0.0}

    def accumulate(term, weight):
        weighted = ad.mul(term, ad.constant(np.float32(weight)))
        return weighted if total is None else ad.add(total, weighted)

    if cfg.lambda_action > 0:
        ce = softmax_cross_entropy(logits, one_hot_rows(batch.target_action,
                                                        model.config.n_actions))
        breakdown["action"] = float(ce.data)
        total = accumulate(ce, cfg.lambda_action)
    if cfg.lambda_pose2d > 0:
        projected = project_diff(pose, cams, mode=cfg.projection)
        centered = center2d_diff(projected, model.layout.neck)
        l2d = pose2d_loss_diff(centered, batch.target_pose2d, batch.target_mask)
        breakdown["pose2d"] = float(l2d.data)
        total = accumulate(l2d, cfg.lambda_pose2d)
    if cfg.lambda_adv3d > 0:
        if critic is None:
            raise ContractError("adversarial loss enabled but no critic given")
        adv = ad.neg(ad.mean(critic.score(pose)))
        breakdown["adv3d"] = float(adv.data)
        total = accumulate(adv, cfg.lambda_adv3d)
    if total is None:
        raise ContractError("all loss weights are zero; nothing to optimize")
    breakdown["total"] = float(total.data)
    return total, breakdown, (logits, pose)


# ---------------------------------------------------------------------------
# Validation.
# ---------------------------------------------------------------------------


def topk_hits(logits, targets, k):
    """Per-row indicator that the target is among the k highest scores."""
    target_scores = logits[np.arange(len(logits)), targets]
    rank = (logits > target_scores[:, None]).sum(axis=1)
    return rank < k


def evaluate_model(model, batch: Batch, cams: CameraArrays, projection="perspective",
                   critic=None, db_sample=None, chunk=1024):
    """Validation metrics with zero noise: top-1/3, MPJPE px, symmetry mm,
    critic gap; also returns the predicted 3D poses."""
    n = batch.size
    logits = np.zeros((n, model.config.n_actions), dtype=np.float32)
    poses = np.zeros((n, model.config.n_joints, 3), dtype=np.float32)
    pixels = np.zeros((n, model.config.n_joints, 2), dtype=np.float32)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        noise = np.zeros((hi - lo, model.config.noise_dim), dtype=np.float32)
        lg, ps = model.forward_batch(batch.pose_hist[lo:hi], batch.action_hist[lo:hi],
                                     batch.objects[lo:hi], noise)
        logits[lo:hi] = lg.data
        poses[lo:hi] = ps.data
        sub = CameraArrays(cams.r_t[lo:hi], cams.t[lo:hi], cams.fx[lo:hi],
                           cams.fy[lo:hi], cams.cx[lo:hi], cams.cy[lo:hi])
        projected = project_diff(ad.constant(ps.data), sub, mode=projection)
        pixels[lo:hi] = center2d_diff(projected, model.layout.neck).data
    top1 = float(topk_hits(logits, batch.target_action, 1).mean())
    top3 = float(topk_hits(logits, batch.target_action, min(3, model.config.n_actions)).mean())
    mpjpe = float(np.linalg.norm(
        pixels.astype(np.float64) - batch.target_pose2d, axis=2).mean())
    symmetry = float(np.mean([symmetry_error(p, model.layout) for p in poses]))
    out = {"top1": top1, "top3": top3, "mpjpe_px": mpjpe, "symmetry_mm": symmetry}
    if critic is not None and db_sample is not None:
        out["critic_gap"] = float(critic.score_values(db_sample).mean()
                                  - critic.score_values(poses).mean())
    else:
        out["critic_gap"] = 0.0
    return out, poses, logits


# ---------------------------------------------------------------------------
# The training loop.
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    best_checkpoint: str
    last_checkpoint: str
    critic_checkpoint: str
    metrics_path: str
    epoch_metrics_path: str
    fake_pool_path: str
    history: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_epoch: int = -1


def _index_cams(cams: CameraArrays, idx):
    return CameraArrays(np.ascontiguousarray(cams.r_t[idx]),
                        np.ascontiguousarray(cams.t[idx]),
                        np.ascontiguousarray(cams.fx[idx]),
                        np.ascontiguousarray(cams.fy[idx]),
                        np.ascontiguousarray(cams.cx[idx]),
                        np.ascontiguousarray(cams.cy[idx]))


def _index_batch(batch: Batch, idx):
    return Batch(pose_hist=batch.pose_hist[idx], action_hist=batch.action_hist[idx],
                 objects=batch.objects[idx], target_action=batch.target_action[idx],
                 target_pose2d=batch.target_pose2d[idx], target_mask=batch.target_mask[idx])


def _generate_fake(model, batch: Batch, idx, noise_rng):
    noise = noise_rng.standard_normal((len(idx), model.config.noise_dim)).astype(np.float32)
    _, pose = model.forward_batch(batch.pose_hist[idx], batch.action_hist[idx],
                                  batch.objects[idx], noise)
    return pose, noise


def train(dataset, train_cfg: TrainConfig, model_overrides=None, critic_cfg=None,
          out_dir="runs/run"):
    """Train generator (and critic) on a Dataset; returns a TrainResult.

    Raises TrainingAbort carrying the last good checkpoint if a loss goes
    non-finite, and ContractError for unusable configurations.
    """
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    streams = rng_streams(train_cfg.seed)

    overrides = dict(model_overrides or {})
    model_cfg = ForecasterConfig(n_actions=dataset.n_actions,
                                 n_objects=dataset.n_objects, **overrides)
    train_samples, _ = dataset.split_samples("train", model_cfg.n_history)
    if not train_samples:
        raise ContractError("training split produced no samples")
    val_samples, _ = dataset.split_samples("val", model_cfg.n_history)
    model = Forecaster(model_cfg, dataset.layout, streams["generator_init"])

    use_adv = train_cfg.lambda_adv3d > 0
    critic = None
    db = None
    if use_adv:
        db = dataset.pose_database()
        if len(db) == 0:
            raise ContractError("adversarial loss enabled but the 3D pose database is empty")
        critic = Critic(critic_cfg or CriticConfig(), dataset.layout, streams["critic_init"])

    gen_opt = Adam(model.parameters(), lr=train_cfg.lr,
                   weight_decay=train_cfg.weight_decay)
    critic_opt = Adam(critic.parameters(), lr=train_cfg.lr,
                      weight_decay=train_cfg.weight_decay) if critic else None
    clip_limit = train_cfg.clip_limit()
    gp_weight = 0.0 if clip_limit is not None else train_cfg.gp_weight

    full = featurize_samples(train_samples, model_cfg)
    cams = CameraArrays.from_cameras(full.cameras)
    val_full = featurize_samples(val_samples, model_cfg) if val_samples else None
    val_cams = CameraArrays.from_cameras(val_full.cameras) if val_samples else None

    metrics_path = out / "metrics.jsonl"
    epoch_metrics_path = out / "metrics_epoch.jsonl"
    fake_pool_path = out / "fake_pool.p3db"
    metrics = open(metrics_path, "w", encoding="utf-8")
    epoch_metrics = open(epoch_metrics_path, "w", encoding="utf-8")
    header = {"type": "header",
              "started_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
              "config": train_cfg.to_dict(), "model": model_cfg.to_dict()}
    metrics.write(json.dumps(header, sort_keys=True) + "\n")

    last_good = ""
    best_path = str(out / "checkpoints" / "gen_best.cpf")
    last_path = str(out / "checkpoints" / "gen_last.cpf")
    critic_path = str(out / "checkpoints" / "critic_last.cpf")
    fake_pool = []
    history = []
    best_mpjpe = np.inf
    best_epoch = -1
    step = 0
    n = len(train_samples)

    def save_snapshot(tag_path, epoch):
        model.save(tag_path, {"epoch": epoch, "train_config": train_cfg.to_dict()})
        save_adam(tag_path, gen_opt)
        if critic is not None:
            critic.save(critic_path, {"epoch": epoch})
            save_adam(critic_path, critic_opt)

    def dump_fake_pool(epoch):
        if not use_adv and train_cfg.fake_pool_per_checkpoint <= 0:
            return
        k = min(train_cfg.fake_pool_per_checkpoint, n)
        if k <= 0:
            return
        idx = streams["pool"].choice(n, size=k, replace=False)
        pose, _ = _generate_fake(model, full, idx, streams["pool"])
        fake_pool.append(pose.data.copy())

    try:
        for epoch in range(train_cfg.epochs):
            order = streams["batching"].permutation(n)
            chunks = [order[i:i + train_cfg.batch_size]
                      for i in range(0, n, train_cfg.batch_size)]
            groups = [chunks[i:i + train_cfg.accum_steps]
                      for i in range(0, len(chunks), train_cfg.accum_steps)]
            for group in groups:
                scale = 1.0 / len(group)
                info = {"w_gap": 0.0, "gp": 0.0}
                critic_loss_val = 0.0
                if use_adv:
                    for _ in range(train_cfg.n_critic):
                        critic_opt.zero_grad()
                        critic_loss_val = 0.0
                        for idx in group:
                            fake, _ = _generate_fake(model, full, idx, streams["noise"])
                            real = db[streams["real_sampling"].integers(0, len(db), size=len(idx))]
                            with Tape() as tape:
                                closs, _, info = adversarial_losses(
                                    tape, critic, real, fake.data,
                                    gp_weight=gp_weight, rng=streams["gp"])
                                scaled = ad.mul(closs, ad.constant(np.float32(scale)))
                                ad.backward(tape, scaled, critic.parameters())
                            critic_loss_val += float(closs.data) * scale
                        if not np.isfinite(critic_loss_val):
                            raise TrainingAbort(
                                f"critic loss became non-finite at step {step}",
                                last_checkpoint=last_good)
                        critic_opt.step()
                        if clip_limit is not None:
                            clip_weights(critic, clip_limit)

                gen_opt.zero_grad()
                agg = {"action": 0.0, "pose2d": 0.0, "adv3d": 0.0, "total": 0.0}
                for idx in group:
                    sub = _index_batch(full, idx)
                    sub_cams = _index_cams(cams, idx)
                    noise = streams["noise"].standard_normal(
                        (len(idx), model_cfg.noise_dim)).astype(np.float32)
                    with Tape() as tape:
                        total, breakdown, _ = generator_loss(
                            model, critic, sub, sub_cams, noise, train_cfg)
                        scaled = ad.mul(total, ad.constant(np.float32(scale)))
                        ad.backward(tape, scaled, model.parameters())
                    for key in agg:
                        agg[key] += breakdown.get(key, 0.0) * scale
                if not np.isfinite(agg["total"]):
                    raise TrainingAbort(f"generator loss became non-finite at step {step}",
                                        last_checkpoint=last_good)
                gen_opt.step()
                step += 1
                metrics.write(json.dumps({
                    "step": step, "epoch": epoch,
                    "L_action": agg["action"], "L_pose2d": agg["pose2d"],
                    "L_adv3d": agg["adv3d"], "L_critic": critic_loss_val,
                    "gp": info["gp"], "lr": train_cfg.lr}, sort_keys=True) + "\n")

            record = {"epoch": epoch}
            if val_full is not None and val_full.size:
                db_sample = None
                if critic is not None:
                    k = min(len(db), 1024)
                    db_sample = db[:k]
                stats, _, _ = evaluate_model(model, val_full, val_cams,
                                             projection=train_cfg.projection,
                                             critic=critic, db_sample=db_sample)
                record.update(stats)
            history.append(record)
            epoch_metrics.write(json.dumps(record, sort_keys=True) + "\n")
            epoch_metrics.flush()

            is_checkpoint_epoch = ((epoch + 1) % train_cfg.checkpoint_every == 0
                                   or epoch == train_cfg.epochs - 1)
            if is_checkpoint_epoch:
                save_snapshot(last_path, epoch)
                last_good = last_path
                dump_fake_pool(epoch)
            if "mpjpe_px" in record and record["mpjpe_px"] < best_mpjpe:
                best_mpjpe = record["mpjpe_px"]
                best_epoch = epoch
                save_snapshot(best_path, epoch)
                if not is_checkpoint_epoch:
                    last_good = best_path
            if (train_cfg.early_stop and "mpjpe_px" in record
                    and epoch - best_epoch >= train_cfg.patience):
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    finally:
        metrics.close()
        epoch_metrics.close()

    if best_epoch < 0:
        save_snapshot(best_path, train_cfg.epochs - 1)
        best_epoch = train_cfg.epochs - 1
    save_snapshot(last_path, train_cfg.epochs - 1)
    if fake_pool:
        from .data import save_pose_db

        save_pose_db(fake_pool_path, np.concatenate(fake_pool, axis=0))
    return TrainResult(
        best_checkpoint=best_path, last_checkpoint=last_path,
        critic_checkpoint=critic_path if critic is not None else "",
        metrics_path=str(metrics_path), epoch_metrics_path=str(epoch_metrics_path),
        fake_pool_path=str(fake_pool_path) if fake_pool else "",
        history=history, best_epoch=best_epoch, stopped_epoch=len(history) - 1)
