"""Metric suite: top-k action accuracy, MPJPE, classifier-based 3D pose
quality, bone symmetry, and the statistical pose/action baselines.

The quality metric trains a small binary classifier (real vs generated 3D
poses) once and reports 1 - held-out accuracy per evaluated pool: 1.0 means
the pools are indistinguishable, 0.0 trivially separable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .errors import ContractError
from .geometry import bone_vectors, mpjpe_2d, symmetry_error
from .nn import MLP, Adam
from .training import one_hot_rows, softmax_cross_entropy, topk_hits

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Action accuracy.
# ---------------------------------------------------------------------------


def topk_accuracy(logit_seqs, gt_seqs, k):
    """Mean over sequences of the per-sequence mean top-k hit rate."""
    if len(logit_seqs) != len(gt_seqs):
        raise ContractError("logit and ground-truth sequence counts differ")
    if not logit_seqs:
        raise ContractError("top-k accuracy of an empty set is undefined")
    per_seq = []
    for logits, gt in zip(logit_seqs, gt_seqs):
        logits = np.asarray(logits, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.int64)
        if len(logits) != len(gt):
            raise ContractError("sequence lengths differ between logits and labels")
        if len(logits) == 0:
            continue
        if k > logits.shape[1]:
            raise ContractError(f"k={k} exceeds the {logits.shape[1]}-action vocabulary")
        per_seq.append(float(topk_hits(logits, gt, k).mean()))
    if not per_seq:
        raise ContractError("top-k accuracy of an empty set is undefined")
    return float(np.mean(per_seq))


def per_step_accuracy(logit_seqs, gt_seqs, k=1):
    """Top-k accuracy at each rollout step index (sequences may differ in length)."""
    max_len = max((len(g) for g in gt_seqs), default=0)
    hits = [[] for _ in range(max_len)]
    for logits, gt in zip(logit_seqs, gt_seqs):
        logits = np.asarray(logits, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.int64)
        if len(gt) == 0:
            continue
        row = topk_hits(logits, gt, k)
        for i, h in enumerate(row):
            hits[i].append(bool(h))
    return [float(np.mean(h)) if h else float("nan") for h in hits]


def accuracy_curve_csv(per_step):
    lines = ["step,accuracy"]
    for i, acc in enumerate(per_step, start=1):
        lines.append(f"{i},{acc:.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Statistical baselines.
# ---------------------------------------------------------------------------


def zero_velocity_baseline(history_poses, steps):
    """Repeat the last observed 2D pose for every future step."""
    if len(history_poses) == 0:
        raise ContractError("zero-velocity baseline needs at least one observed pose")
    last = np.asarray(history_poses[-1], dtype=np.float32)
    return np.repeat(last[None], steps, axis=0)


def train_average_baseline(target_poses):
    """Arithmetic mean of the training target 2D poses."""
    arr = np.asarray(target_poses, dtype=np.float64)
    if arr.size == 0:
        raise ContractError("train-average baseline needs a non-empty training set")
    return arr.mean(axis=0).astype(np.float32)


def repeat_last_action_baseline(history_actions, steps):
    """Repeat the most recent observed action label."""
    if len(history_actions) == 0:
        raise ContractError("repeat-last baseline needs at least one observed action")
    return [int(history_actions[-1])] * steps


def most_common_action_baseline(train_actions, steps):
    """The modal training action (ties to the lowest index), repeated."""
    arr = np.asarray(train_actions, dtype=np.int64)
    if arr.size == 0:
        raise ContractError("most-common baseline needs a non-empty training set")
    return [int(np.bincount(arr).argmax())] * steps


# ---------------------------------------------------------------------------
# Classifier-based quality.
# ---------------------------------------------------------------------------


@dataclass
class QualityConfig:
    hidden: tuple = (64, 64)
    slope: float = 0.2
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 256
    train_frac: float = 0.8
    min_pool_part: int = 5


def pose_features(poses, layout):
    """Classifier input: neck-centered flattened joints plus bone lengths."""
    poses = np.asarray(poses, dtype=np.float32)
    centered = poses - poses[:, layout.neck:layout.neck + 1, :]
    lengths = np.stack([np.linalg.norm(bone_vectors(p, layout), axis=1)
                        for p in centered]).astype(np.float32)
    return np.concatenate([centered.reshape(len(poses), -1), lengths], axis=1)


def _split_pool(features, rng, frac, min_part, what):
    n = len(features)
    n_train = int(round(frac * n))
    if n_train < min_part or n - n_train < min_part:
        raise ContractError(
            f"{what} pool of {n} poses is too small for a {frac:.0%} split")
    order = rng.permutation(n)
    return features[order[:n_train]], features[order[n_train:]]


def _train_classifier(x_train, y_train, seed, cfg):
    rng = np.random.default_rng(seed)
    model = MLP([x_train.shape[1], *cfg.hidden, 2], rng, "quality", cfg.slope)
    opt = Adam(model.parameters(), lr=cfg.lr)
    onehot = one_hot_rows(y_train, 2)
    n = len(x_train)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            with Tape() as tape:
                logits = model(ad.constant(x_train[idx]))
                loss = softmax_cross_entropy(logits, onehot[idx])
                opt.zero_grad()
                ad.backward(tape, loss, model.parameters())
            opt.step()
    return model


def _predict(model, x):
    return np.argmax(model(ad.constant(x)).data, axis=1)


def quality_across_methods(real, fakes, layout, seed=0, cfg=None):
    """Train the real-vs-fake classifier once and score every fake pool.

    real: [P,J,3] database poses; fakes: dict name -> [Q,J,3] generated
    poses. Returns dict name -> quality, where quality is 1 minus the
    balanced held-out accuracy against that method's fakes.
    """
    cfg = cfg or QualityConfig()
    if len(real) == 0 or not fakes or any(len(f) == 0 for f in fakes.values()):
        raise ContractError("quality metric needs non-empty real and fake pools")
    rng = np.random.default_rng(seed)
    real_train, real_held = _split_pool(pose_features(real, layout), rng,
                                        cfg.train_frac, cfg.min_pool_part, "real")
    fake_parts = {
        name: _split_pool(pose_features(pool, layout), rng, cfg.train_frac,
                          cfg.min_pool_part, f"fake[{name}]")
        for name, pool in fakes.items()
    }
    fake_train = np.concatenate([tr for tr, _ in fake_parts.values()])
    n_per_class = min(len(real_train), len(fake_train))
    real_sub = real_train[rng.permutation(len(real_train))[:n_per_class]]
    fake_sub = fake_train[rng.permutation(len(fake_train))[:n_per_class]]
    x = np.concatenate([real_sub, fake_sub])
    y = np.concatenate([np.ones(n_per_class, np.int64), np.zeros(n_per_class, np.int64)])
    mu, sigma = x.mean(axis=0), x.std(axis=0) + 1e-6
    model = _train_classifier(((x - mu) / sigma).astype(np.float32), y, seed, cfg)

    acc_real = float((_predict(model, ((real_held - mu) / sigma).astype(np.float32)) == 1).mean())
    out = {}
    for name, (_, held) in fake_parts.items():
        acc_fake = float((_predict(model, ((held - mu) / sigma).astype(np.float32)) == 0).mean())
        out[name] = 1.0 - 0.5 * (acc_real + acc_fake)
    return out


def quality_metric(real, fake, layout, seed=0, cfg=None):
    """Pairwise quality of one fake pool against one real pool."""
    return quality_across_methods(real, {"pool": fake}, layout, seed, cfg)["pool"]


def symmetry_over_pool(poses, layout):
    return float(np.mean([symmetry_error(p, layout) for p in np.asarray(poses)]))


# ---------------------------------------------------------------------------
# Rollout evaluation against a dataset split.
# ---------------------------------------------------------------------------


def evaluate_rollouts(records, dataset, split, n_history, seed=0,
                      quality_pool=5000, quality_cfg=None):
    """Score rollout records against a split's ground-truth futures.

    Each record is compared with the steps following its sequence's first
    observation window; sequences are truncated to the shorter of prediction
    and ground truth. Returns the report dict (quality is null when the
    predicted pool is too small to split).
    """
    by_id = {r["sequence_id"]: r for r in records}
    logit_seqs, gt_seqs = [], []
    pred_pixels, gt_pixels = [], []
    pred_poses3d = []
    for sid in dataset.manifest.splits[split]:
        record = by_id.get(sid)
        if record is None:
            continue
        steps = dataset.load_sequence(sid)
        future = steps[n_history:]
        m = min(len(record["steps"]), len(future))
        if m == 0:
            continue
        logit_seqs.append(np.asarray(
            [s["action_logits"] for s in record["steps"][:m]], dtype=np.float64))
        gt_seqs.append(np.asarray([s.action.index for s in future[:m]], dtype=np.int64))
        for k in range(m):
            pred_pixels.append(np.asarray(record["steps"][k]["pose2d_px"], dtype=np.float64))
            gt_pixels.append(future[k].pose2d.joints)
            pred_poses3d.append(np.asarray(record["steps"][k]["pose3d_mm"], dtype=np.float32))
    if not logit_seqs:
        raise ContractError(f"no rollouts matched split {split!r}")

    per_step = per_step_accuracy(logit_seqs, gt_seqs)
    report = {
        "mpjpe_px": mpjpe_2d(pred_pixels, gt_pixels),
        "top1": topk_accuracy(logit_seqs, gt_seqs, 1),
        "top3": topk_accuracy(logit_seqs, gt_seqs, min(3, dataset.n_actions)),
        "symmetry_mm": symmetry_over_pool(pred_poses3d, dataset.layout),
        "per_step_accuracy": per_step,
        "n_sequences": len(logit_seqs),
        "n_steps": len(pred_pixels),
    }
    fake_pool = np.stack(pred_poses3d)
    db = dataset.pose_database()
    k = min(quality_pool, len(fake_pool), len(db))
    rng = np.random.default_rng(seed)
    try:
        report["quality"] = quality_metric(
            db[rng.permutation(len(db))[:k]],
            fake_pool[rng.permutation(len(fake_pool))[:k]],
            dataset.layout, seed=seed, cfg=quality_cfg)
    except ContractError as exc:
        log.warning("quality metric skipped: %s", exc)
        report["quality"] = None
    return report
