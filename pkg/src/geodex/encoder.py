"""Paired-point-cloud geometry encoder: pretraining and the frozen feature
service.

The encoder sees the same surface sample twice, at the current orientation
and at the goal orientation, concatenated per point into a 12-wide row
(current point, current normal, goal point, goal normal).  A shared trunk
maps each row to the feature width; a coordinatewise max over points pools
them; two linear heads predict the object class and the relative rotation
(6-vector, projected onto SO(3)).  Training minimizes
cross-entropy + alpha * rotation-geodesic loss.
"""

import hashlib
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import mesh as _mesh
from . import nn, rng, rotmath
from .config import PretrainConfig
from .errors import FrozenModel, NotFrozen, ShapeMismatch

POINT_DIM = 12


@dataclass(frozen=True)
class EncoderModel:
    trunk: nn.Net         # per-point 12 -> feature width, relu throughout
    class_head: nn.Net    # feature -> n_classes logits
    rot_head: nn.Net      # feature -> 6 (Gram-Schmidt rotation parameters)
    n_classes: int
    frozen: bool = False

    @property
    def feature_dim(self):
        return self.trunk.out_dim


@dataclass(frozen=True)
class PretrainBatch:
    labels: np.ndarray        # (B,) int64
    cur_points: np.ndarray    # (B, n, 3)
    cur_normals: np.ndarray   # (B, n, 3)
    goal_points: np.ndarray   # (B, n, 3)
    goal_normals: np.ndarray  # (B, n, 3)
    targets: np.ndarray       # (B, 3, 3) relative rotations

    @property
    def size(self):
        return self.labels.shape[0]


def encoder_init(n_classes, init_rng, widths=(64, 256, 512)):
    if n_classes < 1:
        raise ShapeMismatch(f"n_classes must be >= 1, got {n_classes}")
    w1, w2, w3 = widths
    trunk = nn.net_init(((POINT_DIM, w1, "relu"), (w1, w2, "relu"), (w2, w3, "relu")), init_rng)
    # a hidden layer lets the classifier separate same-family shapes that a
    # linear readout of the pooled feature cannot
    wc = max(16, w3 // 4)
    class_head = nn.net_init(((w3, wc, "relu"), (wc, n_classes, "none")), init_rng)
    rot_head = nn.net_init(((w3, 6, "none"),), init_rng)
    return EncoderModel(trunk=trunk, class_head=class_head, rot_head=rot_head,
                        n_classes=n_classes)


def encoder_params(model):
    return np.concatenate([model.trunk.params, model.class_head.params,
                           model.rot_head.params])


def encoder_with_params(model, flat):
    nt = model.trunk.params.size
    nc = model.class_head.params.size
    return replace(model,
                   trunk=nn.net_with_params(model.trunk, flat[:nt]),
                   class_head=nn.net_with_params(model.class_head, flat[nt:nt + nc]),
                   rot_head=nn.net_with_params(model.rot_head, flat[nt + nc:]))


def encoder_param_hash(model):
    h = hashlib.sha256()
    for net in (model.trunk, model.class_head, model.rot_head):
        h.update(np.ascontiguousarray(net.params, dtype="<f8").tobytes())
    return h.hexdigest()


def freeze(model):
    return replace(model, frozen=True)


def _pair_rows(cur_points, cur_normals, goal_points, goal_normals):
    return np.concatenate([cur_points, cur_normals, goal_points, goal_normals], axis=-1)


def pointnet_encode(model, current, goal):
    """Encode one paired cloud; returns (class logits, rot 6-vector,
    pooled feature, cache for backward)."""
    if current.n != goal.n:
        raise ShapeMismatch(f"cloud sizes differ: {current.n} vs {goal.n}")
    rows = _pair_rows(current.points, current.normals, goal.points, goal.normals)
    out, trunk_acts = nn.net_forward(model.trunk, rows)
    arg = np.argmax(out, axis=0)
    feature = out[arg, np.arange(out.shape[1])]
    logits, cls_acts = nn.net_forward(model.class_head, feature)
    rot6, rot_acts = nn.net_forward(model.rot_head, feature)
    cache = (trunk_acts, arg, cls_acts, rot_acts, current.n)
    return logits, rot6, feature, cache


def pointnet_backward(model, cache, grad_logits=None, grad_rot6=None, grad_feature=None):
    """Backward through one encoded pair; returns flat grads per component."""
    trunk_acts, arg, cls_acts, rot_acts, n = cache
    fdim = model.feature_dim
    gfeat = np.zeros(fdim)
    if grad_feature is not None:
        gfeat = gfeat + grad_feature
    if grad_logits is not None:
        gc, gin = nn.net_backward(model.class_head, cls_acts, grad_logits)
        gfeat = gfeat + gin[0]
    else:
        gc = np.zeros_like(model.class_head.params)
    if grad_rot6 is not None:
        gr, gin = nn.net_backward(model.rot_head, rot_acts, grad_rot6)
        gfeat = gfeat + gin[0]
    else:
        gr = np.zeros_like(model.rot_head.params)
    gout = np.zeros((n, fdim))
    gout[arg, np.arange(fdim)] = gfeat
    gt, _ = nn.net_backward(model.trunk, trunk_acts, gout)
    return gt, gc, gr


def encode_batch(model, cur_points, cur_normals, goal_points, goal_normals):
    """Encode B same-size paired clouds in one trunk pass.

    Returns (features (B, F), cache).  Row content matches per-item
    pointnet_encode bit-exactly (the trunk matmul is row-stable).
    """
    b, n = cur_points.shape[0], cur_points.shape[1]
    rows = _pair_rows(cur_points, cur_normals, goal_points, goal_normals).reshape(b * n, POINT_DIM)
    out, trunk_acts = nn.net_forward(model.trunk, rows)
    per_item = out.reshape(b, n, model.feature_dim)
    arg = np.argmax(per_item, axis=1)
    features = np.take_along_axis(per_item, arg[:, None, :], axis=1)[:, 0, :]
    return features, (trunk_acts, arg, b, n)


def encode_batch_backward(model, cache, grad_features):
    """Trunk gradient for encode_batch output; used by encoder fine-tuning."""
    trunk_acts, arg, b, n = cache
    fdim = model.feature_dim
    gout = np.zeros((b, n, fdim))
    np.put_along_axis(gout, arg[:, None, :], grad_features[:, None, :], axis=1)
    gt, _ = nn.net_backward(model.trunk, trunk_acts, gout.reshape(b * n, fdim))
    return gt


def heads_forward(model, features):
    logits, cls_acts = nn.net_forward(model.class_head, features)
    rot6, rot_acts = nn.net_forward(model.rot_head, features)
    return logits, rot6, (cls_acts, rot_acts)


def encode(model, current, goal):
    """Frozen feature service: the pooled trunk feature for one pair."""
    if not model.frozen:
        raise NotFrozen("encode requires a frozen encoder")
    _, _, feature, _ = pointnet_encode(model, current, goal)
    return feature


def make_pretrain_batch(meshes, batch, n_points, batch_rng):
    """Random labeled pairs: object uniform, fresh surface sample, uniform
    base orientation on both copies, extra uniform relative rotation on the
    goal copy.  Stored targets reconstruct goal points from current points
    exactly."""
    b = int(batch)
    labels = np.empty(b, dtype=np.int64)
    cur_p = np.empty((b, n_points, 3))
    cur_n = np.empty((b, n_points, 3))
    goal_p = np.empty((b, n_points, 3))
    goal_n = np.empty((b, n_points, 3))
    targets = np.empty((b, 3, 3))
    for i in range(b):
        labels[i] = batch_rng.integers(len(meshes))
        cloud = _mesh.sample_surface(meshes[labels[i]], n_points, batch_rng)
        q_base = rotmath.random_rotation_so3(batch_rng)
        q_rel = rotmath.random_rotation_so3(batch_rng)
        cur_p[i] = rotmath.quat_rotate_points(q_base, cloud.points)
        cur_n[i] = rotmath.quat_rotate_points(q_base, cloud.normals)
        r_rel = rotmath.quat_to_matrix(q_rel)
        goal_p[i] = _rot_apply(r_rel, cur_p[i])
        goal_n[i] = _rot_apply(r_rel, cur_n[i])
        targets[i] = r_rel
    return PretrainBatch(labels=labels, cur_points=cur_p, cur_normals=cur_n,
                         goal_points=goal_p, goal_normals=goal_n, targets=targets)


def _rot_apply(r, pts):
    from . import _kernels
    return _kernels.rotate_points(r, np.ascontiguousarray(pts))


def encoder_loss(model, batch, alpha):
    """Combined loss and flat gradient over the batch (means over items).

    Returns (metrics dict, flat grad).  Metrics are computed at the current
    parameters: L_cls, L_rot, L_e = L_cls + alpha * L_rot, acc, rot_err_rad
    (identical to L_rot: the rotation loss is the geodesic angle).
    """
    b = batch.size
    features, trunk_cache = encode_batch(model, batch.cur_points, batch.cur_normals,
                                         batch.goal_points, batch.goal_normals)
    logits, rot6, (cls_acts, rot_acts) = heads_forward(model, features)
    l_cls, g_logits = nn.cross_entropy_batch(logits, batch.labels)
    rot_losses = np.empty(b)
    g_rot6 = np.empty((b, 6))
    for i in range(b):
        r_hat = rotmath.project_to_so3(rot6[i])
        loss_i, grad_r = rotmath.rotation_loss(r_hat, batch.targets[i])
        rot_losses[i] = loss_i
        g_rot6[i] = rotmath.project_to_so3_backward(rot6[i], (alpha / b) * grad_r)
    l_rot = float(rot_losses.mean())

    gc, gin_c = nn.net_backward(model.class_head, cls_acts, g_logits)
    gr, gin_r = nn.net_backward(model.rot_head, rot_acts, g_rot6)
    gt = encode_batch_backward(model, trunk_cache, gin_c + gin_r)
    grad = np.concatenate([gt, gc, gr])

    acc = float(np.mean(np.argmax(logits, axis=1) == batch.labels))
    metrics = {"L_cls": l_cls, "L_rot": l_rot, "L_e": l_cls + alpha * l_rot,
               "acc": acc, "rot_err_rad": l_rot}
    return metrics, grad


def pretrain_step(model, opt_state, batch, alpha):
    """One Adam step on the combined loss; metrics are pre-update."""
    if model.frozen:
        raise FrozenModel("cannot pretrain a frozen encoder")
    metrics, grad = encoder_loss(model, batch, alpha)
    new_flat, opt_state = nn.adam_step(encoder_params(model), grad, opt_state)
    return encoder_with_params(model, new_flat), opt_state, metrics


def eval_batches(model, batches, alpha):
    """Metrics averaged over fixed validation batches (no update)."""
    keys = ("L_cls", "L_rot", "L_e", "acc", "rot_err_rad")
    acc = {k: 0.0 for k in keys}
    for batch in batches:
        m, _ = encoder_loss(model, batch, alpha)
        for k in keys:
            acc[k] += m[k]
    return {k: v / len(batches) for k, v in acc.items()}


def pretrain(meshes, names, cfg: PretrainConfig, seed=None, log_path=None):
    """Full pretraining loop; returns (frozen model, log lines).

    Validation batches come from an RNG stream disjoint from training and
    are fixed up front.  Every log line carries the fields step, L_cls,
    L_rot, L_e, acc, rot_err_rad plus its split.
    """
    cfg.validate()
    if len(meshes) < 2:
        raise ShapeMismatch("pretraining needs at least 2 objects")
    if len(meshes) != len(names):
        raise ShapeMismatch("meshes and names disagree in length")
    seed = cfg.seed if seed is None else seed
    model = encoder_init(len(meshes), rng.child(seed, "encoder-init"), cfg.widths)
    opt = nn.adam_init(encoder_params(model).size, cfg.lr)
    val = [make_pretrain_batch(meshes, cfg.batch, cfg.n_points, rng.child(seed, "pretrain-val", k))
           for k in range(cfg.val_batches)]
    log = []

    def emit(line):
        log.append(line)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(line, sort_keys=True, separators=(",", ":")) + "\n")

    for step in range(cfg.steps):
        # cosine decay keeps early exploration at cfg.lr and settles the
        # classifier late; lr_final == lr gives a constant schedule
        if cfg.steps > 1:
            frac = 0.5 * (1.0 + math.cos(math.pi * step / (cfg.steps - 1)))
        else:
            frac = 1.0
        opt = replace(opt, lr=cfg.lr_final + (cfg.lr - cfg.lr_final) * frac)
        batch = make_pretrain_batch(meshes, cfg.batch, cfg.n_points,
                                    rng.child(seed, "pretrain-batch", step))
        model, opt, metrics = pretrain_step(model, opt, batch, cfg.alpha)
        if (step + 1) % cfg.log_every == 0 or step == 0:
            emit({"step": step + 1, "split": "train", **{k: metrics[k] for k in
                  ("L_cls", "L_rot", "L_e", "acc", "rot_err_rad")}})
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            vm = eval_batches(model, val, cfg.alpha)
            emit({"step": step + 1, "split": "val", **vm})
    return freeze(model), log


def save_encoder(path, model, names, cfg=None):
    meta = {"n_classes": model.n_classes, "frozen": model.frozen,
            "object_names": list(names)}
    if cfg is not None:
        from .config import config_dict
        meta["pretrain_config"] = config_dict(cfg)
    nn.save_checkpoint(path, "encoder", {
        "trunk": model.trunk,
        "class_head": model.class_head,
        "rot_head": model.rot_head,
        "meta": json.dumps(meta, sort_keys=True).encode("utf-8"),
    })


def load_encoder(path):
    _, sections = nn.load_checkpoint(path, expect_component="encoder")
    meta = json.loads(sections["meta"].decode("utf-8"))
    model = EncoderModel(trunk=sections["trunk"], class_head=sections["class_head"],
                         rot_head=sections["rot_head"], n_classes=meta["n_classes"],
                         frozen=meta["frozen"])
    return model, meta
