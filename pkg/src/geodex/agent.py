"""DDPG agent with target networks, observation normalization, and a
multi-task update that sums per-object gradients before a single optimizer
step.

Networks are plain MLPs: actor maps the normalized input to 20 tanh
actions, critic maps (normalized input, action) to a scalar Q.  The input
is core observation + goal, with the 512-dim shape feature appended in
geometry-aware mode.  Rewards enter updates shifted to {-1, 0}, so Q lives
in [-1/(1-gamma), 0] and the critic target is clamped to that interval.

Target networks move only via soft_update, which the training loop calls
once per epoch after its gradient updates.
"""

import json
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .encoder import encode_batch_backward
from .env import ACTION_DIM, OBS_DIM
from .errors import EmptyBatch, ModeMismatch

NORM_CLIP = 5.0
NORM_VAR_FLOOR = 1e-4   # std floor 1e-2 keeps near-constant coords bounded


@dataclass(frozen=True)
class Normalizer:
    """Running mean/std over raw network inputs, clipped after scaling."""
    count: float
    sums: np.ndarray
    sumsq: np.ndarray

    @classmethod
    def empty(cls, dim):
        return cls(count=0.0, sums=np.zeros(dim), sumsq=np.zeros(dim))

    def update(self, rows):
        rows = np.atleast_2d(rows)
        return Normalizer(count=self.count + rows.shape[0],
                          sums=self.sums + rows.sum(axis=0),
                          sumsq=self.sumsq + (rows * rows).sum(axis=0))

    def stats(self):
        if self.count < 1.0:
            return np.zeros_like(self.sums), np.ones_like(self.sums)
        mean = self.sums / self.count
        var = np.maximum(self.sumsq / self.count - mean * mean, NORM_VAR_FLOOR)
        return mean, np.sqrt(var)

    def normalize(self, x):
        mean, std = self.stats()
        return np.clip((x - mean) / std, -NORM_CLIP, NORM_CLIP)

    def normalize_with_mask(self, x):
        """Also return the pass-through mask and std for gradient flow back
        to raw inputs (used when finetuning the encoder)."""
        mean, std = self.stats()
        raw = (x - mean) / std
        mask = (np.abs(raw) < NORM_CLIP).astype(np.float64)
        return np.clip(raw, -NORM_CLIP, NORM_CLIP), mask, std


@dataclass(frozen=True)
class PolicyModel:
    actor: nn.Net
    critic: nn.Net
    actor_target: nn.Net
    critic_target: nn.Net
    actor_opt: nn.AdamState
    critic_opt: nn.AdamState
    normalizer: Normalizer
    mode: str                 # "single" | "vanilla" | "geometry-aware"
    obs_dim: int
    feature_dim: int

    @property
    def input_dim(self):
        return self.obs_dim + self.feature_dim


def policy_init(mode, init_rng, feature_dim=0, obs_dim=OBS_DIM,
                hidden=(256, 256, 256), lr_actor=1e-3, lr_critic=1e-3):
    if mode == "geometry-aware":
        if feature_dim <= 0:
            raise ModeMismatch("geometry-aware policy needs feature_dim > 0")
    elif mode in ("single", "vanilla"):
        if feature_dim != 0:
            raise ModeMismatch(f"{mode} policy must have feature_dim 0")
    else:
        raise ModeMismatch(f"unknown mode {mode!r}")
    in_x = obs_dim + feature_dim
    a_specs, c_specs = [], []
    prev = in_x
    for h in hidden:
        a_specs.append((prev, h, "relu"))
        prev = h
    a_specs.append((prev, ACTION_DIM, "tanh"))
    prev = in_x + ACTION_DIM
    for h in hidden:
        c_specs.append((prev, h, "relu"))
        prev = h
    c_specs.append((prev, 1, "none"))
    actor = nn.net_init(a_specs, init_rng)
    critic = nn.net_init(c_specs, init_rng)
    return PolicyModel(
        actor=actor, critic=critic,
        actor_target=nn.net_with_params(actor, actor.params.copy()),
        critic_target=nn.net_with_params(critic, critic.params.copy()),
        actor_opt=nn.adam_init(nn.param_count(a_specs), lr=lr_actor),
        critic_opt=nn.adam_init(nn.param_count(c_specs), lr=lr_critic),
        normalizer=Normalizer.empty(in_x),
        mode=mode, obs_dim=obs_dim, feature_dim=feature_dim)


def _check_feature(model, feature):
    if model.feature_dim == 0 and feature is not None:
        raise ModeMismatch(f"{model.mode} policy given a shape feature")
    if model.feature_dim > 0:
        if feature is None:
            raise ModeMismatch("geometry-aware policy missing its shape feature")
        if np.asarray(feature).shape[-1] != model.feature_dim:
            raise ModeMismatch(
                f"feature width {np.asarray(feature).shape[-1]} != {model.feature_dim}")


def policy_input(model, obs_vec, feature=None):
    _check_feature(model, feature)
    if feature is None:
        return np.asarray(obs_vec, dtype=np.float64)
    return np.concatenate([obs_vec, feature])


def act(model, obs_vec, feature=None):
    x = model.normalizer.normalize(policy_input(model, obs_vec, feature))
    out, _ = nn.net_forward(model.actor, x)
    return out


def explore_action(action, explore_rng, eps_random, noise_sigma):
    """Epsilon-uniform resample, else clipped Gaussian jitter.  Draw order:
    one uniform coin, then either 20 uniforms or 20 normals."""
    if explore_rng.random() < eps_random:
        return explore_rng.uniform(-1.0, 1.0, ACTION_DIM)
    noisy = action + noise_sigma * explore_rng.standard_normal(ACTION_DIM)
    return np.clip(noisy, -1.0, 1.0)


def _batch_inputs(model, arrs, features, next_features):
    x = np.concatenate([arrs["obs_core"], arrs["goal"]], axis=1)
    x2 = np.concatenate([arrs["next_obs_core"], arrs["goal"]], axis=1)
    if model.feature_dim:
        if features is None or next_features is None:
            raise ModeMismatch("geometry-aware update missing shape features")
        x = np.concatenate([x, features], axis=1)
        x2 = np.concatenate([x2, next_features], axis=1)
    elif features is not None or next_features is not None:
        raise ModeMismatch(f"{model.mode} update given shape features")
    return x, x2


def critic_targets(model, arrs, x2_raw, gamma):
    """Shifted-reward TD target from the target networks, clamped to the
    feasible return interval [-1/(1-gamma), 0].

    The done flag marks true environment terminals only.  The torque rig
    ends episodes on a time limit and observations carry no time feature,
    so its transitions store done=False and the target bootstraps through
    the final step like any other (masking a time limit would train
    contradictory values into indistinguishable states).
    """
    x2n = model.normalizer.normalize(x2_raw)
    a2, _ = nn.net_forward(model.actor_target, x2n)
    q2, _ = nn.net_forward(model.critic_target, np.concatenate([x2n, a2], axis=1))
    r_shift = arrs["reward"] - 1.0
    q_floor = -1.0 / (1.0 - gamma) if gamma < 1.0 else -np.inf
    y = r_shift + gamma * (1.0 - arrs["done"]) * q2[:, 0]
    return np.clip(y, q_floor, 0.0)


def _grads_for_batch(model, arrs, x_raw, x2_raw, gamma, action_l2, want_dfeat):
    """Critic MSE toward the clamped TD target and actor Q-ascent with an
    L2 action penalty.  Optionally returns the loss gradient w.r.t. the raw
    feature columns for encoder finetuning."""
    b = x_raw.shape[0]
    xn, mask, std = model.normalizer.normalize_with_mask(x_raw)
    y = critic_targets(model, arrs, x2_raw, gamma)

    q, acts_c = nn.net_forward(model.critic, np.concatenate([xn, arrs["action"]], axis=1))
    td = q[:, 0] - y
    critic_loss = float(np.mean(td * td))
    cgrad, cin = nn.net_backward(model.critic, acts_c, (2.0 * td / b)[:, None])

    a_pi, acts_a = nn.net_forward(model.actor, xn)
    q_pi, acts_cpi = nn.net_forward(model.critic, np.concatenate([xn, a_pi], axis=1))
    actor_loss = float(-np.mean(q_pi) + action_l2 * np.mean(a_pi * a_pi))
    gq = np.full((b, 1), -1.0 / b)
    _, gin_c = nn.net_backward(model.critic, acts_cpi, gq)
    in_x = xn.shape[1]
    da = gin_c[:, in_x:] + (2.0 * action_l2 / a_pi.size) * a_pi
    agrad, gin_a = nn.net_backward(model.actor, acts_a, da)

    dfeat = None
    if want_dfeat:
        dxn = cin[:, :in_x] + gin_c[:, :in_x] + gin_a
        dfeat = (dxn * mask / std)[:, model.obs_dim:]
    losses = {"critic": critic_loss, "actor": actor_loss}
    return cgrad, agrad, losses, dfeat


def multi_task_update(model, batches, gamma, action_l2=0.3, encoder_ctx=None):
    """One gradient update over per-object batches.

    batches: list of (object_id, arrs, features, next_features, feat_cache)
    tuples; features/caches are None outside geometry-aware mode, and
    feat_cache is only needed when finetuning.  Gradients are summed over
    objects in ascending object-id order, then the actor and critic each
    take a single optimizer step.  The normalizer absorbs every raw input
    row before any gradient is computed.

    encoder_ctx: None, or (encoder_model, encoder_opt) to finetune the
    encoder through the feature columns; returns updated copies.
    """
    if not batches:
        raise EmptyBatch("no batches given")
    batches = sorted(batches, key=lambda item: item[0])
    ids = [item[0] for item in batches]
    if len(set(ids)) != len(ids):
        raise EmptyBatch(f"duplicate object ids in update: {ids}")

    prepared = []
    norm = model.normalizer
    for oid, arrs, features, next_features, feat_cache in batches:
        if arrs["obs_core"].shape[0] == 0:
            raise EmptyBatch(f"object {oid} batch is empty")
        x_raw, x2_raw = _batch_inputs(model, arrs, features, next_features)
        norm = norm.update(x_raw)
        prepared.append((oid, arrs, x_raw, x2_raw, feat_cache))
    model = replace(model, normalizer=norm)

    want_dfeat = encoder_ctx is not None
    critic_sum = np.zeros_like(model.critic.params)
    actor_sum = np.zeros_like(model.actor.params)
    enc_sum = None
    losses = {}
    for oid, arrs, x_raw, x2_raw, feat_cache in prepared:
        cgrad, agrad, l, dfeat = _grads_for_batch(
            model, arrs, x_raw, x2_raw, gamma, action_l2, want_dfeat)
        critic_sum += cgrad
        actor_sum += agrad
        losses[oid] = l
        if want_dfeat:
            enc_model, _ = encoder_ctx
            cache_rows = feat_cache[2]
            if cache_rows != dfeat.shape[0]:
                # cache may also hold next-step rows (targets, no gradient)
                padded = np.zeros((cache_rows, dfeat.shape[1]))
                padded[:dfeat.shape[0]] = dfeat
                dfeat = padded
            g = encode_batch_backward(enc_model, feat_cache,
                                      grad_features=dfeat)
            enc_sum = g if enc_sum is None else enc_sum + g

    critic_params, critic_opt = nn.adam_step(model.critic.params, critic_sum,
                                             model.critic_opt)
    actor_params, actor_opt = nn.adam_step(model.actor.params, actor_sum,
                                           model.actor_opt)
    model = replace(model,
                    critic=nn.net_with_params(model.critic, critic_params),
                    actor=nn.net_with_params(model.actor, actor_params),
                    critic_opt=critic_opt, actor_opt=actor_opt)
    if encoder_ctx is None:
        return model, losses, None, None
    enc_model, enc_opt = encoder_ctx
    new_trunk, enc_opt = nn.adam_step(enc_model.trunk.params, enc_sum, enc_opt)
    enc_model = replace(enc_model, trunk=nn.net_with_params(enc_model.trunk, new_trunk))
    return model, losses, enc_model, enc_opt


def ddpg_update(model, batch, gamma, action_l2=0.3, features=None,
                next_features=None):
    """Single-object update; the one-batch case of multi_task_update."""
    model, losses, _, _ = multi_task_update(
        model, [(batch.get("object_id", 0), batch, features, next_features, None)],
        gamma, action_l2)
    return model, losses[batch.get("object_id", 0)]


def soft_update(model, tau):
    """Polyak-average online parameters into the targets."""
    at = (1.0 - tau) * model.actor_target.params + tau * model.actor.params
    ct = (1.0 - tau) * model.critic_target.params + tau * model.critic.params
    return replace(model,
                   actor_target=nn.net_with_params(model.actor_target, at),
                   critic_target=nn.net_with_params(model.critic_target, ct))


# -- checkpointing ----------------------------------------------------------

def model_sections(model, prefix="pol"):
    meta = {"mode": model.mode, "obs_dim": model.obs_dim,
            "feature_dim": model.feature_dim,
            "lr_actor": model.actor_opt.lr, "lr_critic": model.critic_opt.lr}
    return {
        f"{prefix}_actor": model.actor,
        f"{prefix}_critic": model.critic,
        f"{prefix}_actor_target": model.actor_target,
        f"{prefix}_critic_target": model.critic_target,
        f"{prefix}_actor_m": model.actor_opt.m,
        f"{prefix}_actor_v": model.actor_opt.v,
        f"{prefix}_critic_m": model.critic_opt.m,
        f"{prefix}_critic_v": model.critic_opt.v,
        f"{prefix}_opt_steps": np.array([model.actor_opt.step,
                                         model.critic_opt.step], dtype=np.int64),
        f"{prefix}_norm_count": np.array([model.normalizer.count]),
        f"{prefix}_norm_sum": model.normalizer.sums,
        f"{prefix}_norm_sumsq": model.normalizer.sumsq,
        f"{prefix}_meta": json.dumps(meta, sort_keys=True).encode("utf-8"),
    }


def model_from_sections(sections, prefix="pol"):
    get = dict(sections)
    meta = json.loads(get[f"{prefix}_meta"].decode("utf-8"))
    steps = get[f"{prefix}_opt_steps"]
    actor = get[f"{prefix}_actor"]
    critic = get[f"{prefix}_critic"]
    return PolicyModel(
        actor=actor, critic=critic,
        actor_target=get[f"{prefix}_actor_target"],
        critic_target=get[f"{prefix}_critic_target"],
        actor_opt=nn.AdamState(m=get[f"{prefix}_actor_m"], v=get[f"{prefix}_actor_v"],
                               step=int(steps[0]), lr=float(meta["lr_actor"])),
        critic_opt=nn.AdamState(m=get[f"{prefix}_critic_m"], v=get[f"{prefix}_critic_v"],
                                step=int(steps[1]), lr=float(meta["lr_critic"])),
        normalizer=Normalizer(count=float(get[f"{prefix}_norm_count"][0]),
                              sums=get[f"{prefix}_norm_sum"],
                              sumsq=get[f"{prefix}_norm_sumsq"]),
        mode=meta["mode"], obs_dim=int(meta["obs_dim"]),
        feature_dim=int(meta["feature_dim"]))
