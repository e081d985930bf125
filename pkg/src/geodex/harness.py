"""Training, evaluation, and experiment orchestration.

Every random draw comes from a stream keyed by (seed, purpose, epoch,
object, slot, ...), so any scalar in any log is reproducible from the
config and seed alone, and training can resume from a checkpoint without
replaying or storing generator state.

Epoch shape: per object, `rollouts_per_epoch` exploratory episodes enter
the replay buffer; then `updates_per_epoch` gradient updates run, each
summing per-object batch gradients into one optimizer step; then target
networks take their single soft update for the epoch.  Metrics append to
metrics.jsonl, one canonical-JSON line per (epoch, object, phase).

Geometry-aware runs never store point clouds.  Episodes carry only their
(epoch, slot) stream key; update batches regenerate the exact clouds from
(seed, "cloud", object, epoch, slot, step) and re-encode them, which is
bit-identical to what the policy saw at rollout time.
"""

import csv
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import nn, rng
from .agent import (PolicyModel, act, explore_action, model_from_sections,
                    model_sections, multi_task_update, policy_init, soft_update)
from .config import RunConfig, config_dict, config_from_dict
from .encoder import encode, encode_batch, load_encoder
from .env import TorqueRigEnv, select_records
from .errors import ConfigError, GeodexError, TooFewObjects
from .mesh import sample_surface
from .replay import EpisodeBuffer, Transition, stack_batch
from .rotmath import quat_to_matrix
from ._kernels import rotate_points

PHASES = ("train", "eval-train", "eval-heldout")


def _json_line(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


@dataclass
class TrainResult:
    cfg: RunConfig
    model: PolicyModel
    encoder: object            # EncoderModel or None
    buffers: EpisodeBuffer
    metrics: list              # list of dict, in file order
    samples: int


def make_env(record, object_id, cfg, include_cloud):
    return TorqueRigEnv(record, object_id=object_id, goal_mode=cfg.goal_mode,
                        episode_len=cfg.episode_len, dt=cfg.dt,
                        tau_max=cfg.tau_max, damping=cfg.damping,
                        cloud_n=cfg.cloud_n, include_cloud=include_cloud,
                        diag_goal_is_start=cfg.diag_goal_is_start)


def _obs_feature(encoder, obs):
    if encoder is None:
        return None
    return encode(encoder, obs.cloud_current, obs.cloud_goal)


def rollout_episode(env, model, encoder, seed, epoch, oid, slot, cfg):
    """One exploratory episode; returns (transitions, final_reward)."""
    geo = encoder is not None
    reset_rng = rng.child(seed, "reset", epoch, oid, slot)
    explore_rng = rng.child(seed, "explore", epoch, oid, slot)
    ckey = lambda t: rng.child(seed, "cloud", oid, epoch, slot, t) if geo else None
    state, obs = env.reset(reset_rng, cloud_rng=ckey(0))
    transitions = []
    reward = 0.0
    for t in range(cfg.episode_len):
        a = act(model, obs.vector(), _obs_feature(encoder, obs))
        a = explore_action(a, explore_rng, cfg.eps_random, cfg.noise_sigma)
        prev_core, prev_q = obs.core(), state.orientation
        state, obs, reward, done = env.step(state, a, cloud_rng=ckey(t + 1))
        # the rig ends on a time limit, never a true terminal, so stored
        # transitions keep done=False and values bootstrap through the end
        transitions.append(Transition(
            obs_core=prev_core, action=a, reward=reward,
            next_obs_core=obs.core(), achieved=prev_q,
            achieved_next=state.orientation, goal=state.goal, done=False,
            object_id=oid, step=t, epoch=epoch, slot=slot))
    return transitions, reward


def eval_episode(env, model, encoder, seed, tag, oid, episode):
    """One noise-free episode on fresh streams; success is the final-step
    reward (terminal orientation within the 0.1 rad band)."""
    geo = encoder is not None
    reset_rng = rng.child(seed, "eval-reset", tag, oid, episode)
    ckey = lambda t: rng.child(seed, "eval-cloud", tag, oid, episode, t) if geo else None
    state, obs = env.reset(reset_rng, cloud_rng=ckey(0))
    reward = 0.0
    for t in range(env.episode_len):
        a = act(model, obs.vector(), _obs_feature(encoder, obs))
        state, obs, reward, done = env.step(state, a, cloud_rng=ckey(t + 1))
    return reward


def evaluate(model, encoder, records, cfg, seed, tag, id_offset=0):
    """Mean final-step success per object over cfg.eval_episodes."""
    out = {}
    for j, record in enumerate(records):
        oid = id_offset + j
        env = make_env(record, oid, cfg, include_cloud=encoder is not None)
        wins = [eval_episode(env, model, encoder, seed, tag, oid, ep)
                for ep in range(cfg.eval_episodes)]
        out[record.name] = float(np.mean(wins))
    return out


def _batch_features(encoder, record, cfg, seed, oid, arrs):
    """Regenerate and encode the clouds behind a sampled batch.

    Row layout of the returned cache: first B rows are the current-step
    pairs, last B rows the next-step pairs; the goal side uses the batch's
    (possibly relabeled) goal column for both.
    """
    b = arrs["obs_core"].shape[0]
    n = cfg.cloud_n
    cur_p = np.empty((2 * b, n, 3))
    cur_n = np.empty((2 * b, n, 3))
    goal_p = np.empty((2 * b, n, 3))
    goal_n = np.empty((2 * b, n, 3))
    for i in range(b):
        epoch, slot, t = int(arrs["epoch"][i]), int(arrs["slot"][i]), int(arrs["step"][i])
        c0 = sample_surface(record.mesh, n, rng.child(seed, "cloud", oid, epoch, slot, t))
        c1 = sample_surface(record.mesh, n, rng.child(seed, "cloud", oid, epoch, slot, t + 1))
        r_goal = quat_to_matrix(arrs["goal"][i])
        r_cur = quat_to_matrix(arrs["achieved"][i])
        r_next = quat_to_matrix(arrs["achieved_next"][i])
        cur_p[i] = rotate_points(r_cur, c0.points)
        cur_n[i] = rotate_points(r_cur, c0.normals)
        goal_p[i] = rotate_points(r_goal, c0.points)
        goal_n[i] = rotate_points(r_goal, c0.normals)
        cur_p[b + i] = rotate_points(r_next, c1.points)
        cur_n[b + i] = rotate_points(r_next, c1.normals)
        goal_p[b + i] = rotate_points(r_goal, c1.points)
        goal_n[b + i] = rotate_points(r_goal, c1.normals)
    feats, cache = encode_batch(encoder, cur_p, cur_n, goal_p, goal_n)
    return feats[:b], feats[b:], cache


class TrainRun:
    """Mutable driver around the pure update functions."""

    def __init__(self, cfg, registry_records, out_dir=None):
        cfg.validate()
        self.cfg = cfg
        self.seed = cfg.seed
        self.records = select_records(registry_records, cfg.objects)
        self.heldout = select_records(registry_records, cfg.heldout)
        self.out_dir = out_dir
        self.geo = cfg.mode == "geometry-aware"
        self.encoder = None
        self.enc_opt = None
        if self.geo:
            self.encoder, _meta = load_encoder(cfg.encoder_path)
            if cfg.finetune_encoder:
                self.enc_opt = nn.adam_init(self.encoder.trunk.params.size,
                                            lr=cfg.finetune_lr)
        feature_dim = self.encoder.feature_dim if self.geo else 0
        self.model = policy_init(cfg.mode, rng.child(self.seed, "policy-init"),
                                 feature_dim=feature_dim, hidden=cfg.hidden,
                                 lr_actor=cfg.lr_actor, lr_critic=cfg.lr_critic)
        self.buffers = EpisodeBuffer(capacity=cfg.capacity)
        self.samples = 0
        self.epoch_next = 0
        self.metrics = []
        self.progress = None            # optional per-epoch callback
        self.envs = [make_env(rec, oid, cfg, include_cloud=self.geo)
                     for oid, rec in enumerate(self.records)]
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
                fh.write(json.dumps(config_dict(cfg), sort_keys=True, indent=2) + "\n")
            open(self._metrics_path(), "w", encoding="utf-8").close()

    def _metrics_path(self):
        return os.path.join(self.out_dir, "metrics.jsonl")

    def _emit(self, line):
        self.metrics.append(line)
        if self.out_dir:
            with open(self._metrics_path(), "a", encoding="utf-8") as fh:
                fh.write(_json_line(line))

    def _emit_eval(self, epoch):
        cfg = self.cfg
        table = evaluate(self.model, self.encoder, self.records, cfg,
                         self.seed, tag=epoch)
        for rec in self.records:
            self._emit({"epoch": epoch, "object": rec.name, "phase": "eval-train",
                        "success": table[rec.name], "samples": self.samples,
                        "losses": None})
        if self.heldout:
            table = evaluate(self.model, self.encoder, self.heldout, cfg,
                             self.seed, tag=epoch, id_offset=len(self.records))
            for rec in self.heldout:
                self._emit({"epoch": epoch, "object": rec.name,
                            "phase": "eval-heldout", "success": table[rec.name],
                            "samples": self.samples, "losses": None})

    def run_epoch(self, epoch):
        cfg = self.cfg
        n_obj = len(self.records)
        train_success = []
        for oid, env in enumerate(self.envs):
            wins = []
            for slot in range(cfg.rollouts_per_epoch):
                transitions, final_r = rollout_episode(
                    env, self.model, self.encoder, self.seed, epoch, oid, slot, cfg)
                self.buffers.insert(transitions)
                self.samples += len(transitions)
                wins.append(final_r)
            train_success.append(float(np.mean(wins)))

        loss_sums = [dict(critic=0.0, actor=0.0) for _ in range(n_obj)]
        for u in range(cfg.updates_per_epoch):
            batches = []
            for oid in range(n_obj):
                trs = self.buffers.her_sample(oid, cfg.batch, cfg.relabel_k,
                                              rng.child(self.seed, "her", epoch, u, oid))
                arrs = stack_batch(trs)
                feats = next_feats = cache = None
                if self.geo:
                    feats, next_feats, cache = _batch_features(
                        self.encoder, self.records[oid], cfg, self.seed, oid, arrs)
                batches.append((oid, arrs, feats, next_feats, cache))
            ctx = (self.encoder, self.enc_opt) if cfg.finetune_encoder else None
            self.model, losses, enc2, opt2 = multi_task_update(
                self.model, batches, cfg.gamma, cfg.action_l2, encoder_ctx=ctx)
            if cfg.finetune_encoder:
                self.encoder, self.enc_opt = enc2, opt2
            for oid in range(n_obj):
                loss_sums[oid]["critic"] += losses[oid]["critic"]
                loss_sums[oid]["actor"] += losses[oid]["actor"]
        self.model = soft_update(self.model, cfg.tau)

        for oid, rec in enumerate(self.records):
            if cfg.updates_per_epoch:
                losses_out = {k: v / cfg.updates_per_epoch
                              for k, v in sorted(loss_sums[oid].items())}
            else:
                losses_out = None
            self._emit({"epoch": epoch, "object": rec.name, "phase": "train",
                        "success": train_success[oid], "samples": self.samples,
                        "losses": losses_out})
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            self._emit_eval(epoch)
        self.epoch_next = epoch + 1

    def run(self):
        cfg = self.cfg
        for epoch in range(self.epoch_next, cfg.epochs):
            self.run_epoch(epoch)
            if self.out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                self.save(os.path.join(self.out_dir, f"ckpt_{epoch + 1:04d}.gdx"))
            if self.progress:
                self.progress(self, epoch)
        if self.out_dir:
            self.save(os.path.join(self.out_dir, "final.gdx"))
        return TrainResult(cfg=cfg, model=self.model, encoder=self.encoder,
                           buffers=self.buffers, metrics=self.metrics,
                           samples=self.samples)

    # -- persistence -------------------------------------------------------

    def save(self, path):
        sections = dict(model_sections(self.model))
        sections.update(self.buffers.state_sections())
        if self.cfg.finetune_encoder:
            sections["enc_trunk"] = self.encoder.trunk
            sections["enc_opt_m"] = self.enc_opt.m
            sections["enc_opt_v"] = self.enc_opt.v
            sections["enc_opt_step"] = np.array([self.enc_opt.step], dtype=np.int64)
        meta = {"epoch_next": self.epoch_next, "samples": self.samples,
                "seed": self.seed, "config": config_dict(self.cfg)}
        sections["run_meta"] = json.dumps(meta, sort_keys=True).encode("utf-8")
        nn.save_checkpoint(path, "train-run", sections)
        return path

    @classmethod
    def resume(cls, path, registry_records, out_dir=None):
        component, sections = nn.load_checkpoint(path, expect_component="train-run")
        meta = json.loads(sections["run_meta"].decode("utf-8"))
        cfg = config_from_dict(RunConfig, meta["config"])
        run = cls(cfg, registry_records, out_dir=None)
        run.out_dir = out_dir
        run.model = model_from_sections(sections)
        run.buffers = EpisodeBuffer.from_sections(sections)
        run.samples = int(meta["samples"])
        run.epoch_next = int(meta["epoch_next"])
        if cfg.finetune_encoder:
            run.encoder = replace(run.encoder, trunk=sections["enc_trunk"])
            run.enc_opt = nn.AdamState(m=sections["enc_opt_m"],
                                       v=sections["enc_opt_v"],
                                       step=int(sections["enc_opt_step"][0]),
                                       lr=cfg.finetune_lr)
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            cfg_path = os.path.join(out_dir, "config.json")
            if not os.path.exists(cfg_path):
                with open(cfg_path, "w", encoding="utf-8") as fh:
                    fh.write(json.dumps(config_dict(cfg), sort_keys=True, indent=2) + "\n")
            run._rewind_metrics()
        return run

    def _rewind_metrics(self):
        """Keep metric lines from completed epochs only, so a resumed run's
        file converges to what an uninterrupted run would have written."""
        path = self._metrics_path()
        kept = []
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                for raw in fh:
                    line = json.loads(raw)
                    if line["epoch"] < self.epoch_next:
                        kept.append(line)
        with open(path, "w", encoding="utf-8") as fh:
            for line in kept:
                fh.write(_json_line(line))
        self.metrics = kept


def train(cfg, registry_records, out_dir=None):
    return TrainRun(cfg, registry_records, out_dir=out_dir).run()


# ---------------------------------------------------------------------------
# result table helpers
# ---------------------------------------------------------------------------

def final_success(metrics, phase):
    """{object: success} at the last epoch that logged the given phase."""
    epochs = [m["epoch"] for m in metrics if m["phase"] == phase]
    if not epochs:
        raise GeodexError(f"no {phase!r} lines in metrics")
    last = max(epochs)
    return {m["object"]: m["success"] for m in metrics
            if m["phase"] == phase and m["epoch"] == last}


def mean_final_success(metrics, phase):
    table = final_success(metrics, phase)
    return float(np.mean(list(table.values())))


# ---------------------------------------------------------------------------
# object split
# ---------------------------------------------------------------------------

def split_by_scores(scores, ratio, max_gap=None):
    """Deal objects ranked by score (desc, name-tiebroken) alternately to
    train and test until test holds round(ratio * n); remainder to train.
    With max_gap set, the two sets' mean scores must agree within it."""
    if not (0.0 < ratio < 1.0):
        raise ConfigError(f"split ratio {ratio} outside (0, 1)")
    ranked = sorted(scores, key=lambda name: (-scores[name], name))
    n_test = int(round(ratio * len(ranked)))
    train_names, test_names = [], []
    for i, name in enumerate(ranked):
        if i % 2 == 1 and len(test_names) < n_test:
            test_names.append(name)
        else:
            train_names.append(name)
    while len(test_names) < n_test:
        test_names.append(train_names.pop())
    if max_gap is not None:
        gap = abs(float(np.mean([scores[n] for n in train_names]))
                  - float(np.mean([scores[n] for n in test_names])))
        if gap >= max_gap:
            raise GeodexError(f"split imbalance {gap:.3f} >= {max_gap}")
    return train_names, test_names


def split_objects(records, probe_cfg, ratio, registry_records=None):
    """Difficulty-balanced train/test split via short single-object probe
    runs; see split_by_scores for the dealing rule."""
    if len(records) < 4:
        raise TooFewObjects(f"split needs >= 4 objects, got {len(records)}")
    pool = registry_records if registry_records is not None else records
    scores = {}
    for rec in records:
        cfg = replace(probe_cfg, mode="vanilla", objects=(rec.name,), heldout=())
        result = train(cfg, pool)
        scores[rec.name] = mean_final_success(result.metrics, "eval-train")
    train_names, test_names = split_by_scores(scores, ratio, max_gap=0.1)
    return train_names, test_names, scores


# ---------------------------------------------------------------------------
# scaling sweep and reports
# ---------------------------------------------------------------------------

def scaling_sweep(base_cfg, counts, modes, seeds, registry_records, out_dir=None):
    """Train-object scaling study on nested object prefixes.

    Returns rows (count, mode, seed, heldout_success) in deterministic
    order; heldout_success is the mean final eval-heldout success.
    """
    for count in counts:
        if count > len(base_cfg.objects):
            raise ConfigError(f"count {count} exceeds object list "
                              f"({len(base_cfg.objects)})")
    rows = []
    for count in counts:
        for mode in modes:
            for seed in seeds:
                cfg = replace(base_cfg, mode=mode,
                              objects=base_cfg.objects[:count], seed=seed)
                if mode != "geometry-aware":
                    cfg = replace(cfg, encoder_path="", finetune_encoder=False)
                sub = None
                if out_dir:
                    sub = os.path.join(out_dir, f"run_{count}_{mode}_{seed}")
                result = train(cfg, registry_records, out_dir=sub)
                rows.append((count, mode, seed,
                             mean_final_success(result.metrics, "eval-heldout")))
    if out_dir:
        write_sweep_csv(os.path.join(out_dir, "sweep.csv"), rows)
    return rows


def write_sweep_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["count", "mode", "seed", "heldout_success"])
        for count, mode, seed, success in rows:
            w.writerow([count, mode, seed, repr(float(success))])
    return path


def report(run_dir, out_path=None):
    """Summarize a run directory's final epoch into report.csv rows."""
    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    lines = []
    with open(metrics_path, "r", encoding="utf-8") as fh:
        for raw in fh:
            lines.append(json.loads(raw))
    if not lines:
        raise GeodexError(f"{metrics_path} is empty")
    last = max(m["epoch"] for m in lines)
    rows = [m for m in lines if m["epoch"] == last]
    out_path = out_path or os.path.join(run_dir, "report.csv")
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "object", "phase", "success", "samples",
                    "critic_loss", "actor_loss"])
        for m in rows:
            losses = m["losses"] or {}
            w.writerow([m["epoch"], m["object"], m["phase"], repr(m["success"]),
                        m["samples"],
                        "" if "critic" not in losses else repr(losses["critic"]),
                        "" if "actor" not in losses else repr(losses["actor"])])
    return out_path, rows
