"""Episode replay buffer with hindsight goal relabeling.

Episodes are stored per object in FIFO rings.  Observations are stored as
their 53-dim core (proprioception + object state, no goal); the goal is a
separate column so relabeling swaps it without touching stored data.
Point clouds are never stored: each episode keeps the (epoch, slot) part of
its cloud stream key, and consumers regenerate clouds bit-exactly from
(seed, "cloud", object, epoch, slot, step).

Sampling draws, per batch item: a global transition index uniform over all
stored transitions of the object, one uniform for the relabel coin
(probability k/(k+1)), and if it hits, a future step index j uniform over
{t..T-1}; the relabeled goal is the orientation achieved after step j and
the reward is recomputed against it.
"""

from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .env import CORE_DIM, ACTION_DIM, compute_reward
from .errors import EmptyBuffer, MalformedEpisode


@dataclass(frozen=True)
class Transition:
    obs_core: np.ndarray        # (53,)
    action: np.ndarray          # (20,)
    reward: float               # 0.0 or 1.0, against the episode goal
    next_obs_core: np.ndarray   # (53,)
    achieved: np.ndarray        # (4,) orientation when obs was taken
    achieved_next: np.ndarray   # (4,) orientation after the step
    goal: np.ndarray            # (4,)
    done: bool
    object_id: int
    step: int                   # index within the episode
    epoch: int                  # cloud stream key part
    slot: int                   # cloud stream key part


@dataclass(frozen=True)
class _Episode:
    object_id: int
    epoch: int
    slot: int
    terminal: bool              # True only if the env truly terminated
    goal: np.ndarray            # (4,)
    cores: np.ndarray           # (T+1, 53)
    actions: np.ndarray         # (T, 20)
    achieved: np.ndarray        # (T+1, 4)
    rewards: np.ndarray         # (T,)

    @property
    def length(self):
        return self.actions.shape[0]


def _pack(transitions):
    first = transitions[0]
    oid = first.object_id
    t_len = len(transitions)
    cores = np.empty((t_len + 1, CORE_DIM))
    actions = np.empty((t_len, ACTION_DIM))
    achieved = np.empty((t_len + 1, 4))
    rewards = np.empty(t_len)
    for i, tr in enumerate(transitions):
        if tr.object_id != oid:
            raise MalformedEpisode(f"mixed object ids {oid} and {tr.object_id}")
        if tr.step != i:
            raise MalformedEpisode(f"non-contiguous steps: got {tr.step} at position {i}")
        if (tr.epoch, tr.slot) != (first.epoch, first.slot):
            raise MalformedEpisode("mixed cloud stream keys in one episode")
        if tr.reward not in (0.0, 1.0):
            raise MalformedEpisode(f"reward {tr.reward} outside {{0, 1}}")
        cores[i] = tr.obs_core
        actions[i] = tr.action
        achieved[i] = tr.achieved
        rewards[i] = tr.reward
    if any(tr.done for tr in transitions[:-1]):
        raise MalformedEpisode("terminal flag set mid-episode")
    cores[t_len] = transitions[-1].next_obs_core
    achieved[t_len] = transitions[-1].achieved_next
    return _Episode(object_id=oid, epoch=first.epoch, slot=first.slot,
                    terminal=bool(transitions[-1].done), goal=first.goal.copy(),
                    cores=cores, actions=actions, achieved=achieved,
                    rewards=rewards)


class EpisodeBuffer:
    """Per-object FIFO episode store with uniform transition sampling."""

    def __init__(self, capacity=1000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._episodes = {}     # object_id -> deque of _Episode
        self._cum = {}          # object_id -> cached cumulative lengths
        self.inserted = 0

    def insert(self, transitions):
        if not transitions:
            raise MalformedEpisode("empty episode")
        ep = _pack(list(transitions))
        dq = self._episodes.setdefault(ep.object_id, deque(maxlen=self.capacity))
        dq.append(ep)
        self._cum.pop(ep.object_id, None)
        self.inserted += 1
        return ep

    def object_ids(self):
        return sorted(self._episodes)

    def size(self, object_id):
        dq = self._episodes.get(object_id)
        return sum(ep.length for ep in dq) if dq else 0

    def episode_count(self, object_id):
        dq = self._episodes.get(object_id)
        return len(dq) if dq else 0

    def _cumlens(self, object_id):
        cum = self._cum.get(object_id)
        if cum is None:
            dq = self._episodes[object_id]
            cum = np.cumsum([ep.length for ep in dq])
            self._cum[object_id] = cum
        return cum

    def her_sample(self, object_id, batch, relabel_k, sample_rng):
        """Uniform transitions with future-strategy relabeling; relabeled
        rewards are recomputed, original rewards already sit in {0, 1}."""
        dq = self._episodes.get(object_id)
        if not dq:
            raise EmptyBuffer(f"no episodes stored for object {object_id}")
        cum = self._cumlens(object_id)
        total = int(cum[-1])
        p_relabel = relabel_k / (relabel_k + 1.0)
        out = []
        for _ in range(batch):
            flat = int(sample_rng.integers(total))
            ep_idx = int(np.searchsorted(cum, flat, side="right"))
            t = flat - (int(cum[ep_idx - 1]) if ep_idx else 0)
            ep = dq[ep_idx]
            goal = ep.goal
            reward = float(ep.rewards[t])
            if sample_rng.random() < p_relabel:
                j = int(sample_rng.integers(t, ep.length))
                goal = ep.achieved[j + 1]
                reward = compute_reward(ep.achieved[t + 1], goal)
            out.append(Transition(
                obs_core=ep.cores[t], action=ep.actions[t], reward=reward,
                next_obs_core=ep.cores[t + 1], achieved=ep.achieved[t],
                achieved_next=ep.achieved[t + 1], goal=goal,
                done=ep.terminal and t == ep.length - 1,
                object_id=ep.object_id,
                step=t, epoch=ep.epoch, slot=ep.slot))
        return out

    # -- snapshotting -----------------------------------------------------

    def state_sections(self, prefix="buf"):
        """Flatten to checkpoint sections; ragged episodes go through a
        lengths array.  Byte-exact round trip."""
        ids = self.object_ids()
        sections = {f"{prefix}_meta": np.array([self.capacity, self.inserted, len(ids)],
                                               dtype=np.int64)}
        for oid in ids:
            dq = self._episodes[oid]
            lens = np.array([ep.length for ep in dq], dtype=np.int64)
            keys = np.array([[ep.epoch, ep.slot, int(ep.terminal)] for ep in dq],
                            dtype=np.int64)
            sections[f"{prefix}_o{oid}_lens"] = lens
            sections[f"{prefix}_o{oid}_keys"] = keys.reshape(-1)
            sections[f"{prefix}_o{oid}_goals"] = np.concatenate([ep.goal for ep in dq])
            sections[f"{prefix}_o{oid}_cores"] = np.concatenate(
                [ep.cores.reshape(-1) for ep in dq])
            sections[f"{prefix}_o{oid}_actions"] = np.concatenate(
                [ep.actions.reshape(-1) for ep in dq])
            sections[f"{prefix}_o{oid}_achieved"] = np.concatenate(
                [ep.achieved.reshape(-1) for ep in dq])
            sections[f"{prefix}_o{oid}_rewards"] = np.concatenate(
                [ep.rewards for ep in dq])
        return sections

    @classmethod
    def from_sections(cls, sections, prefix="buf"):
        get = sections
        capacity, inserted, n_ids = (int(v) for v in get[f"{prefix}_meta"])
        buf = cls(capacity=capacity)
        oids = sorted(int(k[len(prefix) + 2:-5]) for k in get
                      if k.startswith(f"{prefix}_o") and k.endswith("_lens"))
        if len(oids) != n_ids:
            raise MalformedEpisode("snapshot object count mismatch")
        for oid in oids:
            lens = get[f"{prefix}_o{oid}_lens"].astype(np.int64)
            keys = get[f"{prefix}_o{oid}_keys"].astype(np.int64).reshape(-1, 3)
            goals = get[f"{prefix}_o{oid}_goals"].reshape(-1, 4)
            cores = get[f"{prefix}_o{oid}_cores"]
            actions = get[f"{prefix}_o{oid}_actions"]
            achieved = get[f"{prefix}_o{oid}_achieved"]
            rewards = get[f"{prefix}_o{oid}_rewards"]
            dq = deque(maxlen=capacity)
            c0 = a0 = q0 = r0 = 0
            for i, ln in enumerate(int(v) for v in lens):
                c1 = c0 + (ln + 1) * CORE_DIM
                a1 = a0 + ln * ACTION_DIM
                q1 = q0 + (ln + 1) * 4
                dq.append(_Episode(
                    object_id=oid, epoch=int(keys[i, 0]), slot=int(keys[i, 1]),
                    terminal=bool(keys[i, 2]), goal=goals[i].copy(),
                    cores=cores[c0:c1].reshape(ln + 1, CORE_DIM).copy(),
                    actions=actions[a0:a1].reshape(ln, ACTION_DIM).copy(),
                    achieved=achieved[q0:q1].reshape(ln + 1, 4).copy(),
                    rewards=rewards[r0:r0 + ln].copy()))
                c0, a0, q0, r0 = c1, a1, q1, r0 + ln
            buf._episodes[oid] = dq
        buf.inserted = inserted
        return buf


def stack_batch(transitions):
    """Column arrays for a sampled batch, in network-ready layout."""
    if not transitions:
        raise EmptyBuffer("empty batch")
    return {
        "obs_core": np.stack([t.obs_core for t in transitions]),
        "action": np.stack([t.action for t in transitions]),
        "reward": np.array([t.reward for t in transitions]),
        "next_obs_core": np.stack([t.next_obs_core for t in transitions]),
        "achieved": np.stack([t.achieved for t in transitions]),
        "achieved_next": np.stack([t.achieved_next for t in transitions]),
        "goal": np.stack([t.goal for t in transitions]),
        "done": np.array([float(t.done) for t in transitions]),
        "step": np.array([t.step for t in transitions], dtype=np.int64),
        "epoch": np.array([t.epoch for t in transitions], dtype=np.int64),
        "slot": np.array([t.slot for t in transitions], dtype=np.int64),
        "object_id": transitions[0].object_id,
    }
