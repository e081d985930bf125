"""Goal-conditioned rotation proxy environment.

A rigid body with mesh-derived inertia floats in a virtual 20-actuator
torque rig.  Actions are desired joint positions in [-1, 1]^20; joints move
toward them with a configurable first-order lag, a fixed full-rank 3x20 map
turns joint positions into a body torque (clamped per axis), and the
attitude integrates the body-frame Euler rotation equations at 25 Hz.
Geometry enters through the inertia tensor and through the surface point
clouds in the observation.  Reward is 1 iff the orientation is within 0.1
radians of the goal.

The rig replaces contact-rich hand physics: same observation, action, goal,
and reward interfaces, but no contacts and no dropping.  That fidelity gap
is deliberate; it keeps the task desk-scale while dynamics still depend on
object shape.
"""

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels, rng
from . import mesh as _mesh
from . import rotmath
from .errors import (ConfigError, EpisodeOver, NonFiniteAction, UnknownObject)

ACTION_DIM = 20
REWARD_THRESHOLD_RAD = 0.1
S_R_DIM = 2 * ACTION_DIM
S_O_DIM = 13
CORE_DIM = S_R_DIM + S_O_DIM      # observation without the goal
OBS_DIM = CORE_DIM + 4            # with the goal quaternion

_ACTION_MAP_KEY = 20240917        # rig wiring is a fixture, not a run choice


def action_map(tau_max):
    """Fixed full-rank 3x20 joint-to-torque map, shared by every object and
    every run; rows are unit-norm scaled by the torque clamp."""
    gen = np.random.default_rng(np.random.SeedSequence(_ACTION_MAP_KEY))
    m = gen.standard_normal((3, ACTION_DIM))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    if np.linalg.matrix_rank(m) != 3:
        raise ConfigError("action map lost rank (should be impossible)")
    return tau_max * m


@dataclass(frozen=True)
class ObjectRecord:
    name: str
    mesh: _mesh.Mesh
    mass: float
    inertia: np.ndarray           # (3,3) body frame, about the AABB center
    procedural: dict | None = None
    mesh_path: str | None = None


@dataclass(frozen=True)
class EnvState:
    object_id: int
    orientation: np.ndarray       # unit quaternion (w, x, y, z)
    angvel: np.ndarray            # (3,) rad/s, body frame
    position: np.ndarray          # (3,) m
    linvel: np.ndarray            # (3,) m/s
    goal: np.ndarray              # unit quaternion
    step: int
    inertia: np.ndarray           # (3,3)
    joints: np.ndarray            # (ACTION_DIM,) virtual joint positions
    joint_vel: np.ndarray         # (ACTION_DIM,)


@dataclass(frozen=True)
class Observation:
    s_r: np.ndarray               # (40,) joint positions and velocities
    s_o: np.ndarray               # (13,) pos, quat, linvel, angvel
    goal: np.ndarray              # (4,)
    cloud_current: _mesh.PointCloud | None = None
    cloud_goal: _mesh.PointCloud | None = None

    def core(self):
        return np.concatenate([self.s_r, self.s_o])

    def vector(self):
        return np.concatenate([self.s_r, self.s_o, self.goal])


def compute_reward(achieved, goal):
    """1 iff the geodesic angle to the goal is within the 0.1 rad band."""
    return 1.0 if rotmath.geodesic_angle(achieved, goal) <= REWARD_THRESHOLD_RAD else 0.0


def compute_reward_batch(achieved, goals):
    return (rotmath.geodesic_angle_batch(achieved, goals) <= REWARD_THRESHOLD_RAD).astype(np.float64)


class TorqueRigEnv:
    """Single-object environment instance.  Instances hold only static
    configuration; all episode state lives in EnvState, so stepping is a
    pure function and replaying an action log is bit-exact."""

    def __init__(self, record, object_id=0, goal_mode="z-axis", episode_len=50,
                 dt=0.04, tau_max=2e-3, damping=8e-4, cloud_n=128,
                 include_cloud=False, joint_beta=1.0, diag_goal_is_start=False):
        if goal_mode not in ("z-axis", "so3"):
            raise ConfigError(f"goal_mode {goal_mode!r}")
        if not (0.0 < joint_beta <= 1.0):
            raise ConfigError("joint_beta must be in (0, 1]")
        self.record = record
        self.object_id = int(object_id)
        self.goal_mode = goal_mode
        self.episode_len = int(episode_len)
        self.dt = float(dt)
        self.tau_max = float(tau_max)
        self.damping = float(damping)
        self.cloud_n = int(cloud_n)
        self.include_cloud = bool(include_cloud)
        self.joint_beta = float(joint_beta)
        self.diag_goal_is_start = bool(diag_goal_is_start)
        self.inertia = np.ascontiguousarray(record.inertia, dtype=np.float64)
        self.inv_inertia = np.ascontiguousarray(np.linalg.inv(self.inertia))
        self.map = np.ascontiguousarray(action_map(tau_max))

    # -- episode lifecycle ------------------------------------------------

    def _sample_orientation(self, gen):
        if self.goal_mode == "z-axis":
            return rotmath.random_rotation_z(gen)
        return rotmath.random_rotation_so3(gen)

    def reset(self, reset_rng, cloud_rng=None):
        """Draw order: position noise (3 normals), initial orientation,
        goal orientation.  Velocities start at zero."""
        noise = np.sqrt(5e-5) * reset_rng.standard_normal(3)
        init_q = self._sample_orientation(reset_rng)
        goal_q = self._sample_orientation(reset_rng)
        if self.diag_goal_is_start:
            goal_q = init_q.copy()
        state = EnvState(object_id=self.object_id, orientation=init_q,
                         angvel=np.zeros(3), position=noise, linvel=np.zeros(3),
                         goal=goal_q, step=0, inertia=self.inertia,
                         joints=np.zeros(ACTION_DIM), joint_vel=np.zeros(ACTION_DIM))
        return state, self.observe(state, cloud_rng)

    def step(self, state, action, cloud_rng=None):
        """One control period: joints chase the commanded positions, the
        mapped torque drives the body-frame Euler equations, attitude
        integrates by the quaternion exponential and renormalizes."""
        if state.step >= self.episode_len:
            raise EpisodeOver(f"episode already at step {state.step}")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (ACTION_DIM,):
            raise NonFiniteAction(f"action shape {action.shape} != ({ACTION_DIM},)")
        if not np.all(np.isfinite(action)):
            raise NonFiniteAction("action has NaN or Inf")
        action = np.clip(action, -1.0, 1.0)

        joints = state.joints + self.joint_beta * (action - state.joints)
        joint_vel = (joints - state.joints) / self.dt
        tau = np.clip(self.map @ joints, -self.tau_max, self.tau_max)
        q_new, w_new = _kernels.physics_step(state.orientation, state.angvel,
                                             self.inertia, self.inv_inertia,
                                             tau, self.damping, self.dt)
        drift = abs(np.sqrt(np.dot(q_new, q_new)) - 1.0)
        if drift >= 1e-9:
            raise ConfigError(f"quaternion drift {drift} after renormalization")
        new_state = replace(state, orientation=q_new, angvel=w_new,
                            step=state.step + 1, joints=joints, joint_vel=joint_vel)
        reward = compute_reward(q_new, state.goal)
        done = new_state.step >= self.episode_len
        return new_state, self.observe(new_state, cloud_rng), reward, done

    def observe(self, state, cloud_rng=None):
        """Observation from state; in cloud mode a fresh surface sample is
        rotated to the current orientation, and the same sample rotated to
        the goal orientation forms the goal cloud (index-paired)."""
        s_r = np.concatenate([state.joints, state.joint_vel])
        s_o = np.concatenate([state.position, state.orientation,
                              state.linvel, state.angvel])
        cur = goal = None
        if self.include_cloud:
            if cloud_rng is None:
                raise ConfigError("cloud mode requires a cloud rng per observation")
            base = _mesh.sample_surface(self.record.mesh, self.cloud_n, cloud_rng)
            cur = _rotate_cloud(base, state.orientation)
            goal = _rotate_cloud(base, state.goal)
        return Observation(s_r=s_r, s_o=s_o, goal=state.goal.copy(),
                           cloud_current=cur, cloud_goal=goal)


def _rotate_cloud(cloud, q):
    r = rotmath.quat_to_matrix(q)
    return _mesh.PointCloud(points=_kernels.rotate_points(r, cloud.points),
                            normals=_kernels.rotate_points(r, cloud.normals))


def regenerate_cloud(record, cloud_n, seed, key):
    """Rebuild the object-frame cloud drawn under the given stream key.
    Replay storage keeps only keys; clouds are re-derived on demand."""
    return _mesh.sample_surface(record.mesh, cloud_n, rng.child(seed, *key))


# ---------------------------------------------------------------------------
# object registry
# ---------------------------------------------------------------------------

def build_record(mesh, mass=0.2, procedural=None, mesh_path=None, normalized=True):
    m = mesh if normalized else _mesh.normalize_scale(mesh)
    return ObjectRecord(name=m.name, mesh=m, mass=float(mass),
                        inertia=_mesh.inertia_tensor(m, float(mass)),
                        procedural=procedural, mesh_path=mesh_path)


def save_registry(dir_path, records):
    """Write normalized meshes as OBJ plus registry.json referencing them."""
    os.makedirs(dir_path, exist_ok=True)
    entries = []
    for rec in records:
        rel = f"{rec.name}.obj"
        _mesh.save_obj(os.path.join(dir_path, rel), rec.mesh)
        entries.append({
            "name": rec.name,
            "mesh_path": rel,
            "procedural": rec.procedural,
            "mass": rec.mass,
            "inertia": [[float(v) for v in row] for row in rec.inertia],
            "dropped_faces": rec.mesh.dropped_faces,
        })
    path = os.path.join(dir_path, "registry.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"version": 1, "objects": entries}, fh, indent=2, sort_keys=True)
    return path


def load_registry(path):
    """Load records in stored order; meshes are re-parsed from their OBJ
    files (bit-exact round-trip), inertia comes from the registry."""
    if os.path.isdir(path):
        path = os.path.join(path, "registry.json")
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    records = []
    for entry in data["objects"]:
        m = _mesh.load_mesh(os.path.join(base, entry["mesh_path"]))
        if m.name != entry["name"]:
            m = _mesh.Mesh(vertices=m.vertices.copy(), faces=m.faces.copy(),
                           face_normals=m.face_normals.copy(), name=entry["name"],
                           dropped_faces=m.dropped_faces)
        records.append(ObjectRecord(
            name=entry["name"], mesh=m, mass=float(entry["mass"]),
            inertia=np.array(entry["inertia"], dtype=np.float64),
            procedural=entry.get("procedural"),
            mesh_path=entry["mesh_path"]))
    return records


def select_records(records, names):
    by_name = {r.name: r for r in records}
    missing = [n for n in names if n not in by_name]
    if missing:
        raise UnknownObject(f"not in registry: {missing}")
    return [by_name[n] for n in names]


# deterministic procedural presets; sizes in meters before normalization.
# basic8 spans aspect ratios and shape families; heldout2 pairs a
# near-spherical object with a high-aspect-ratio box.
PRESETS = {
    "basic4": [
        {"kind": "box", "ax": 1.0, "ay": 1.0, "az": 1.0},
        {"kind": "box", "ax": 1.0, "ay": 2.28, "az": 1.0},
        {"kind": "ellipsoid", "rx": 1.0, "ry": 1.0, "rz": 1.0, "subdivision": 3},
        {"kind": "cylinder", "r": 1.0, "h": 2.1, "subdivision": 3},
    ],
    "basic8": [
        {"kind": "box", "ax": 1.0, "ay": 1.0, "az": 1.0},
        {"kind": "box", "ax": 1.0, "ay": 2.28, "az": 1.0},
        {"kind": "ellipsoid", "rx": 1.0, "ry": 1.0, "rz": 1.0, "subdivision": 3},
        {"kind": "cylinder", "r": 1.0, "h": 2.1, "subdivision": 3},
        {"kind": "box", "ax": 1.0, "ay": 2.6, "az": 0.22},
        {"kind": "ellipsoid", "rx": 1.0, "ry": 1.0, "rz": 0.48, "subdivision": 3},
        {"kind": "cylinder", "r": 1.0, "h": 1.15, "subdivision": 3},
        {"kind": "superellipsoid", "rx": 1.0, "ry": 1.35, "rz": 0.85,
         "e1": 0.5, "e2": 0.5, "subdivision": 3},
    ],
    "heldout2": [
        {"kind": "superellipsoid", "rx": 1.0, "ry": 1.04, "rz": 0.97,
         "e1": 1.0, "e2": 1.0, "subdivision": 3},
        {"kind": "box", "ax": 1.0, "ay": 2.4, "az": 0.95},
    ],
}
PRESETS["all10"] = PRESETS["basic8"] + PRESETS["heldout2"]


def preset_records(preset, mass=0.2):
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (have {sorted(PRESETS)})")
    records = []
    for spec in PRESETS[preset]:
        m = _mesh.normalize_scale(_mesh.procedural_object(spec))
        records.append(build_record(m, mass=mass, procedural=spec))
    return records
