"""Desk-scale reach-and-remove task.

A point end-effector moves inside a workspace box containing a few small
attachment spheres; touching a sphere removes it. Observations are the
frozen encoder's embedding of a partial-view cloud of the remaining spheres,
concatenated with the end-effector position. Also houses the ground-truth
reward oracle (never shown to the reward learner), a synthetic single-camera
renderer, a 3-joint resolved-rate arm replayer, and the open-loop
convergence detector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autoencoder import AEConfig, encode
from .optim import ParamSet
from .pointcloud import farthest_point_sample


@dataclass
class TaskParams:
    """Episode-level knobs shared by every scene of a run."""

    n_points: int = 2
    sphere_radius: float = 0.01
    reach_radius: float = 0.02
    d_max: float = 0.02
    horizon: int = 30
    epsilon: float = 1e-4
    pts_per_sphere: int = 256
    cloud_points: int = 64
    workspace_min: tuple = (0.0, 0.0, 0.0)
    workspace_max: tuple = (0.2, 0.2, 0.2)
    camera_position: tuple = (0.1, -0.25, 0.32)

    @property
    def box(self):
        return np.asarray(self.workspace_min, float), np.asarray(self.workspace_max, float)


@dataclass
class SceneConfig:
    attachment_points: np.ndarray
    sphere_radius: float
    workspace_min: np.ndarray
    workspace_max: np.ndarray
    camera_position: np.ndarray
    camera_target: np.ndarray
    seed: int

    def __post_init__(self):
        self.attachment_points = np.atleast_2d(np.asarray(self.attachment_points, float))
        for name in ("workspace_min", "workspace_max", "camera_position", "camera_target"):
            setattr(self, name, np.asarray(getattr(self, name), float))
        if not np.all(self.workspace_min < self.workspace_max):
            raise ValueError("workspace_min must be componentwise below workspace_max")
        n = len(self.attachment_points)
        if not 1 <= n <= 4:
            raise ValueError(f"need 1..4 attachment points, got {n}")
        inside = (self.attachment_points >= self.workspace_min) & \
                 (self.attachment_points <= self.workspace_max)
        if not inside.all():
            raise ValueError("attachment points must lie inside the workspace")

    def to_dict(self):
        return {
            "attachment_points": self.attachment_points.tolist(),
            "sphere_radius": self.sphere_radius,
            "workspace_min": self.workspace_min.tolist(),
            "workspace_max": self.workspace_max.tolist(),
            "camera_position": self.camera_position.tolist(),
            "camera_target": self.camera_target.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _derived_rng(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(int(k) for k in keys)))


def sample_scene(n_points: int, seed: int, task: TaskParams | None = None) -> SceneConfig:
    """Random scene: two spheres go on a horizontal line with dy/dx slope in
    [-1, 1] at constant z; other counts are uniform in an inner sub-box."""
    task = task or TaskParams()
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    lo, hi = task.box
    extent = hi - lo
    margin = 0.15 * extent
    ilo, ihi = lo + margin, hi - margin
    rng = _derived_rng(seed, 0x5CE4E)
    min_sep = 3.0 * task.reach_radius

    if n_points == 2:
        while True:
            z = rng.uniform(ilo[2], ihi[2])
            slope = rng.uniform(-1.0, 1.0)
            direction = np.array([1.0, slope, 0.0])
            direction /= np.linalg.norm(direction)
            mid = np.array([rng.uniform(ilo[0], ihi[0]), rng.uniform(ilo[1], ihi[1]), z])
            sep = rng.uniform(max(min_sep, 0.25 * extent[0]), 0.6 * extent[0])
            pts = np.stack([mid - 0.5 * sep * direction, mid + 0.5 * sep * direction])
            if np.all(pts >= ilo) and np.all(pts <= ihi):
                break
    else:
        while True:
            pts = rng.uniform(ilo, ihi, size=(n_points, 3))
            if n_points == 1:
                break
            d = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
            if d[np.triu_indices(n_points, 1)].min() >= min_sep:
                break
    return SceneConfig(
        attachment_points=pts,
        sphere_radius=task.sphere_radius,
        workspace_min=lo,
        workspace_max=hi,
        camera_position=np.asarray(task.camera_position, float),
        camera_target=0.5 * (lo + hi),
        seed=int(seed),
    )


def sentinel_cloud(scene: SceneConfig, n_out: int) -> np.ndarray:
    """Empty-scene stand-in: the far workspace corner replicated, so the
    frozen encoder still receives a valid cloud once every sphere is gone."""
    return np.tile(scene.workspace_max, (n_out, 1))


def render_partial_cloud(scene: SceneConfig, remaining, task: TaskParams,
                         seed: int, n_out: int | None = None) -> np.ndarray:
    """Sample remaining spheres' surfaces, cull camera-averted points, then
    downsample to n_out by farthest-point sampling. Deterministic per seed."""
    n_out = task.cloud_points if n_out is None else n_out
    remaining = np.asarray(remaining, bool)
    centers = scene.attachment_points[remaining]
    if len(centers) == 0:
        return sentinel_cloud(scene, n_out)
    rng = _derived_rng(seed, 0xC10BD)
    m = task.pts_per_sphere
    kept = []
    for _ in range(8):  # retry with a denser sampling if culling leaves too few
        kept = []
        for center in centers:
            u = rng.normal(size=(m, 3))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            pts = center + scene.sphere_radius * u
            facing = np.einsum("ij,ij->i", pts - center, pts - scene.camera_position) < 0.0
            kept.append(pts[facing])
        kept = np.concatenate(kept, axis=0)
        if len(kept) >= n_out:
            break
        m *= 2
    if len(kept) < n_out:
        raise RuntimeError("render_partial_cloud: culling removed too many points")
    return farthest_point_sample(kept, n_out, seed=int(seed) ^ 0x7A9)


def gt_reward(eef, remaining_points, epsilon: float) -> float:
    """Oracle: max over remaining points of 1/(squared distance + epsilon).

    Empty set means the task is complete; those steps are reward-neutral.
    """
    pts = np.atleast_2d(np.asarray(remaining_points, float))
    if pts.size == 0:
        return 0.0
    d2 = ((pts - np.asarray(eef, float)) ** 2).sum(axis=1)
    return float((1.0 / (d2 + epsilon)).max())


@dataclass
class EnvState:
    eef: np.ndarray
    remaining: np.ndarray
    t: int


@dataclass
class Observation:
    embedding: np.ndarray
    eef: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.embedding, self.eef])


class ReachEnv:
    """One episode owner: steps the end-effector, removes touched spheres,
    and re-encodes the partial-view cloud whenever the remaining set changes
    (the cloud depends only on that set, so this equals re-rendering every
    step)."""

    def __init__(self, scene: SceneConfig, task: TaskParams, enc_params: ParamSet,
                 enc_cfg: AEConfig):
        self.scene = scene
        self.task = task
        self.enc_params = enc_params
        self.enc_cfg = enc_cfg
        self.state: EnvState | None = None
        self.clamp_warnings = 0
        self.removal_events: list[tuple[int, int]] = []
        self._embed_cache: dict[tuple, np.ndarray] = {}

    def _embedding(self, remaining) -> np.ndarray:
        key = tuple(bool(r) for r in remaining)
        hit = self._embed_cache.get(key)
        if hit is not None:
            return hit
        mask_bits = sum(1 << i for i, r in enumerate(key) if r)
        cloud = render_partial_cloud(self.scene, remaining, self.task,
                                     seed=_mix_seed(self.scene.seed, mask_bits),
                                     n_out=self.enc_cfg.input_points)
        z = encode(cloud, self.enc_params, self.enc_cfg)
        self._embed_cache[key] = z
        return z

    def observation(self) -> Observation:
        st = self.state
        return Observation(self._embedding(st.remaining).copy(), st.eef.copy())

    def reset(self, episode_seed: int = 0, eef0=None) -> Observation:
        lo, hi = self.task.box
        if eef0 is None:
            eef0 = _derived_rng(self.scene.seed, episode_seed, 0xEEF).uniform(lo, hi)
        eef0 = np.clip(np.asarray(eef0, float), lo, hi)
        self.state = EnvState(eef=eef0, remaining=np.ones(len(self.scene.attachment_points), bool),
                              t=0)
        self.removal_events = []
        return self.observation()

    def step(self, action) -> tuple[Observation, float, bool, dict]:
        """Move toward `action` (displacement capped at d_max), remove any
        reached sphere, return (obs, gt_reward, done, info).

        The oracle reward is evaluated at the post-move end-effector against
        the spheres present before this step's removals, so the contact step
        itself collects the close-range spike.
        """
        st = self.state
        lo, hi = self.task.box
        target = np.asarray(action, float)
        clamped = np.clip(target, lo, hi)
        if not np.array_equal(clamped, target):
            self.clamp_warnings += 1
        delta = clamped - st.eef
        dist = float(np.linalg.norm(delta))
        if dist > self.task.d_max:
            delta = delta * (self.task.d_max / dist)
        new_eef = st.eef + delta

        before = st.remaining.copy()
        reward = gt_reward(new_eef, self.scene.attachment_points[before], self.task.epsilon) \
            if before.any() else 0.0

        removed_now = []
        for i in np.flatnonzero(before):
            if np.linalg.norm(new_eef - self.scene.attachment_points[i]) <= self.task.reach_radius:
                st.remaining[i] = False
                removed_now.append(int(i))
        st.eef = new_eef
        st.t += 1
        for i in removed_now:
            self.removal_events.append((st.t, i))
        done = bool(not st.remaining.any() or st.t >= self.task.horizon)
        return self.observation(), reward, done, {"removed": removed_now,
                                                  "success": bool(not st.remaining.any())}


def _mix_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# 3-revolute arm and resolved-rate waypoint replay
# ---------------------------------------------------------------------------


@dataclass
class ArmModel:
    """Yaw-pitch-pitch arm: joint 1 about z at the base, joints 2-3 pitch the
    two distal links within the rotated vertical plane."""

    link_lengths: tuple = (0.12, 0.3, 0.3)
    joint_angles: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.6, -0.9]))
    base: np.ndarray = field(default_factory=lambda: np.array([0.1, -0.25, 0.0]))

    def joint_positions(self, q=None):
        q = self.joint_angles if q is None else np.asarray(q, float)
        l1, l2, l3 = self.link_lengths
        e_r = np.array([np.cos(q[0]), np.sin(q[0]), 0.0])
        e_z = np.array([0.0, 0.0, 1.0])
        p0 = np.asarray(self.base, float)
        p1 = p0 + l1 * e_z
        p2 = p1 + l2 * (np.cos(q[1]) * e_r + np.sin(q[1]) * e_z)
        p3 = p2 + l3 * (np.cos(q[1] + q[2]) * e_r + np.sin(q[1] + q[2]) * e_z)
        return p0, p1, p2, p3

    def forward(self, q=None) -> np.ndarray:
        return self.joint_positions(q)[3]

    def jacobian(self, q=None) -> np.ndarray:
        """Geometric position Jacobian, 3x3: column i is z_i x (p_eef - p_i)."""
        q = self.joint_angles if q is None else np.asarray(q, float)
        p0, p1, p2, p3 = self.joint_positions(q)
        axis_yaw = np.array([0.0, 0.0, 1.0])
        # positive pitch lifts the link from the radial direction toward +z
        axis_pitch = np.array([np.sin(q[0]), -np.cos(q[0]), 0.0])
        cols = [np.cross(axis_yaw, p3 - p0),
                np.cross(axis_pitch, p3 - p1),
                np.cross(axis_pitch, p3 - p2)]
        return np.stack(cols, axis=1)


@dataclass
class ReplayResult:
    joint_path: list
    eef_path: list
    waypoint_steps: list
    dls_steps: int = 0
    converged: bool = True


def resolved_rate_replay(waypoints, arm: ArmModel, dt: float = 0.05, tol: float = 1e-3,
                         max_steps_per_waypoint: int = 200, damping: float = 1e-2,
                         sigma_min: float = 1e-6) -> ReplayResult:
    """Drive joints so the end-effector visits each waypoint in order.

    Joint velocity is pinv(J) @ (target - eef) / dt, integrated at dt; near a
    singularity (smallest singular value below sigma_min) the update falls
    back to damped least squares and the step is flagged.
    """
    q = np.asarray(arm.joint_angles, float).copy()
    out = ReplayResult(joint_path=[q.copy()], eef_path=[arm.forward(q)], waypoint_steps=[])
    for target in waypoints:
        target = np.asarray(target, float)
        converged = False
        for _ in range(max_steps_per_waypoint):
            eef = arm.forward(q)
            err = target - eef
            if np.linalg.norm(err) < tol:
                converged = True
                break
            J = arm.jacobian(q)
            if np.linalg.svd(J, compute_uv=False)[-1] < sigma_min:
                dq = J.T @ np.linalg.solve(J @ J.T + damping ** 2 * np.eye(3), err / dt)
                out.dls_steps += 1
            else:
                dq = np.linalg.pinv(J) @ (err / dt)
            q = q + dq * dt
            out.joint_path.append(q.copy())
            out.eef_path.append(arm.forward(q))
        out.waypoint_steps.append(len(out.joint_path) - 1)
        if not converged:
            out.converged = False
    return out


# ---------------------------------------------------------------------------
# open-loop convergence detector
# ---------------------------------------------------------------------------


def convergence_fire_index(eef_history, mean_tol: float = 0.005,
                           std_tol: float = 0.001) -> int | None:
    """First step index (1-based, needs >= 2 samples) where both the running
    componentwise mean and std move less than their tolerances in L2."""
    hist = np.asarray(eef_history, float)
    if len(hist) < 2:
        raise ValueError("convergence detector needs at least 2 positions")
    prev_mean = hist[0].copy()
    prev_std = np.zeros(3)
    for t in range(2, len(hist) + 1):
        prefix = hist[:t]
        mean = prefix.mean(axis=0)
        std = prefix.std(axis=0)
        if (np.linalg.norm(mean - prev_mean) < mean_tol
                and np.linalg.norm(std - prev_std) < std_tol):
            return t
        prev_mean, prev_std = mean, std
    return None


def convergence_detector(eef_history, mean_tol: float = 0.005, std_tol: float = 0.001) -> bool:
    return convergence_fire_index(eef_history, mean_tol, std_tol) is not None
