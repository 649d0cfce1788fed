"""Suboptimal demonstrations, GT ranking, and pairwise preference datasets.

A demonstration picks how many attachment points it will visit (possibly
none), schedules those visits at random timesteps, and wanders between
random workspace waypoints otherwise, so the pool spans failures through
near-successes. Pairs are only ever formed within a scene set, labeled by
the oracle return unless a human label file is supplied.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .sim import Observation, ReachEnv, SceneConfig, TaskParams, _derived_rng, gt_reward

_TRAJ_MAGIC = "prefreach-trajectories"
_PAIR_MAGIC = "prefreach-pairs"
_FORMAT_VERSION = 1


@dataclass
class Trajectory:
    traj_id: str
    scene_id: str
    observations: list[Observation]
    actions: np.ndarray | None
    removal_events: list[tuple[int, int]] = field(default_factory=list)
    gt_return: float | None = None

    def __post_init__(self):
        if self.actions is not None:
            self.actions = np.asarray(self.actions, float)
            if len(self.actions) != len(self.observations) - 1:
                raise ValueError("need exactly len(observations)-1 actions")

    @property
    def length(self):
        return len(self.observations)

    def eef_path(self) -> np.ndarray:
        return np.stack([o.eef for o in self.observations])

    def obs_matrix(self) -> np.ndarray:
        return np.stack([o.vector() for o in self.observations])

    def remaining_before(self, t: int, n_points: int) -> np.ndarray:
        """Presence mask at observation t, counting a sphere removed at t as
        still present (the contact observation collects the spike)."""
        mask = np.ones(n_points, bool)
        for step, idx in self.removal_events:
            if step < t:
                mask[idx] = False
        return mask


@dataclass
class PreferencePair:
    pair_id: str
    traj_i: str
    traj_j: str
    label: int  # 0: traj_i preferred, 1: traj_j preferred
    provenance: str = "gt"

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.provenance not in ("gt", "human"):
            raise ValueError(f"provenance must be gt|human, got {self.provenance}")

    def preferred(self) -> str:
        return self.traj_j if self.label else self.traj_i


@dataclass
class RankingDataset:
    K: int
    C: int
    trajectories: dict
    scenes: dict
    pairs: list
    test_pairs: list
    train_scene_ids: list
    test_scene_ids: list
    meta: dict = field(default_factory=dict)

    @property
    def M(self):
        return len(self.pairs)


# ---------------------------------------------------------------------------
# demonstration generation
# ---------------------------------------------------------------------------


def default_init_eef(scene: SceneConfig, task: TaskParams) -> np.ndarray:
    """Per-scene fixed start so every demo of a set shares its initial
    configuration (pairs stay comparable under the oracle return)."""
    lo, hi = task.box
    return _derived_rng(scene.seed, 0x1EEF).uniform(lo, hi)


def generate_suboptimal_trajectory(env: ReachEnv, traj_id: str, seed: int,
                                   init_eef=None) -> Trajectory:
    """Random demo: visits a random subset of attachment points at random
    scheduled steps, wandering between uniform waypoints in between."""
    task, scene = env.task, env.scene
    rng = _derived_rng(scene.seed, seed, 0xDE305)
    n = len(scene.attachment_points)
    n_steps = task.horizon - 1
    n_reach = int(rng.integers(0, n + 1))
    targets = rng.choice(n, size=n_reach, replace=False)
    times = np.sort(rng.choice(n_steps, size=n_reach, replace=False))
    schedule = dict(zip(times.tolist(), targets.tolist()))

    if init_eef is None:
        init_eef = default_init_eef(scene, task)
    obs = env.reset(eef0=init_eef)
    observations = [obs]
    actions = []
    lo, hi = task.box
    waypoint = None
    pending = None  # attachment index currently being pursued
    for t in range(n_steps):
        if pending is None and t in schedule and env.state.remaining[schedule[t]]:
            pending = schedule[t]
        if pending is not None and not env.state.remaining[pending]:
            pending = None
        if pending is not None:
            target = scene.attachment_points[pending]
        else:
            if waypoint is None or np.linalg.norm(env.state.eef - waypoint) <= task.d_max:
                waypoint = rng.uniform(lo, hi)
            target = waypoint
        obs, _, _, _ = env.step(target)
        observations.append(obs)
        actions.append(np.asarray(target, float))
    return Trajectory(traj_id=traj_id, scene_id=f"scene-{scene.seed}",
                      observations=observations, actions=np.stack(actions),
                      removal_events=list(env.removal_events))


def generate_expert_trajectory(env: ReachEnv, traj_id: str, init_eef=None) -> Trajectory:
    """Scripted expert: head for the nearest remaining attachment point,
    stay put once the scene is cleared."""
    task, scene = env.task, env.scene
    if init_eef is None:
        init_eef = default_init_eef(scene, task)
    obs = env.reset(eef0=init_eef)
    observations = [obs]
    actions = []
    for _ in range(task.horizon - 1):
        if env.state.remaining.any():
            pts = scene.attachment_points[env.state.remaining]
            target = pts[np.linalg.norm(pts - env.state.eef, axis=1).argmin()]
        else:
            target = env.state.eef.copy()
        obs, _, _, _ = env.step(target)
        observations.append(obs)
        actions.append(np.asarray(target, float))
    return Trajectory(traj_id=traj_id, scene_id=f"scene-{scene.seed}",
                      observations=observations, actions=np.stack(actions),
                      removal_events=list(env.removal_events))


def generate_demo_sets(enc_params, enc_cfg, task: TaskParams, n_sets: int,
                       per_set: int, base_seed: int, expert: bool = False,
                       log=None):
    """K scene sets with C demos each -> (sets, scenes dict)."""
    from .sim import sample_scene

    sets, scenes = [], {}
    for k in range(n_sets):
        scene = sample_scene(task.n_points, seed=int(_derived_rng(base_seed, k).integers(2 ** 31)),
                             task=task)
        scene_id = f"scene-{scene.seed}"
        scenes[scene_id] = scene
        env = ReachEnv(scene, task, enc_params, enc_cfg)
        group = []
        for c in range(per_set):
            tid = f"{scene_id}-t{c}"
            if expert:
                group.append(generate_expert_trajectory(env, tid))
            else:
                group.append(generate_suboptimal_trajectory(env, tid, seed=c))
        sets.append(group)
        if log is not None:
            log(f"scene set {k + 1}/{n_sets} done")
    return sets, scenes


def trajectory_success(traj: Trajectory, n_points: int) -> bool:
    return len({idx for _, idx in traj.removal_events}) == n_points


# ---------------------------------------------------------------------------
# ranking and pair construction
# ---------------------------------------------------------------------------


def rank_by_gt(trajs: list[Trajectory], scene: SceneConfig, epsilon: float) -> list[Trajectory]:
    """Annotate each trajectory with its undiscounted oracle return (gamma=1).

    Returns are sums over all observations; a sphere removed at step t still
    counts for step t's reward.
    """
    scene_ids = {t.scene_id for t in trajs}
    if len(scene_ids) > 1:
        raise ValueError(f"rank_by_gt: trajectories span scenes {sorted(scene_ids)}")
    n = len(scene.attachment_points)
    for traj in trajs:
        total = 0.0
        for t, obs in enumerate(traj.observations):
            mask = traj.remaining_before(t, n)
            total += gt_reward(obs.eef, scene.attachment_points[mask], epsilon)
        traj.gt_return = total
    return trajs


def candidate_pairs(ranked: list[Trajectory], tie_tol: float) -> list[tuple]:
    """Within-set unordered pairs with a return gap above the tie tolerance."""
    out = []
    for a in range(len(ranked)):
        for b in range(a + 1, len(ranked)):
            if abs(ranked[a].gt_return - ranked[b].gt_return) > tie_tol:
                out.append((ranked[a], ranked[b]))
    return out


def pair_count(m: int) -> int:
    return (m * m - m) // 2


def build_pairs(sets: list[list[Trajectory]], scenes: dict, m_pairs: int,
                with_replacement: bool, seed: int, tie_tol_rel: float = 1e-6,
                test_fraction: float = 0.1) -> RankingDataset:
    """Sample m_pairs labeled preferences from the train scene sets; all
    candidate pairs of the held-out sets become the test split."""
    for group in sets:
        if any(t.gt_return is None for t in group):
            raise ValueError("build_pairs: sets must be ranked first (gt_return missing)")
    rng = _derived_rng(seed, 0x9A185)
    order = rng.permutation(len(sets))
    n_test = max(1, int(round(test_fraction * len(sets)))) if len(sets) > 1 else 0
    test_idx = set(order[:n_test].tolist())

    def label_pair(pid, a, b):
        label = 0 if a.gt_return > b.gt_return else 1
        return PreferencePair(pair_id=pid, traj_i=a.traj_id, traj_j=b.traj_id, label=label)

    train_candidates, test_pairs = [], []
    train_ids, test_ids = [], []
    for k, group in enumerate(sets):
        tie_tol = tie_tol_rel * max(abs(t.gt_return) for t in group)
        cands = candidate_pairs(group, tie_tol)
        sid = group[0].scene_id
        if k in test_idx:
            test_ids.append(sid)
            test_pairs.extend(label_pair(f"test-{k}-{i}", a, b)
                              for i, (a, b) in enumerate(cands))
        else:
            train_ids.append(sid)
            train_candidates.extend(cands)

    if not with_replacement and m_pairs > len(train_candidates):
        raise ValueError(f"build_pairs: requested {m_pairs} pairs without replacement "
                         f"but only {len(train_candidates)} candidates exist")
    picks = rng.integers(len(train_candidates), size=m_pairs) if with_replacement \
        else rng.permutation(len(train_candidates))[:m_pairs]
    pairs = [label_pair(f"pair-{i}", *train_candidates[p]) for i, p in enumerate(picks)]

    trajectories = {t.traj_id: t for group in sets for t in group}
    return RankingDataset(
        K=len(sets), C=len(sets[0]) if sets else 0,
        trajectories=trajectories, scenes=scenes,
        pairs=pairs, test_pairs=test_pairs,
        train_scene_ids=train_ids, test_scene_ids=test_ids,
        meta={"K": len(sets), "C": len(sets[0]) if sets else 0, "M": m_pairs,
              "with_replacement": with_replacement, "seed": seed},
    )


# ---------------------------------------------------------------------------
# persistence: line-delimited records with a header line
# ---------------------------------------------------------------------------


def _floats(values):
    return np.asarray(values, float).tolist()


def save_trajectories(path, trajectories, scenes, meta=None):
    with open(path, "w") as f:
        header = {"magic": _TRAJ_MAGIC, "version": _FORMAT_VERSION, "meta": meta or {},
                  "scenes": {sid: sc.to_dict() for sid, sc in sorted(scenes.items())}}
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for traj in trajectories:
            rec = {
                "traj_id": traj.traj_id,
                "scene_id": traj.scene_id,
                "emb": [_floats(o.embedding) for o in traj.observations],
                "eef": [_floats(o.eef) for o in traj.observations],
                "actions": None if traj.actions is None else _floats(traj.actions),
                "removals": [[int(t), int(i)] for t, i in traj.removal_events],
                "gt_return": traj.gt_return,
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_trajectories(path):
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("magic") != _TRAJ_MAGIC:
            raise ValueError(f"{path}: not a trajectory file")
        if header.get("version") != _FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported trajectory format version "
                             f"{header.get('version')}")
        scenes = {sid: SceneConfig.from_dict(d) for sid, d in header["scenes"].items()}
        trajectories = {}
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            obs = [Observation(np.array(e, float), np.array(p, float))
                   for e, p in zip(rec["emb"], rec["eef"])]
            traj = Trajectory(
                traj_id=rec["traj_id"], scene_id=rec["scene_id"], observations=obs,
                actions=None if rec["actions"] is None else np.array(rec["actions"], float),
                removal_events=[(int(t), int(i)) for t, i in rec["removals"]],
                gt_return=rec["gt_return"],
            )
            if traj.scene_id not in scenes:
                raise ValueError(f"{path}: trajectory {traj.traj_id} references unknown "
                                 f"scene {traj.scene_id}")
            trajectories[traj.traj_id] = traj
    return trajectories, scenes, header["meta"]


def save_pairs(path, pairs, meta=None):
    with open(path, "w") as f:
        f.write(json.dumps({"magic": _PAIR_MAGIC, "version": _FORMAT_VERSION,
                            "meta": meta or {}}, sort_keys=True) + "\n")
        for p in pairs:
            f.write(json.dumps({"pair_id": p.pair_id, "traj_i": p.traj_i,
                                "traj_j": p.traj_j, "label": p.label,
                                "provenance": p.provenance}, sort_keys=True) + "\n")


def append_pair(path, pair: PreferencePair):
    with open(path, "a") as f:
        f.write(json.dumps({"pair_id": pair.pair_id, "traj_i": pair.traj_i,
                            "traj_j": pair.traj_j, "label": pair.label,
                            "provenance": pair.provenance}, sort_keys=True) + "\n")


def load_pairs(path, known_traj_ids=None):
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("magic") != _PAIR_MAGIC:
            raise ValueError(f"{path}: not a pair file")
        if header.get("version") != _FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported pair format version {header.get('version')}")
        pairs = []
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            pair = PreferencePair(pair_id=rec["pair_id"], traj_i=rec["traj_i"],
                                  traj_j=rec["traj_j"], label=int(rec["label"]),
                                  provenance=rec.get("provenance", "gt"))
            if known_traj_ids is not None and (pair.traj_i not in known_traj_ids
                                               or pair.traj_j not in known_traj_ids):
                raise ValueError(f"{path}: pair {pair.pair_id} references a missing trajectory")
            pairs.append(pair)
    return pairs, header["meta"]
