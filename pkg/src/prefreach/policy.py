"""PPO on the reach task, against either the learned reward or the oracle.

Actions are raw 3-vectors squashed into the workspace box by a sigmoid (or
into a velocity box for the action-space ablation). Rollouts run a vector of
independent envs with fresh random scenes per episode; updates use the
clipped surrogate with GAE advantages. Behavioral-cloning baselines and the
open-loop trajectory selection used for execution live here too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import AdamState, ParamSet, adam_step
from .reward import RewardNet, reward_forward
from .sim import ReachEnv, TaskParams, _derived_rng, sample_scene

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class PPOConfig:
    n_workers: int = 32
    steps_per_update: int = 64
    epochs_per_update: int = 4
    minibatch_size: int = 512
    clip_ratio: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    learning_rate: float = 3e-4
    total_updates: int = 150
    action_mode: str = "position"  # "position" | "velocity"
    normalize_rewards: bool = True
    hidden: tuple = (64, 64)
    init_log_std: float = -0.5

    def __post_init__(self):
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("clip_ratio must be in (0,1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0,1]")
        if self.action_mode not in ("position", "velocity"):
            raise ValueError(f"unknown action_mode {self.action_mode}")


# ---------------------------------------------------------------------------
# squashing
# ---------------------------------------------------------------------------


def _np_sigmoid(x):
    x = np.asarray(x, float)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def squash_action(raw, lo, hi):
    """Componentwise lo + (hi-lo)*sigmoid(raw): strictly inside the box."""
    return np.asarray(lo, float) + (np.asarray(hi, float) - np.asarray(lo, float)) \
        * _np_sigmoid(raw)


def unsquash_action(action, lo, hi):
    s = (np.asarray(action, float) - lo) / (np.asarray(hi, float) - np.asarray(lo, float))
    return np.log(s) - np.log1p(-s)


def _squash_log_det(raw, lo, hi):
    """log |d squash / d raw| summed over components (stable softplus form)."""
    raw = np.asarray(raw, float)
    span = np.log(np.asarray(hi, float) - np.asarray(lo, float))
    log_s = -np.logaddexp(0.0, -raw)
    log_1ms = -np.logaddexp(0.0, raw)
    return (span + log_s + log_1ms).sum(axis=-1)


# ---------------------------------------------------------------------------
# policy network
# ---------------------------------------------------------------------------


@dataclass
class PolicyNet:
    params: ParamSet
    obs_dim: int
    hidden: tuple
    box_lo: np.ndarray
    box_hi: np.ndarray
    action_mode: str = "position"


def action_box_for_mode(task: TaskParams, mode: str):
    if mode == "position":
        return np.asarray(task.workspace_min, float), np.asarray(task.workspace_max, float)
    cap = task.d_max
    return np.full(3, -cap), np.full(3, cap)


def init_policy(obs_dim: int, task: TaskParams, cfg: PPOConfig, seed: int) -> PolicyNet:
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    for prefix in ("pol", "val"):
        widths = [obs_dim, *cfg.hidden]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            ps.add(f"{prefix}.w{i}", rng.normal(0, np.sqrt(1.0 / a), size=(a, b)))
            ps.add(f"{prefix}.b{i}", np.zeros(b))
    ps.add("pol.mean_w", rng.normal(0, 0.01 / np.sqrt(cfg.hidden[-1]),
                                    size=(cfg.hidden[-1], 3)))
    ps.add("pol.mean_b", np.zeros(3))
    ps.add("val.out_w", rng.normal(0, np.sqrt(1.0 / cfg.hidden[-1]),
                                   size=(cfg.hidden[-1], 1)))
    ps.add("val.out_b", np.zeros(1))
    ps.add("pol.log_std", np.full(3, cfg.init_log_std))
    lo, hi = action_box_for_mode(task, cfg.action_mode)
    return PolicyNet(params=ps, obs_dim=obs_dim, hidden=tuple(cfg.hidden),
                     box_lo=lo, box_hi=hi, action_mode=cfg.action_mode)


def _mlp(params, prefix, x, hidden):
    h = x
    for i in range(len(hidden)):
        h = ad.tanh(ad.add(ad.matmul(h, params[f"{prefix}.w{i}"]), params[f"{prefix}.b{i}"]))
    return h


def policy_heads(net: PolicyNet, obs: Tensor) -> tuple[Tensor, Tensor]:
    """(n, obs_dim) -> pre-squash action mean (n, 3), state value (n, 1)."""
    mean = ad.add(ad.matmul(_mlp(net.params, "pol", obs, net.hidden), net.params["pol.mean_w"]),
                  net.params["pol.mean_b"])
    value = ad.add(ad.matmul(_mlp(net.params, "val", obs, net.hidden), net.params["val.out_w"]),
                   net.params["val.out_b"])
    return mean, value


def log_prob_tensor(net: PolicyNet, obs: Tensor, raw: np.ndarray) -> tuple[Tensor, Tensor]:
    """Differentiable squashed-action log-prob of stored raw actions, plus the
    value head. The squash correction depends only on the stored raw actions,
    so it enters as a constant."""
    mean, value = policy_heads(net, obs)
    log_std = net.params["pol.log_std"]
    inv_std = ad.exp(ad.mul(log_std, -1.0))
    z = ad.mul(ad.sub(raw, mean), inv_std)
    gauss = ad.sub(ad.mul(ad.tsum(ad.square(z), axis=1), -0.5),
                   ad.add(ad.tsum(log_std), 1.5 * _LOG_2PI))
    corr = _squash_log_det(raw, net.box_lo, net.box_hi)
    return ad.sub(gauss, corr), value


def act(net: PolicyNet, obs_mat: np.ndarray, rng: np.random.Generator,
        deterministic: bool = False) -> dict:
    """Sample squashed actions for a batch of observations (no graph)."""
    obs_mat = np.atleast_2d(obs_mat)
    with ad.no_grad():
        mean_t, value_t = policy_heads(net, Tensor(obs_mat))
    mean, value = mean_t.values, value_t.values[:, 0]
    log_std = net.params["pol.log_std"].values
    if deterministic:
        raw = mean.copy()
    else:
        raw = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    z = (raw - mean) * np.exp(-log_std)
    gauss = -0.5 * (z * z).sum(axis=1) - log_std.sum() - 1.5 * _LOG_2PI
    logp = gauss - _squash_log_det(raw, net.box_lo, net.box_hi)
    return {"raw": raw, "action": squash_action(raw, net.box_lo, net.box_hi),
            "logp": logp, "value": value}


def entropy_bonus(net: PolicyNet) -> Tensor:
    """Entropy of the pre-squash Gaussian (standard squashed-policy bonus)."""
    return ad.add(ad.tsum(net.params["pol.log_std"]), 1.5 * (1.0 + _LOG_2PI))


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------


@dataclass
class RolloutBatch:
    obs: np.ndarray
    raw: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    episode_returns: list
    episode_successes: list

    def __len__(self):
        return len(self.obs)


def compute_gae(rewards, values, dones, last_values, gamma, lam):
    """(steps, workers) arrays -> advantages and returns of the same shape."""
    steps, workers = rewards.shape
    adv = np.zeros((steps, workers))
    running = np.zeros(workers)
    for t in range(steps - 1, -1, -1):
        next_v = last_values if t == steps - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    return adv, adv + values


class _RunningReturnScale:
    """Tracks the std of the discounted return stream for reward scaling."""

    def __init__(self, gamma, eps=1e-8):
        self.gamma = gamma
        self.eps = eps
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, returns):
        for r in np.ravel(returns):
            self.count += 1
            d = r - self.mean
            self.mean += d / self.count
            self.m2 += d * (r - self.mean)

    @property
    def std(self):
        if self.count < 2:
            return 1.0
        return float(np.sqrt(self.m2 / (self.count - 1))) or 1.0


class RolloutCollector:
    """Owns n_workers envs; each episode gets a freshly sampled scene."""

    def __init__(self, task: TaskParams, enc_params, enc_cfg, cfg: PPOConfig,
                 reward_source: str = "gt", reward_net: RewardNet | None = None,
                 base_seed: int = 0):
        if reward_source not in ("gt", "learned"):
            raise ValueError(f"unknown reward_source {reward_source}")
        if reward_source == "learned" and reward_net is None:
            raise ValueError("learned reward source needs a reward net")
        self.task = task
        self.enc_params = enc_params
        self.enc_cfg = enc_cfg
        self.cfg = cfg
        self.reward_source = reward_source
        self.reward_net = reward_net
        self.base_seed = base_seed
        self._episode_counter = 0
        self.total_env_steps = 0
        self._scale = _RunningReturnScale(cfg.gamma)
        self._discounted = np.zeros(cfg.n_workers)
        self.envs = []
        self.obs = None
        self._ep_reward = np.zeros(cfg.n_workers)
        self.reset_all()

    def _fresh_env(self):
        self._episode_counter += 1
        seed = int(_derived_rng(self.base_seed, 0x5EED, self._episode_counter)
                   .integers(2 ** 31))
        env = ReachEnv(sample_scene(self.task.n_points, seed, self.task), self.task,
                       self.enc_params, self.enc_cfg)
        obs = env.reset(episode_seed=seed)
        return env, obs

    def reset_all(self):
        self.envs = []
        obs = []
        for _ in range(self.cfg.n_workers):
            env, o = self._fresh_env()
            self.envs.append(env)
            obs.append(o.vector())
        self.obs = np.stack(obs)
        self._ep_reward[:] = 0.0
        self._discounted[:] = 0.0

    def collect(self, net: PolicyNet, rng: np.random.Generator) -> RolloutBatch:
        cfg = self.cfg
        steps, w = cfg.steps_per_update, cfg.n_workers
        obs_buf = np.zeros((steps, w, self.obs.shape[1]))
        raw_buf = np.zeros((steps, w, 3))
        act_buf = np.zeros((steps, w, 3))
        logp_buf = np.zeros((steps, w))
        rew_buf = np.zeros((steps, w))
        val_buf = np.zeros((steps, w))
        done_buf = np.zeros((steps, w))
        ep_returns, ep_success = [], []

        for t in range(steps):
            sampled = act(net, self.obs, rng)
            obs_buf[t] = self.obs
            raw_buf[t] = sampled["raw"]
            act_buf[t] = sampled["action"]
            logp_buf[t] = sampled["logp"]
            val_buf[t] = sampled["value"]
            next_obs = np.empty_like(self.obs)
            raw_rewards = np.zeros(w)
            for k, env in enumerate(self.envs):
                target = sampled["action"][k]
                if cfg.action_mode == "velocity":
                    target = env.state.eef + target
                obs_k, r_gt, done, info = env.step(target)
                next_obs[k] = obs_k.vector()
                raw_rewards[k] = r_gt
                done_buf[t, k] = float(done)
                if done:
                    ep_success.append(info["success"])
            if self.reward_source == "learned":
                with ad.no_grad():
                    raw_rewards = reward_forward(self.reward_net,
                                                 Tensor(next_obs)).values[:, 0]
            self._ep_reward += raw_rewards
            # running scale uses the discounted return stream
            self._discounted = cfg.gamma * self._discounted + raw_rewards
            self._scale.update(self._discounted)
            rew_buf[t] = raw_rewards / self._scale.std if cfg.normalize_rewards \
                else raw_rewards
            for k in range(w):
                if done_buf[t, k]:
                    ep_returns.append(float(self._ep_reward[k]))
                    self._ep_reward[k] = 0.0
                    self._discounted[k] = 0.0
                    env, o = self._fresh_env()
                    self.envs[k] = env
                    next_obs[k] = o.vector()
            self.obs = next_obs
            self.total_env_steps += w

        with ad.no_grad():
            last_values = policy_heads(net, Tensor(self.obs))[1].values[:, 0]
        adv, ret = compute_gae(rew_buf, val_buf, done_buf, last_values,
                               cfg.gamma, cfg.gae_lambda)
        n = steps * w
        return RolloutBatch(
            obs=obs_buf.reshape(n, -1), raw=raw_buf.reshape(n, 3),
            actions=act_buf.reshape(n, 3), logp=logp_buf.reshape(n),
            rewards=rew_buf.reshape(n), values=val_buf.reshape(n),
            dones=done_buf.reshape(n), advantages=adv.reshape(n),
            returns=ret.reshape(n), episode_returns=ep_returns,
            episode_successes=ep_success)


# ---------------------------------------------------------------------------
# PPO update
# ---------------------------------------------------------------------------


def ppo_loss(net: PolicyNet, obs, raw, logp_old, advantages, returns,
             cfg: PPOConfig) -> tuple[Tensor, dict]:
    """Clipped surrogate + value loss - entropy bonus on one minibatch."""
    logp_new, value = log_prob_tensor(net, Tensor(obs), raw)
    ratio = ad.exp(ad.sub(logp_new, logp_old))
    s1 = ad.mul(ratio, advantages)
    s2 = ad.mul(ad.clip_const(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio),
                advantages)
    policy_loss = ad.mul(ad.tmean(ad.minimum(s1, s2)), -1.0)
    value_loss = ad.tmean(ad.square(ad.sub(ad.reshape(value, (len(obs),)), returns)))
    loss = ad.add(ad.add(policy_loss, ad.mul(value_loss, cfg.value_coef)),
                  ad.mul(entropy_bonus(net), -cfg.entropy_coef))
    clip_frac = float(np.mean(np.abs(ratio.values - 1.0) > cfg.clip_ratio))
    return loss, {"policy_loss": policy_loss.item(), "value_loss": value_loss.item(),
                  "clip_fraction": clip_frac}


def ppo_update(batch: RolloutBatch, net: PolicyNet, state: AdamState,
               cfg: PPOConfig, rng: np.random.Generator) -> dict:
    adv = batch.advantages
    if len(adv) > 1:  # per-batch normalization is degenerate on one sample
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(batch)
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "clip_fraction": 0.0}
    count = 0
    for _ in range(cfg.epochs_per_update):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            mb = order[start:start + cfg.minibatch_size]
            loss, info = ppo_loss(net, batch.obs[mb], batch.raw[mb], batch.logp[mb],
                                  adv[mb], batch.returns[mb], cfg)
            if not np.isfinite(loss.item()):
                raise RuntimeError(
                    f"ppo_update: non-finite loss {loss.item()} "
                    f"(policy {info['policy_loss']}, value {info['value_loss']})")
            net.params.zero_grad()
            ad.backward(loss)
            adam_step(net.params, state)
            for k in stats:
                stats[k] += info[k]
            count += 1
    return {k: v / count for k, v in stats.items()}


# ---------------------------------------------------------------------------
# training loops and evaluation
# ---------------------------------------------------------------------------


def evaluate_policy_fn(policy_fn, enc_params, enc_cfg, task: TaskParams,
                       n_episodes: int, seed: int) -> float:
    """Success rate of an arbitrary (env, obs) -> target-position callable
    over fresh-scene episodes with fixed eval seeds."""
    wins = 0
    for ep in range(n_episodes):
        scene_seed = int(_derived_rng(seed, 0xE7A1, ep).integers(2 ** 31))
        env = ReachEnv(sample_scene(task.n_points, scene_seed, task), task,
                       enc_params, enc_cfg)
        obs = env.reset(episode_seed=scene_seed + 1)
        for _ in range(task.horizon):
            obs, _, done, info = env.step(policy_fn(env, obs))
            if done:
                break
        wins += bool(info["success"])
    return wins / n_episodes


def net_policy_fn(net: PolicyNet, rng=None, deterministic: bool = True):
    rng = rng or np.random.default_rng(0)

    def policy_fn(env, obs):
        out = act(net, obs.vector()[None, :], rng, deterministic=deterministic)
        target = out["action"][0]
        if net.action_mode == "velocity":
            target = env.state.eef + target
        return target

    return policy_fn


def scripted_expert_fn(env, obs):
    """Oracle bound: head straight for the nearest remaining point."""
    if not env.state.remaining.any():
        return env.state.eef
    pts = env.scene.attachment_points[env.state.remaining]
    return pts[np.linalg.norm(pts - env.state.eef, axis=1).argmin()]


def uniform_random_fn(seed: int = 0):
    rng = _derived_rng(seed, 0x4A2D)

    def policy_fn(env, obs):
        lo, hi = env.task.box
        return rng.uniform(lo, hi)

    return policy_fn


def evaluate_success(net: PolicyNet, enc_params, enc_cfg, task: TaskParams,
                     n_episodes: int, seed: int, deterministic: bool = True) -> float:
    """Fraction of fresh-scene episodes cleared within the horizon."""
    fn = net_policy_fn(net, _derived_rng(seed, 0xAC7), deterministic)
    return evaluate_policy_fn(fn, enc_params, enc_cfg, task, n_episodes, seed)


def train_policy(reward_source: str, enc_params, enc_cfg, task: TaskParams,
                 cfg: PPOConfig, seed: int, reward_net: RewardNet | None = None,
                 eval_every: int = 10, eval_episodes: int = 30,
                 log=None) -> tuple[PolicyNet, list[dict]]:
    obs_dim = enc_cfg.latent_dim + 3
    net = init_policy(obs_dim, task, cfg, seed)
    state = AdamState.for_params(net.params, learning_rate=cfg.learning_rate)
    collector = RolloutCollector(task, enc_params, enc_cfg, cfg, reward_source,
                                 reward_net, base_seed=seed)
    rng = _derived_rng(seed, 0x9901)
    curve = []
    for update in range(1, cfg.total_updates + 1):
        batch = collector.collect(net, rng)
        stats = ppo_update(batch, net, state, cfg, rng)
        if update % eval_every == 0 or update == cfg.total_updates:
            success = evaluate_success(net, enc_params, enc_cfg, task,
                                       eval_episodes, seed=seed + 7700 + update)
            mean_ret = float(np.mean(batch.episode_returns)) if batch.episode_returns \
                else float("nan")
            curve.append({"update": update, "env_steps": collector.total_env_steps,
                          "mean_return": mean_ret, "success_rate": success,
                          **stats})
            if log is not None:
                log(f"update {update:4d}  steps {collector.total_env_steps:7d}  "
                    f"success {success:.2f}  return {mean_ret:.1f}")
    return net, curve


# ---------------------------------------------------------------------------
# behavioral cloning baselines
# ---------------------------------------------------------------------------


def select_bc_demos(trajs: list, variant: str, pairs=None, by_id: dict | None = None):
    if variant == "perfect":
        return list(trajs)
    if variant == "total":
        if any(t.gt_return is None for t in trajs):
            raise ValueError("BC total needs ranked demos")
        ranked = sorted(trajs, key=lambda t: t.gt_return, reverse=True)
        keep = max(1, int(round(0.2 * len(ranked))))
        return ranked[:keep]
    if variant == "pair":
        if pairs is None or by_id is None:
            raise ValueError("BC pair needs the preference pairs")
        ids = {p.preferred() for p in pairs}
        return [by_id[i] for i in sorted(ids)]
    raise ValueError(f"unknown BC variant {variant}")


def train_bc(demo_trajs: list, task: TaskParams, obs_dim: int, variant: str = "perfect",
             pairs=None, by_id=None, hidden=(64, 64), epochs: int = 60,
             batch_size: int = 256, learning_rate: float = 1e-3, seed: int = 0,
             log=None) -> PolicyNet:
    """Supervised regression of squashed actions on observations (MSE)."""
    chosen = select_bc_demos(demo_trajs, variant, pairs, by_id)
    if any(t.actions is None for t in chosen):
        raise ValueError("train_bc: demos lack actions")
    raw_obs = np.concatenate([t.obs_matrix()[:-1] for t in chosen], axis=0)
    act_target = np.concatenate([t.actions for t in chosen], axis=0)
    # standardize inputs for the regression; folded back into layer 0 below
    mu, sigma = raw_obs.mean(axis=0), raw_obs.std(axis=0) + 1e-8
    obs = (raw_obs - mu) / sigma
    cfg = PPOConfig(hidden=tuple(hidden), action_mode="position")
    net = init_policy(obs_dim, task, cfg, seed)
    # regression touches only the action path; share those tensors in a view
    trainable = ParamSet()
    for name, t in net.params.items():
        if name.startswith("pol.") and name != "pol.log_std":
            trainable.add(name, t)
    state = AdamState.for_params(trainable, learning_rate=learning_rate)
    rng = _derived_rng(seed, 0xBC)
    lo, hi = net.box_lo, net.box_hi
    target = np.clip(act_target, lo + 1e-9, hi - 1e-9)
    n = len(obs)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            mb = order[start:start + batch_size]
            mean = ad.add(ad.matmul(_mlp(net.params, "pol", Tensor(obs[mb]), net.hidden),
                                    net.params["pol.mean_w"]), net.params["pol.mean_b"])
            squashed = ad.add(ad.mul(ad.sigmoid(mean), hi - lo), lo)
            loss = ad.tmean(ad.square(ad.sub(squashed, target[mb])))
            trainable.zero_grad()
            ad.backward(loss)
            adam_step(trainable, state)
            total += loss.item() * len(mb)
        if log is not None and epoch % 10 == 0:
            log(f"bc {variant} epoch {epoch:3d}  mse {total / n:.6f}")
    # fold the standardization into the first layer: W(x-mu)/sigma + b
    w0, b0 = net.params["pol.w0"], net.params["pol.b0"]
    b0.values[...] = b0.values - (mu / sigma) @ w0.values
    w0.values[...] = w0.values / sigma[:, None]
    return net


# ---------------------------------------------------------------------------
# open-loop trajectory selection (execution-time)
# ---------------------------------------------------------------------------


@dataclass
class OpenLoopResult:
    actions: np.ndarray
    eef_path: np.ndarray
    learned_return: float
    all_returns: np.ndarray
    best_index: int


def select_best_openloop(net: PolicyNet, reward_net: RewardNet, initial_obs,
                         task: TaskParams, n_samples: int, horizon: int,
                         seed: int) -> OpenLoopResult:
    """Sample open-loop rollouts against the frozen initial embedding (the
    end-effector coordinate still advances kinematically), then return the
    one whose learned return is highest (first argmax on ties)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    z0 = np.asarray(initial_obs.embedding, float)
    eef0 = np.asarray(initial_obs.eef, float)
    rng = _derived_rng(seed, 0x01C)
    lo, hi = task.box
    eef = np.tile(eef0, (n_samples, 1))
    obs_seq = [np.concatenate([np.tile(z0, (n_samples, 1)), eef], axis=1)]
    action_seq = []
    for _ in range(horizon - 1):
        sampled = act(net, obs_seq[-1], rng)
        target = sampled["action"]
        if net.action_mode == "velocity":
            target = eef + target
        target = np.clip(target, lo, hi)
        delta = target - eef
        dist = np.linalg.norm(delta, axis=1, keepdims=True)
        scale = np.minimum(1.0, task.d_max / np.maximum(dist, 1e-12))
        eef = eef + delta * scale
        action_seq.append(target)
        obs_seq.append(np.concatenate([np.tile(z0, (n_samples, 1)), eef], axis=1))
    obs_all = np.stack(obs_seq, axis=1)  # (n_samples, horizon, obs_dim)
    with ad.no_grad():
        r = reward_forward(reward_net,
                           Tensor(obs_all.reshape(n_samples * horizon, -1))).values[:, 0]
    returns = r.reshape(n_samples, horizon).sum(axis=1)
    best = int(np.argmax(returns))
    return OpenLoopResult(
        actions=np.stack(action_seq, axis=1)[best] if action_seq else np.zeros((0, 3)),
        eef_path=obs_all[best, :, -3:],
        learned_return=float(returns[best]),
        all_returns=returns,
        best_index=best)
