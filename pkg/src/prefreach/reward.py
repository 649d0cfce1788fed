"""Reward learning from pairwise trajectory preferences.

A small MLP maps (embedding ++ eef) observations to scalar rewards; a
trajectory's return is the undiscounted sum over its observations. Training
minimizes the cross-entropy of the softmax over the two returns against the
preference label, so preferred trajectories are pushed toward higher
returns. Only preference labels ever reach the learner; the oracle stays on
the data-generation side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .demos import RankingDataset, Trajectory
from .optim import AdamState, ParamSet, adam_step
from .sim import _derived_rng, gt_reward, render_partial_cloud
from .autoencoder import encode


@dataclass
class RewardConfig:
    hidden: tuple = (128, 128)
    learning_rate: float = 1e-3
    batch_pairs: int | None = None  # None: full-batch epochs over all pairs
    epochs: int = 400
    patience: int = 12
    eval_every: int = 5
    seed: int = 0


@dataclass
class RewardNet:
    params: ParamSet
    input_dim: int
    hidden: tuple
    norm_mean: np.ndarray
    norm_std: np.ndarray
    output_link: str = "exp"


def init_reward_net(input_dim: int, hidden=(128, 128), seed: int = 0,
                    norm_mean=None, norm_std=None, output_link: str = "exp") -> RewardNet:
    if output_link not in ("exp", "linear"):
        raise ValueError(f"unknown output link {output_link}")
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    widths = [input_dim, *hidden, 1]
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        ps.add(f"rw.w{i}", rng.normal(0, np.sqrt(1.0 / a), size=(a, b)))
        ps.add(f"rw.b{i}", np.zeros(b))
    return RewardNet(
        params=ps, input_dim=input_dim, hidden=tuple(hidden),
        norm_mean=np.zeros(input_dim) if norm_mean is None else np.asarray(norm_mean, float),
        norm_std=np.ones(input_dim) if norm_std is None else np.asarray(norm_std, float),
        output_link=output_link,
    )


def reward_forward(net: RewardNet, obs: Tensor) -> Tensor:
    """(n, input_dim) observations -> (n, 1) rewards; tanh hidden layers.

    The default exponential output link makes the net's resolution relative
    rather than absolute, which the spiky inverse-square return structure
    needs; the bound keeps early training from overflowing the sum-exp.
    """
    h = ad.mul(ad.sub(obs, net.norm_mean), 1.0 / net.norm_std)
    n_layers = len(net.hidden) + 1
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, net.params[f"rw.w{i}"]), net.params[f"rw.b{i}"])
        if i < n_layers - 1:
            h = ad.tanh(h)
    if net.output_link == "exp":
        h = ad.exp(ad.clip_const(h, -60.0, 60.0))
    return h


def predict_reward(obs, net: RewardNet) -> float:
    vec = obs.vector() if hasattr(obs, "vector") else np.asarray(obs, float)
    if vec.shape != (net.input_dim,):
        raise ValueError(f"predict_reward: expected obs of dim {net.input_dim}, "
                         f"got {vec.shape}")
    with ad.no_grad():
        return float(reward_forward(net, Tensor(vec[None, :])).values[0, 0])


def preference_probability(j_i: float, j_j: float) -> float:
    """P(second trajectory preferred) = softmax of the two returns."""
    m = max(j_i, j_j)
    ei, ej = np.exp(j_i - m), np.exp(j_j - m)
    return float(ej / (ei + ej))


def trajectory_returns(net: RewardNet, trajectories: dict) -> dict:
    """Predicted return per trajectory id (single batched forward)."""
    ids = list(trajectories)
    if not ids:
        return {}
    lengths = [trajectories[i].length for i in ids]
    obs = np.concatenate([trajectories[i].obs_matrix() for i in ids], axis=0)
    with ad.no_grad():
        r = reward_forward(net, Tensor(obs)).values[:, 0]
    out = {}
    off = 0
    for tid, n in zip(ids, lengths):
        out[tid] = float(r[off:off + n].sum())
        off += n
    return out


def _softplus(x: Tensor) -> Tensor:
    # max(x,0) + log(1 + exp(-|x|)): safe for large |x|
    absx = ad.add(ad.relu(x), ad.relu(ad.mul(x, -1.0)))
    return ad.add(ad.relu(x), ad.log(ad.add(ad.exp(ad.mul(absx, -1.0)), 1.0)))


def trex_loss(pairs, trajectories: dict, net: RewardNet) -> Tensor:
    """Mean negative log-likelihood of the labels under the softmax-of-returns
    model; per pair this is softplus(J_other - J_preferred)."""
    if not pairs:
        raise ValueError("trex_loss: empty batch")
    ids = sorted({p.traj_i for p in pairs} | {p.traj_j for p in pairs})
    index = {tid: k for k, tid in enumerate(ids)}
    lengths = [trajectories[tid].length for tid in ids]
    if len(set(lengths)) != 1:
        raise ValueError("trex_loss: trajectories must share one length")
    t_len = lengths[0]
    obs = np.concatenate([trajectories[tid].obs_matrix() for tid in ids], axis=0)
    r = reward_forward(net, Tensor(obs))
    returns = ad.tsum(ad.reshape(r, (len(ids), t_len)), axis=1, keepdims=True)
    pref = np.array([index[p.preferred()] for p in pairs], dtype=np.intp)
    other = np.array([index[p.traj_i if p.label else p.traj_j] for p in pairs], dtype=np.intp)
    margin = ad.sub(ad.gather_rows(returns, other), ad.gather_rows(returns, pref))
    return ad.tmean(_softplus(margin))


def pairwise_accuracy(pairs, returns_by_id: dict) -> float:
    """Fraction of pairs whose predicted return ordering matches the label;
    exact ties score half."""
    if not pairs:
        raise ValueError("pairwise_accuracy: no pairs")
    score = 0.0
    for p in pairs:
        ji, jj = returns_by_id[p.traj_i], returns_by_id[p.traj_j]
        if ji == jj:
            score += 0.5
        else:
            predicted = 1 if jj > ji else 0
            score += 1.0 if predicted == p.label else 0.0
    return score / len(pairs)


def observation_normalization(trajectories: dict) -> tuple[np.ndarray, np.ndarray]:
    obs = np.concatenate([t.obs_matrix() for t in trajectories.values()], axis=0)
    return obs.mean(axis=0), obs.std(axis=0) + 1e-8


def train_reward(dataset: RankingDataset, cfg: RewardConfig | None = None,
                 log=None) -> tuple[RewardNet, list[dict]]:
    """Fit the reward net on the train pairs; track held-out accuracy on the
    held-out scene sets and keep the best-scoring parameters.

    Full-batch mode (the default) precomputes one observation matrix over the
    trajectories the train pairs touch, so an epoch is a single forward and
    backward; each pair member recurs in many pairs, which makes per-pair
    minibatching an order of magnitude more expensive per epoch.
    """
    cfg = cfg or RewardConfig()
    if not dataset.pairs:
        raise ValueError("train_reward: empty train split")
    train_ids = sorted({p.traj_i for p in dataset.pairs} | {p.traj_j for p in dataset.pairs})
    input_dim = dataset.trajectories[train_ids[0]].obs_matrix().shape[1]
    mean, std = observation_normalization(
        {tid: dataset.trajectories[tid] for tid in train_ids})
    net = init_reward_net(input_dim, cfg.hidden, cfg.seed, mean, std)
    state = AdamState.for_params(net.params, learning_rate=cfg.learning_rate)
    rng = _derived_rng(cfg.seed, 0x7E4D)

    index = {tid: k for k, tid in enumerate(train_ids)}
    t_len = dataset.trajectories[train_ids[0]].length
    obs_all = np.concatenate([dataset.trajectories[t].obs_matrix() for t in train_ids])
    pref = np.array([index[p.preferred()] for p in dataset.pairs], dtype=np.intp)
    other = np.array([index[p.traj_i if p.label else p.traj_j] for p in dataset.pairs],
                     dtype=np.intp)

    def epoch_loss_fullbatch():
        r = reward_forward(net, Tensor(obs_all))
        returns = ad.tsum(ad.reshape(r, (len(train_ids), t_len)), axis=1, keepdims=True)
        margin = ad.sub(ad.gather_rows(returns, other), ad.gather_rows(returns, pref))
        return ad.tmean(_softplus(margin))

    history = []
    best_acc, best_params, since_best = -1.0, net.params.copy(), 0
    pairs = list(dataset.pairs)
    for epoch in range(1, cfg.epochs + 1):
        if cfg.batch_pairs is None:
            loss = epoch_loss_fullbatch()
            net.params.zero_grad()
            ad.backward(loss)
            adam_step(net.params, state)
            mean_loss = loss.item()
        else:
            order = rng.permutation(len(pairs))
            loss_sum = 0.0
            for start in range(0, len(pairs), cfg.batch_pairs):
                batch = [pairs[i] for i in order[start:start + cfg.batch_pairs]]
                loss = trex_loss(batch, dataset.trajectories, net)
                net.params.zero_grad()
                ad.backward(loss)
                adam_step(net.params, state)
                loss_sum += loss.item() * len(batch)
            mean_loss = loss_sum / len(pairs)
        if epoch % cfg.eval_every and epoch != cfg.epochs:
            history.append({"epoch": epoch, "train_loss": mean_loss,
                            "test_accuracy": None})
            continue
        returns = trajectory_returns(net, dataset.trajectories)
        acc = pairwise_accuracy(dataset.test_pairs, returns) if dataset.test_pairs \
            else float("nan")
        history.append({"epoch": epoch, "train_loss": mean_loss, "test_accuracy": acc})
        if log is not None:
            log(f"epoch {epoch:4d}  loss {mean_loss:.4f}  held-out acc {acc:.3f}")
        if dataset.test_pairs:
            if acc > best_acc:
                best_acc, best_params, since_best = acc, net.params.copy(), 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
    if dataset.test_pairs:
        net.params.load_values(best_params)
    return net, history


def export_reward_heatmap(net: RewardNet, scene, enc_params, enc_cfg, task,
                          remaining=None, grid_n: int = 20) -> list[tuple]:
    """(x, y, predicted_reward) rows over an x-y grid at the attachment
    plane's height, with the embedding frozen for the given remaining set."""
    remaining = np.ones(len(scene.attachment_points), bool) if remaining is None \
        else np.asarray(remaining, bool)
    mask_bits = sum(1 << i for i, r in enumerate(remaining) if r)
    cloud = render_partial_cloud(scene, remaining, task, seed=mask_bits ^ scene.seed,
                                 n_out=enc_cfg.input_points)
    z = encode(cloud, enc_params, enc_cfg)
    if remaining.any():
        plane_z = float(scene.attachment_points[remaining][:, 2].mean())
    else:
        plane_z = float(scene.attachment_points[:, 2].mean())
    lo, hi = scene.workspace_min, scene.workspace_max
    xs = np.linspace(lo[0], hi[0], grid_n)
    ys = np.linspace(lo[1], hi[1], grid_n)
    grid = np.array([[x, y] for x in xs for y in ys])
    obs = np.concatenate(
        [np.tile(z, (len(grid), 1)),
         np.column_stack([grid, np.full(len(grid), plane_z)])], axis=1)
    with ad.no_grad():
        r = reward_forward(net, Tensor(obs)).values[:, 0]
    return [(float(x), float(y), float(v)) for (x, y), v in zip(grid, r)]


def heatmap_gt_rows(scene, task, remaining=None, grid_n: int = 20) -> list[tuple]:
    """Oracle counterpart of export_reward_heatmap on the same grid."""
    remaining = np.ones(len(scene.attachment_points), bool) if remaining is None \
        else np.asarray(remaining, bool)
    pts = scene.attachment_points[remaining]
    plane_z = float(pts[:, 2].mean()) if remaining.any() else 0.0
    lo, hi = scene.workspace_min, scene.workspace_max
    xs = np.linspace(lo[0], hi[0], grid_n)
    ys = np.linspace(lo[1], hi[1], grid_n)
    return [(float(x), float(y), gt_reward(np.array([x, y, plane_z]), pts, task.epsilon))
            for x in xs for y in ys]
