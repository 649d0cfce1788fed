"""Point-cloud autoencoder: encoder to a latent vector, decoder back to a cloud.

Encoder: five width-1 convolutions over the point axis (shared per-point
linear maps), each followed by per-point group normalization and relu, then
max-pooling across points. Per-point normalization keeps the latent exactly
permutation-invariant (no reduction ever mixes point order). Decoder: fully
connected relu stack from the latent back to input_points x 3.

Reconstruction loss: nearest-neighbor squared distance both ways, plus
lambda times the assignment-based transport distance. Gradients flow through
the matching found on the forward values (matching held fixed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import AdamState, ParamSet, adam_step
from .pointcloud import as_cloud, chamfer_distance, emd_assignment, emd_exact, pairwise_sq_dists

_SQRT_GUARD = 1e-24  # keeps the transport-term gradient finite at zero distance


@dataclass
class AEConfig:
    input_points: int = 64
    latent_dim: int = 32
    conv_channels: tuple = (32, 64, 64, 128, 32)
    decoder_hidden: tuple = (256, 512)
    group_norm_groups: int = 4
    lambda_emd: float | str = "auto"

    def __post_init__(self):
        if len(self.conv_channels) != 5:
            raise ValueError("conv_channels must have exactly 5 entries")
        if self.conv_channels[-1] != self.latent_dim:
            raise ValueError("latent_dim must equal the last conv channel count")
        for c in self.conv_channels:
            if c % self.group_norm_groups != 0:
                raise ValueError("conv channels must be divisible by group_norm_groups")
            if c // self.group_norm_groups < 4:
                raise ValueError("group size below 4 degenerates the normalization")


def init_autoencoder(cfg: AEConfig, seed: int) -> ParamSet:
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    c_in = 3
    for i, c_out in enumerate(cfg.conv_channels):
        ps.add(f"enc.w{i}", rng.normal(0, np.sqrt(2.0 / c_in), size=(c_in, c_out)))
        # the bias is load-bearing: per-point group stats would otherwise
        # cancel any uniform scaling of the input coordinates
        ps.add(f"enc.b{i}", rng.normal(0, 0.2, size=c_out))
        ps.add(f"enc.gamma{i}", np.ones(c_out))
        ps.add(f"enc.beta{i}", np.zeros(c_out))
        c_in = c_out
    widths = [cfg.latent_dim, *cfg.decoder_hidden, cfg.input_points * 3]
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        ps.add(f"dec.w{i}", rng.normal(0, np.sqrt(2.0 / a), size=(a, b)))
        ps.add(f"dec.b{i}", np.zeros(b))
    return ps


def encoder_forward(points2d: Tensor, n_batch: int, params: ParamSet, cfg: AEConfig) -> Tensor:
    """(n_batch*input_points, 3) -> (n_batch, latent_dim)."""
    h = points2d
    for i in range(5):
        h = ad.add(ad.matmul(h, params[f"enc.w{i}"]), params[f"enc.b{i}"])
        h = ad.group_norm(h, params[f"enc.gamma{i}"], params[f"enc.beta{i}"],
                          cfg.group_norm_groups)
        h = ad.relu(h)
    h = ad.reshape(h, (n_batch, cfg.input_points, cfg.latent_dim))
    return ad.tmax(h, axis=1)


def decoder_forward(z: Tensor, params: ParamSet, cfg: AEConfig) -> Tensor:
    """(n_batch, latent_dim) -> (n_batch, input_points, 3)."""
    h = z
    n_layers = 1 + len(cfg.decoder_hidden)
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, params[f"dec.w{i}"]), params[f"dec.b{i}"])
        if i < n_layers - 1:
            h = ad.relu(h)
    return ad.reshape(h, (h.shape[0], cfg.input_points, 3))


def encode(cloud, params: ParamSet, cfg: AEConfig) -> np.ndarray:
    pts = as_cloud(cloud)
    if pts.shape[0] != cfg.input_points:
        raise ValueError(f"encode: expected {cfg.input_points} points, got {pts.shape[0]}")
    with ad.no_grad():
        z = encoder_forward(Tensor(pts), 1, params, cfg)
    return z.values[0].copy()


def decode(z, params: ParamSet, cfg: AEConfig) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (cfg.latent_dim,):
        raise ValueError(f"decode: expected latent of size {cfg.latent_dim}, got {z.shape}")
    with ad.no_grad():
        out = decoder_forward(Tensor(z[None, :]), params, cfg)
    return out.values[0].copy()


def reconstruction_loss(input_cloud, output: Tensor, lambda_emd: float) -> Tensor:
    """CD + lambda * EMD between a constant input cloud and a decoded output.

    Returns a differentiable scalar; only the output side receives gradient.
    """
    x = as_cloud(input_cloud)
    if output.shape != x.shape:
        raise ValueError(f"reconstruction_loss: size mismatch {x.shape} vs {output.shape}")
    y = output.values
    d2 = pairwise_sq_dists(x, y)
    nn_xy = d2.argmin(axis=1)  # for each input point, nearest output point
    nn_yx = d2.argmin(axis=0)  # for each output point, nearest input point

    diff1 = ad.sub(ad.gather_rows(output, nn_xy), x)
    diff2 = ad.sub(output, x[nn_yx])
    cd = ad.add(ad.tsum(ad.square(diff1)), ad.tsum(ad.square(diff2)))
    if lambda_emd == 0.0:
        return cd
    match = emd_assignment(x, y)
    diff3 = ad.sub(ad.gather_rows(output, match), x)
    emd = ad.tsum(ad.sqrt(ad.add(ad.tsum(ad.square(diff3), axis=1), _SQRT_GUARD)))
    return ad.add(cd, ad.mul(emd, lambda_emd))


def _recon_eval(clouds, params, cfg):
    """Mean (cd, emd) of the current model over a list of clouds, grad-free."""
    cds, emds = [], []
    with ad.no_grad():
        for cloud in clouds:
            pts = as_cloud(cloud)
            z = encoder_forward(Tensor(pts), 1, params, cfg)
            out = decoder_forward(z, params, cfg).values[0]
            cds.append(chamfer_distance(pts, out))
            emds.append(emd_exact(pts, out))
    return float(np.mean(cds)), float(np.mean(emds))


def calibrate_lambda(batch, params: ParamSet, cfg: AEConfig) -> float:
    """Pick lambda so the initial weighted transport term is one fifth of the
    initial nearest-neighbor term."""
    if not batch:
        raise ValueError("calibrate_lambda: empty batch")
    mean_cd, mean_emd = _recon_eval(batch, params, cfg)
    if mean_emd == 0.0:
        raise ValueError("calibrate_lambda: degenerate batch (zero transport distance)")
    return 0.2 * mean_cd / mean_emd


def train_autoencoder(dataset, cfg: AEConfig, epochs: int = 30, batch_size: int = 16,
                      seed: int = 0, learning_rate: float = 1e-3,
                      log=None) -> tuple[ParamSet, list[dict]]:
    """Train on a list of equal-size clouds; returns params and loss history.

    History row 0 is the untrained evaluation; rows 1..epochs are per-epoch
    training means of the minibatch losses.
    """
    if not dataset:
        raise ValueError("train_autoencoder: empty dataset")
    clouds = [as_cloud(c) for c in dataset]
    for c in clouds:
        if c.shape[0] != cfg.input_points:
            raise ValueError(f"train_autoencoder: cloud has {c.shape[0]} points, "
                             f"expected {cfg.input_points}")
    params = init_autoencoder(cfg, seed)
    lam = cfg.lambda_emd
    if lam == "auto":
        lam = calibrate_lambda(clouds[:min(64, len(clouds))], params, cfg)
    lam = float(lam)

    cd0, emd0 = _recon_eval(clouds, params, cfg)
    history = [{"epoch": 0, "cd": cd0, "emd": emd0, "total": cd0 + lam * emd0,
                "lambda_emd": lam}]

    state = AdamState.for_params(params, learning_rate=learning_rate)
    rng = np.random.default_rng(seed + 1)
    n = len(clouds)
    npts = cfg.input_points
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        cd_sum = emd_sum = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = np.stack([clouds[i] for i in idx])
            b = batch.shape[0]
            x2d = Tensor(batch.reshape(b * npts, 3))
            z = encoder_forward(x2d, b, params, cfg)
            out3d = decoder_forward(z, params, cfg)
            out2d = ad.reshape(out3d, (b * npts, 3))
            cd_terms, emd_terms = [], []
            for j in range(b):
                rows = np.arange(j * npts, (j + 1) * npts)
                out_j = ad.gather_rows(out2d, rows)
                x = batch[j]
                d2 = pairwise_sq_dists(x, out_j.values)
                diff1 = ad.sub(ad.gather_rows(out_j, d2.argmin(axis=1)), x)
                diff2 = ad.sub(out_j, x[d2.argmin(axis=0)])
                cd_terms.append(ad.add(ad.tsum(ad.square(diff1)), ad.tsum(ad.square(diff2))))
                match = emd_assignment(x, out_j.values)
                diff3 = ad.sub(ad.gather_rows(out_j, match), x)
                emd_terms.append(ad.tsum(ad.sqrt(
                    ad.add(ad.tsum(ad.square(diff3), axis=1), _SQRT_GUARD))))
            cd_b = ad.mul(_sum_scalars(cd_terms), 1.0 / b)
            emd_b = ad.mul(_sum_scalars(emd_terms), 1.0 / b)
            loss = ad.add(cd_b, ad.mul(emd_b, lam))
            params.zero_grad()
            ad.backward(loss)
            adam_step(params, state)
            cd_sum += cd_b.item() * b
            emd_sum += emd_b.item() * b
        row = {"epoch": epoch, "cd": cd_sum / n, "emd": emd_sum / n,
               "total": cd_sum / n + lam * emd_sum / n, "lambda_emd": lam}
        history.append(row)
        if log is not None:
            log(f"epoch {epoch:3d}  cd {row['cd']:.6f}  emd {row['emd']:.6f}")
    return params, history


def _sum_scalars(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total
