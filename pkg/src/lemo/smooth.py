"""Latent-smoothness prior: a velocity-map autoencoder and its energy.

The encoder turns an S x (T-1) marker velocity map into a 64-channel
latent with the same extents (no pooling, so temporal resolution is
kept).  Motion smoothness is the per-element mean of squared latent
time differences; during fitting it is evaluated on maps rebuilt from
the current body parameters, so it backpropagates into them.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn

CHANNELS = (32, 64, 64, 64, 64)
ACCUM_CHUNK = 8  # micro-batch size for gradient accumulation


def encoder_specs():
    specs = []
    cin = 1
    for c in CHANNELS:
        specs += nn.conv_block(cin, c)
        cin = c
    return specs


class SmoothnessAutoencoder:
    """Pool-free conv autoencoder over velocity maps."""

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        enc = encoder_specs()
        self.encoder = [nn.build_layer(s, rng) for s in enc]
        self.decoder = [nn.build_layer(s, rng)
                        for s in nn.mirror_decoder(enc, final_channels=1)]
        self.rows = None   # velocity-map row count S, fixed by training
        self.alpha = 1.0

    def parameters(self):
        return [p for layer in self.encoder + self.decoder
                for p in layer.parameters()]

    def set_trainable(self, flag):
        nn.set_trainable(self.encoder + self.decoder, flag)

    def _check_rows(self, shape):
        if self.rows is not None and shape[-2] != self.rows:
            raise ValueError(
                f"velocity map has {shape[-2]} rows; model was trained "
                f"with {self.rows}")

    def encode(self, x):
        x = ad.as_tensor(x)
        if x.data.ndim == 2:
            x = x.reshape((1, 1) + x.data.shape)
        elif x.data.ndim == 3:
            x = x.reshape((1,) + x.data.shape)
        self._check_rows(x.data.shape)
        h = x
        for layer in self.encoder:
            h = layer.forward(h)
        return h

    def decode(self, z):
        h = z
        for layer in self.decoder:
            h = layer.forward(h)
        return h

    def forward(self, x):
        z = self.encode(x)
        return z, self.decode(z)

    def save(self, path):
        entries = nn.pack_layers(self.encoder + self.decoder)
        entries.append(("meta.rows", np.array([-1.0 if self.rows is None
                                               else float(self.rows)])))
        entries.append(("meta.alpha", np.array([float(self.alpha)])))
        nn.save_weights(path, entries)

    @classmethod
    def load(cls, path):
        model = cls()
        entries = nn.load_weights(path)
        nn.unpack_layers(model.encoder + model.decoder, entries)
        meta = {k: v for k, v in entries if k.startswith("meta.")}
        rows = float(meta["meta.rows"][0])
        model.rows = None if rows < 0 else int(rows)
        model.alpha = float(meta["meta.alpha"][0])
        return model


def latent_smoothness(z):
    """Per-element mean of squared time differences of the latent."""
    z = ad.as_tensor(z)
    t1 = z.data.shape[-1]
    if t1 < 2:
        raise ValueError("latent needs at least 2 time columns")
    d = z[..., 1:] - z[..., :-1]
    denom = d.data.size
    return (d * d).sum() / denom


def velocity_map_tensor(markers):
    """Differentiable S x (T-1) map from (T, M, 3) marker positions."""
    markers = ad.as_tensor(markers)
    t_frames = markers.data.shape[0]
    if t_frames < 3:
        raise ValueError("velocity map energy needs at least 3 frames")
    d = markers[1:] - markers[:-1]
    return d.reshape((t_frames - 1, -1)).transpose((1, 0))


def e_smooth(markers, model: SmoothnessAutoencoder, compute_dtype=None):
    """Latent smoothness of the motion given by (T, M, 3) marker positions.

    compute_dtype=np.float32 runs the encoder at the weights' width, about
    twice as fast; the fitting loops use it, gradient checks stay float64.
    """
    xmap = velocity_map_tensor(markers)
    if compute_dtype is not None:
        xmap = xmap.astype(compute_dtype)
    return latent_smoothness(model.encode(xmap))


def _objective(model, x, alpha):
    z, recon = model.forward(x)
    loss = ad.losses(recon, ad.as_tensor(x), kind="l1")
    if alpha:
        loss = loss + alpha * latent_smoothness(z)
    return loss


def train_smoothness(maps, alpha=1.0, epochs=150, batch=60, lr=1e-4, seed=0,
                     log_path=None):
    """Train the autoencoder on velocity maps; returns (model, epoch losses).

    L1 reconstruction plus alpha times the latent smoothness, optimized
    with Adam.  Deterministic for a fixed seed.  A non-finite loss stops
    training and restores the last end-of-epoch checkpoint.
    """
    maps = [np.asarray(m, dtype=np.float32) for m in maps]
    if not maps:
        raise ValueError("training needs at least one velocity map")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError("all velocity maps must share one shape")
    x_all = np.stack(maps)[:, None]  # (N, 1, S, T-1)

    model = SmoothnessAutoencoder(seed)
    model.rows = shape[0]
    model.alpha = alpha
    params = model.parameters()
    opt = ad.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    snapshot = [p.data.copy() for p in params]
    for epoch in range(epochs):
        order = rng.permutation(len(maps))
        epoch_loss = 0.0
        bad = False
        for start in range(0, len(maps), batch):
            idx = order[start:start + batch]
            opt.zero_grad()
            batch_loss = 0.0
            for c0 in range(0, len(idx), ACCUM_CHUNK):
                part = x_all[idx[c0:c0 + ACCUM_CHUNK]]
                loss = _objective(model, part, alpha) * (len(part) / len(idx))
                batch_loss += float(loss.data)
                loss.backward()
            if not np.isfinite(batch_loss):
                bad = True
                break
            opt.step()
            epoch_loss += batch_loss * len(idx)
        if bad:
            for p, saved in zip(params, snapshot):
                p.data = saved
            break
        losses.append(epoch_loss / len(maps))
        snapshot = [p.data.copy() for p in params]
    if log_path is not None:
        with open(log_path, "w") as f:
            f.write("epoch,loss\n")
            for i, v in enumerate(losses):
                f.write(f"{i},{v!r}\n")
    return model, losses
