"""Contact-aware motion infilling: network, training, per-instance
fine-tuning, and decoding back to world-frame markers and contact labels.

The network consumes the 4-channel masked tensor from
motion.build_infill_tensor (pelvis-local marker rows, contact rows, and
repeated root velocities) and emits one channel with the same P x T
extents: reconstructed marker rows plus logistic contact probabilities
in the last 4 rows.  Fine-tuning adapts a copy of the weights to a
single test sequence using only its visible entries.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import motion as mo
from . import nn

CHANNELS = (32, 64, 128, 256, 256)
ACCUM_CHUNK = 8  # micro-batch size for gradient accumulation
N_CONTACT_ROWS = 4


def encoder_specs():
    specs, cin = [], 4
    for c in CHANNELS:
        specs += nn.conv_block(cin, c)
        specs.append(nn.LayerSpec("maxpool2d"))
        cin = c
    return specs


def decoder_specs():
    """Mirror of encoder_specs: each [conv, conv, pool] block reverses to
    a stride-2 deconv (upsample, cropped to the pre-pool extents at
    forward time) and a stride-1 deconv; the last maps to 1 channel,
    linear."""
    specs = []
    below = (4,) + CHANNELS
    for i in range(len(CHANNELS) - 1, -1, -1):
        c = CHANNELS[i]
        specs.append(nn.LayerSpec("deconv2d", c, c, stride=2, padding=0))
        specs.append(nn.LayerSpec("leaky_relu"))
        cout = 1 if i == 0 else below[i]
        specs.append(nn.LayerSpec("deconv2d", c, cout, stride=1, padding=1))
        if i != 0:
            specs.append(nn.LayerSpec("leaky_relu"))
    return specs


class InfillNetwork:
    """Pooled conv encoder and symmetric deconv decoder, 4 -> 1 channels."""

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.encoder = [nn.build_layer(s, rng) for s in encoder_specs()]
        self.decoder = [nn.build_layer(s, rng) for s in decoder_specs()]

    def parameters(self):
        return [p for layer in self.encoder + self.decoder
                for p in layer.parameters()]

    def set_trainable(self, flag):
        nn.set_trainable(self.encoder + self.decoder, flag)

    def copy(self):
        dup = InfillNetwork()
        for mine, theirs in zip(self.parameters(), dup.parameters()):
            theirs.data = mine.data.copy()
        return dup

    def forward(self, y):
        """(4,P,T) or (N,4,P,T) masked input -> (1,P,T) or (N,1,P,T).

        Marker rows come out linear, the last 4 rows pass a logistic.
        """
        y = ad.as_tensor(y)
        squeeze = y.data.ndim == 3
        h = y.reshape((1,) + y.data.shape) if squeeze else y
        if h.data.ndim != 4 or h.data.shape[1] != 4:
            raise ValueError(
                f"infill input must have 4 channels, got {y.data.shape}")
        p_rows = h.data.shape[2]
        pre_pool = []
        for layer in self.encoder:
            if layer.kind == "maxpool2d":
                pre_pool.append(h.data.shape[-2:])
            h = layer.forward(h)
        crops = iter(reversed(pre_pool))
        for layer in self.decoder:
            if layer.kind == "deconv2d" and layer.spec.stride == 2:
                h = layer.forward(h, out_hw=next(crops))
            else:
                h = layer.forward(h)
        cut = p_rows - N_CONTACT_ROWS
        out = ad.concatenate([h[:, :, :cut], h[:, :, cut:].sigmoid()], axis=2)
        return out[0] if squeeze else out

    def save(self, path):
        nn.save_weights(path, nn.pack_layers(self.encoder + self.decoder))

    @classmethod
    def load(cls, path):
        model = cls()
        nn.unpack_layers(model.encoder + model.decoder,
                         nn.load_weights(path))
        return model


def make_mask_sampler(marker_set, t_frames,
                      kinds=("lower-body", "random-window")):
    """Occlusion-mask source for training: each draw picks a mask family
    and a fresh seed from the caller's rng stream."""
    kinds = tuple(kinds)

    def sample(rng):
        kind = kinds[int(rng.integers(len(kinds)))]
        seed = int(rng.integers(2 ** 31))
        return mo.sample_occlusion_mask(kind, seed, marker_set, t_frames)[0]

    return sample


def _reconstruction_loss(pred, target, cut, mask=None):
    """L1 on marker rows plus BCE on contact rows; both means, masked
    parts with no visible entry are skipped entirely."""
    if mask is not None:
        # hidden target entries may hold anything; make annihilation exact
        target = np.where(mask, target, 0.0)
    total = None
    for sl, kind in ((slice(None, cut), "l1"), (slice(cut, None), "bce")):
        part_mask = None
        if mask is not None:
            part_mask = mask[..., sl, :]
            if not part_mask.any():
                continue
        term = ad.losses(pred[..., sl, :], target[..., sl, :], kind,
                         mask=part_mask)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("mask hides every entry; nothing to supervise")
    return total


def train_infiller(clips, body, mask_sampler=None, epochs=900, batch=120,
                   lr=1e-4, seed=0, log_path=None):
    """Fit an InfillNetwork to canonical clips with resampled occlusions.

    Every batch draws fresh masks from mask_sampler, feeds the masked
    tensors, and scores L1 + BCE against the FULL unmasked channel 0.
    Returns (model, per-epoch losses).  A non-finite loss aborts and
    restores the last end-of-epoch checkpoint.
    """
    if not clips:
        raise ValueError("training needs at least one clip")
    t_frames = clips[0].T
    if any(c.T != t_frames for c in clips):
        raise ValueError("training clips must share a frame count")
    if mask_sampler is None:
        mask_sampler = make_mask_sampler(body.markers, t_frames)
    identity = np.ones(mo.infill_dims(body.markers)[:1] + (t_frames,))
    full = np.stack([mo.build_infill_tensor(c, body, identity)[0]
                     for c in clips])                     # (N, P, T, 4)
    full = full.transpose(0, 3, 1, 2).astype(np.float32)  # (N, 4, P, T)
    cut = full.shape[2] - N_CONTACT_ROWS

    model = InfillNetwork(seed=seed)
    params = model.parameters()
    adam = ad.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    snapshot = [p.data.copy() for p in params]
    epoch_losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(clips))
        running, count, bad = 0.0, 0, False
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            masked = full[idx].copy()
            for row, clip_i in enumerate(idx):
                masked[row, 0] *= mask_sampler(rng).astype(np.float32)
            adam.zero_grad()
            batch_loss = 0.0
            for off in range(0, len(idx), ACCUM_CHUNK):
                part = slice(off, min(off + ACCUM_CHUNK, len(idx)))
                pred = model.forward(ad.Tensor(masked[part]))
                target = full[idx[part], :1]
                loss = _reconstruction_loss(pred, target, cut) \
                    * (part.stop - part.start) / len(idx)
                loss.backward()
                batch_loss += float(loss.data)
            if not np.isfinite(batch_loss):
                for p, saved in zip(params, snapshot):
                    p.data = saved.copy()
                bad = True
                break
            adam.step()
            running += batch_loss * len(idx)
            count += len(idx)
        if bad:
            break
        snapshot = [p.data.copy() for p in params]
        epoch_losses.append(running / count)
    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write("epoch,loss\n")
            for i, val in enumerate(epoch_losses):
                fh.write(f"{i},{val!r}\n")
    return model, epoch_losses


def finetune_per_instance(model, masked_tensor, mask, steps=100, lr=1e-4,
                          target=None):
    """Adapt a copy of the weights to one test sequence.

    masked_tensor is the (P, T, 4) output of build_infill_tensor for the
    observed (occluded) sequence; the loss runs only over mask==1 entries
    of the target (channel 0 of the tensor unless given explicitly), so
    whatever sits in the hidden entries cannot influence the gradients.
    The input model is left untouched.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if not mask.any():
        raise ValueError("mask hides every entry; nothing to supervise")
    y = np.asarray(masked_tensor, dtype=np.float32).transpose(2, 0, 1)
    if y.shape[0] != 4:
        raise ValueError(f"expected a (P, T, 4) tensor, got {masked_tensor.shape}")
    cut = y.shape[1] - N_CONTACT_ROWS
    if target is None:
        target = y[:1]
    else:
        target = np.asarray(target, dtype=np.float32)[None]
    mask3 = mask[None].astype(bool)

    adapted = model.copy()
    params = adapted.parameters()
    adam = ad.Adam(params, lr=lr)
    losses = []
    yt = ad.Tensor(y)
    for _ in range(steps):
        adam.zero_grad()
        pred = adapted.forward(yt)
        loss = _reconstruction_loss(pred, target, cut, mask=mask3)
        losses.append(float(loss.data))
        loss.backward()
        adam.step()
    return adapted, losses


def infer(model, masked_tensor, pivot0=(0.0, 0.0), yaw0=0.0):
    """Decode (P, T, 4) network input into world-frame predictions.

    Returns (xhat, chat): (T, nb, 3) global marker tracks rebuilt by
    integrating the root velocity channels from (pivot0, yaw0), the
    canonical origin by default, and (T, 4) binary contact labels
    (probability 0.5 rounds to 1).
    """
    y = np.asarray(masked_tensor, dtype=np.float32).transpose(2, 0, 1)
    pred = model.forward(ad.Tensor(y)).data[0]        # (P, T)
    p_rows, t_frames = pred.shape
    nb = (p_rows - N_CONTACT_ROWS) // 3
    local = pred[:3 * nb].T.reshape(t_frames, nb, 3).astype(np.float64)
    chat = (pred[3 * nb:].T >= 0.5).astype(np.int64)  # (T, 4)

    # channels 1-3 are constant down rows; the mean recovers them exactly
    vloc = y[1:3].mean(axis=1).T.astype(np.float64)   # (T, 2) m/frame
    yaw_rate = y[3].mean(axis=0).astype(np.float64)   # (T,) rad/frame
    yaw = np.full(t_frames, float(yaw0))
    pivot = np.tile(np.asarray(pivot0, dtype=np.float64), (t_frames, 1))
    for t in range(t_frames - 1):
        c, s = np.cos(yaw[t]), np.sin(yaw[t])
        pivot[t + 1] = pivot[t] + (c * vloc[t, 0] - s * vloc[t, 1],
                                   s * vloc[t, 0] + c * vloc[t, 1])
        yaw[t + 1] = yaw[t] + yaw_rate[t]

    xhat = np.empty_like(local)
    for t in range(t_frames):
        xhat[t] = local[t] @ mo.rot_z(-yaw[t])
        xhat[t, :, :2] += pivot[t]
    return xhat, chat
