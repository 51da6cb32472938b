"""Per-device cycle-consistent translators that map shifted-domain IQ slices
back into the base domain's statistical space.

Each device owns a pair of generators (G: S->T, F: T->S) and two patch-style
discriminators trained with least-squares adversarial losses plus an L1
cycle-consistency term. Translators are independent artifacts; at
authentication time every device hypothesis runs its own translator and the
max rule arbitrates.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import Divergence, LabelMismatch, ShapeError
from .iqdata import SliceSet

# Three stride-2 downsampling stages; the decoder restores length only for
# multiples of 8.
MIN_GEN_LENGTH = 64

DEFAULT_CYCLE_WEIGHT = 10.0


@dataclass
class RevealTrainConfig:
    """Translator training hyperparameters."""

    epochs: int = 60
    learning_rate: float = 2e-4
    batch_size: int = 16
    replay_size: int = 50
    seed: int = 0


@dataclass
class StepRecord:
    """Loss snapshot for one generator update step."""

    step: int
    l_gan1: float
    l_gan2: float
    l_cyc: float
    l_full: float


@dataclass
class TranslatorPair:
    """Generators G (S->T), F (T->S) and discriminators for one device."""

    device_id: int
    G: nn.Module
    F: nn.Module
    D_S: nn.Module
    D_T: nn.Module
    slice_length: int
    cycle_weight: float = DEFAULT_CYCLE_WEIGHT
    source_domain: str = "S"
    target_domain: str = "T"
    training_log: list = field(default_factory=list)
    customization: dict | None = None

    def __post_init__(self):
        if not self.cycle_weight > 0:
            raise ShapeError("cycle_weight must be > 0")

    def state_dicts(self):
        return {
            "G": copy.deepcopy(self.G.state_dict()),
            "F": copy.deepcopy(self.F.state_dict()),
            "D_S": copy.deepcopy(self.D_S.state_dict()),
            "D_T": copy.deepcopy(self.D_T.state_dict()),
        }

    def load_state_dicts(self, blobs):
        self.G.load_state_dict(blobs["G"])
        self.F.load_state_dict(blobs["F"])
        self.D_S.load_state_dict(blobs["D_S"])
        self.D_T.load_state_dict(blobs["D_T"])


class _ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv1d(channels, channels, 3, padding=1),
            nn.InstanceNorm1d(channels, affine=True),
            nn.ReLU(),
            nn.Conv1d(channels, channels, 3, padding=1),
            nn.InstanceNorm1d(channels, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator1D(nn.Module):
    """Encoder (3 stride-2 blocks), 9 residual blocks, decoder (2 upsampling
    blocks, the last with an extra stride-2 upsample so output length equals
    input length), and a kernel-7 output projection back to 2 channels.
    """

    def __init__(self, slice_length, base_filters=16):
        super().__init__()
        _check_gen_length(slice_length)
        f = base_filters
        self.slice_length = slice_length
        self.encoder = nn.Sequential(
            nn.Conv1d(2, f, 7, stride=2, padding=3),
            nn.InstanceNorm1d(f, affine=True),
            nn.ReLU(),
            nn.Conv1d(f, 2 * f, 3, stride=2, padding=1),
            nn.InstanceNorm1d(2 * f, affine=True),
            nn.ReLU(),
            nn.Conv1d(2 * f, 4 * f, 3, stride=2, padding=1),
            nn.InstanceNorm1d(4 * f, affine=True),
            nn.ReLU(),
        )
        self.transform = nn.Sequential(*[_ResBlock(4 * f) for _ in range(9)])
        self.decoder = nn.Sequential(
            nn.ConvTranspose1d(4 * f, 2 * f, 4, stride=2, padding=1),
            nn.InstanceNorm1d(2 * f, affine=True),
            nn.ReLU(),
            nn.ConvTranspose1d(2 * f, f, 4, stride=2, padding=1),
            nn.InstanceNorm1d(f, affine=True),
            nn.ReLU(),
            nn.ConvTranspose1d(f, f, 4, stride=2, padding=1),
            nn.InstanceNorm1d(f, affine=True),
            nn.ReLU(),
        )
        self.output_conv = nn.Conv1d(f, 2, 7, padding=3)

    def forward(self, x):
        return self.output_conv(self.decoder(self.transform(self.encoder(x))))


class PatchDiscriminator1D(nn.Module):
    """Convolutional patch critic emitting a grid of raw realness scores.

    No sigmoid: the least-squares objective operates on raw scores. The grid
    has length slice_length // 8 (three stride-2 stages).
    """

    def __init__(self, slice_length, base_filters=32):
        super().__init__()
        _check_gen_length(slice_length)
        f = base_filters
        self.slice_length = slice_length
        self.body = nn.Sequential(
            nn.Conv1d(2, f, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv1d(f, 2 * f, 4, stride=2, padding=1),
            nn.InstanceNorm1d(2 * f, affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv1d(2 * f, 4 * f, 4, stride=2, padding=1),
            nn.InstanceNorm1d(4 * f, affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv1d(4 * f, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.body(x).squeeze(1)


def _check_gen_length(slice_length):
    if slice_length < MIN_GEN_LENGTH or slice_length % 8 != 0:
        raise ShapeError(
            f"slice_length {slice_length} unsupported: need a multiple of 8 "
            f"that is >= {MIN_GEN_LENGTH}"
        )


def score_grid_length(slice_length: int) -> int:
    """Discriminator score-grid length for a given slice length."""
    _check_gen_length(slice_length)
    return slice_length // 8


def _gan_init(net: nn.Module):
    # translation-network convention: small normal weights, zero biases
    for mod in net.modules():
        if isinstance(mod, (nn.Conv1d, nn.ConvTranspose1d)):
            nn.init.normal_(mod.weight, 0.0, 0.02)
            if mod.bias is not None:
                nn.init.zeros_(mod.bias)


def build_generator(slice_length: int, base_filters: int = 16, seed: int | None = None):
    if seed is not None:
        torch.manual_seed(seed)
    net = Generator1D(slice_length, base_filters)
    _gan_init(net)
    return net


def build_discriminator(slice_length: int, base_filters: int = 32, seed: int | None = None):
    if seed is not None:
        torch.manual_seed(seed)
    net = PatchDiscriminator1D(slice_length, base_filters)
    _gan_init(net)
    return net


def build_translator_pair(
    device_id: int,
    slice_length: int,
    cycle_weight: float = DEFAULT_CYCLE_WEIGHT,
    base_filters: int = 16,
    disc_filters: int = 32,
    seed: int = 0,
) -> TranslatorPair:
    torch.manual_seed(seed)
    nets = [
        Generator1D(slice_length, base_filters),
        Generator1D(slice_length, base_filters),
        PatchDiscriminator1D(slice_length, disc_filters),
        PatchDiscriminator1D(slice_length, disc_filters),
    ]
    for net in nets:
        _gan_init(net)
    return TranslatorPair(
        device_id=device_id,
        G=nets[0],
        F=nets[1],
        D_S=nets[2],
        D_T=nets[3],
        slice_length=slice_length,
        cycle_weight=cycle_weight,
    )


def lsgan_losses(d_out_real, d_out_fake):
    """Least-squares adversarial terms from raw discriminator scores.

    Returns (generator_term, discriminator_term):
      discriminator_term = mean((D(real) - 1)^2) + mean(D(fake)^2)
      generator_term     = mean((D(fake) - 1)^2)
    Works on numpy arrays and torch tensors alike.
    """
    generator_term = ((d_out_fake - 1.0) ** 2).mean()
    discriminator_term = ((d_out_real - 1.0) ** 2).mean() + (d_out_fake**2).mean()
    return generator_term, discriminator_term


def cycle_loss(s_batch, f_of_g_of_s, t_batch, g_of_f_of_t):
    """Mean L1 reconstruction error of both cycles: F(G(S)) vs S plus G(F(T)) vs T."""
    if s_batch.shape != f_of_g_of_s.shape or t_batch.shape != g_of_f_of_t.shape:
        raise ShapeError("cycle_loss operands must match shapes pairwise")
    return abs(f_of_g_of_s - s_batch).mean() + abs(g_of_f_of_t - t_batch).mean()


def full_loss(l_gan1, l_gan2, l_cyc, cycle_weight: float = DEFAULT_CYCLE_WEIGHT):
    """Composite objective: l_gan1 + l_gan2 + cycle_weight * l_cyc."""
    if not cycle_weight > 0:
        raise ShapeError("cycle_weight must be > 0")
    return l_gan1 + l_gan2 + cycle_weight * l_cyc


class ReplayBuffer:
    """Pool of up to `size` previously generated slices.

    Discriminators train against a mix of fresh and replayed fakes: each
    incoming item either passes through, or (with probability 1/2 once the
    pool is full) swaps with a stored one.
    """

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.items = []

    def push_and_pop(self, batch: torch.Tensor) -> torch.Tensor:
        if self.size <= 0:
            return batch
        out = []
        for item in batch:
            item = item.detach().clone()
            if len(self.items) < self.size:
                self.items.append(item)
                out.append(item)
            elif self.rng.random() < 0.5:
                slot = int(self.rng.integers(0, self.size))
                out.append(self.items[slot])
                self.items[slot] = item
            else:
                out.append(item)
        return torch.stack(out)


def _single_device_tensor(slices: SliceSet, device_id: int, name: str) -> torch.Tensor:
    ids = slices.device_ids
    if ids != [device_id]:
        raise LabelMismatch(
            f"{name} must contain only device {device_id}, found labels {ids}"
        )
    return torch.from_numpy(np.ascontiguousarray(slices.slices, dtype=np.float32))


def _set_requires_grad(module: nn.Module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def train_translator(
    pair: TranslatorPair,
    S_train: SliceSet,
    T_train: SliceSet,
    config: RevealTrainConfig | None = None,
    epoch_callback=None,
) -> TranslatorPair:
    """Alternating least-squares adversarial training of one device's pair.

    Generators minimize the fooling terms plus the weighted cycle loss with
    discriminators frozen; discriminators then minimize their least-squares
    terms against a replay pool of previously generated slices. Logs
    (l_gan1, l_gan2, l_cyc, l_full) per generator step. Deterministic for a
    fixed seed. epoch_callback(epoch, pair), when given, runs after every
    epoch (used by per-device customization to snapshot checkpoints).
    """
    config = config or RevealTrainConfig()
    if S_train.slice_length != pair.slice_length or T_train.slice_length != pair.slice_length:
        raise ShapeError("training slices do not match the translator slice length")
    xs = _single_device_tensor(S_train, pair.device_id, "S_train")
    xt = _single_device_tensor(T_train, pair.device_id, "T_train")
    pair.source_domain = S_train.domain_id
    pair.target_domain = T_train.domain_id

    rng = np.random.default_rng(config.seed)
    gen_params = list(pair.G.parameters()) + list(pair.F.parameters())
    disc_params = list(pair.D_S.parameters()) + list(pair.D_T.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=config.learning_rate, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc_params, lr=config.learning_rate, betas=(0.5, 0.999))
    decay_start = max(1, config.epochs // 2)

    def lr_factor(epoch):
        if epoch < decay_start:
            return 1.0
        return max(0.0, (config.epochs - epoch) / (config.epochs - decay_start))

    sched_g = torch.optim.lr_scheduler.LambdaLR(opt_g, lr_factor)
    sched_d = torch.optim.lr_scheduler.LambdaLR(opt_d, lr_factor)
    pool_s = ReplayBuffer(config.replay_size, rng)
    pool_t = ReplayBuffer(config.replay_size, rng)

    n_s, n_t = xs.shape[0], xt.shape[0]
    bs = config.batch_size
    steps_per_epoch = max(1, math.ceil(max(n_s, n_t) / bs))
    lam = pair.cycle_weight
    pair.training_log = []
    step = 0

    for epoch in range(config.epochs):
        perm_s = rng.permutation(n_s)
        perm_t = rng.permutation(n_t)
        for k in range(steps_per_epoch):
            s = xs[perm_s[(k * bs + np.arange(bs)) % n_s]]
            t = xt[perm_t[(k * bs + np.arange(bs)) % n_t]]

            # generator step (discriminators frozen)
            _set_requires_grad(pair.D_S, False)
            _set_requires_grad(pair.D_T, False)
            opt_g.zero_grad()
            fake_t = pair.G(s)
            fake_s = pair.F(t)
            rec_s = pair.F(fake_t)
            rec_t = pair.G(fake_s)
            # fooling terms: the generator side of lsgan_losses
            g1 = ((pair.D_T(fake_t) - 1.0) ** 2).mean()
            g2 = ((pair.D_S(fake_s) - 1.0) ** 2).mean()
            cyc = cycle_loss(s, rec_s, t, rec_t)
            loss_g = full_loss(g1, g2, cyc, lam)
            if not torch.isfinite(loss_g):
                raise Divergence(f"generator loss non-finite at step {step}")
            loss_g.backward()
            opt_g.step()

            # discriminator step (generators' outputs detached via the pools)
            _set_requires_grad(pair.D_S, True)
            _set_requires_grad(pair.D_T, True)
            opt_d.zero_grad()
            _, d_t_loss = lsgan_losses(pair.D_T(t), pair.D_T(pool_t.push_and_pop(fake_t)))
            _, d_s_loss = lsgan_losses(pair.D_S(s), pair.D_S(pool_s.push_and_pop(fake_s)))
            loss_d = d_t_loss + d_s_loss
            if not torch.isfinite(loss_d):
                raise Divergence(f"discriminator loss non-finite at step {step}")
            loss_d.backward()
            opt_d.step()

            l1, l2, lc = float(g1.detach()), float(g2.detach()), float(cyc.detach())
            pair.training_log.append(StepRecord(step, l1, l2, lc, l1 + l2 + lam * lc))
            step += 1
        sched_g.step()
        sched_d.step()
        if epoch_callback is not None:
            epoch_callback(epoch, pair)
    return pair


def translate(pair: TranslatorPair, slices: SliceSet) -> SliceSet:
    """Apply G to every slice; output is tagged with the pair's target domain."""
    if slices.slice_length != pair.slice_length:
        raise ShapeError(
            f"slices have length {slices.slice_length}, translator expects {pair.slice_length}"
        )
    pair.G.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(slices), 256):
            batch = torch.from_numpy(
                np.ascontiguousarray(slices.slices[start : start + 256], dtype=np.float32)
            )
            out.append(pair.G(batch).numpy())
    arr = (
        np.concatenate(out, axis=0)
        if out
        else np.zeros((0, 2, pair.slice_length), dtype=np.float32)
    )
    return SliceSet(arr, slices.labels, pair.target_domain, slices.slice_length, slices.stride)


def customize_per_device(
    pair: TranslatorPair,
    S_val: SliceSet,
    T_val: SliceSet,
    classifier,
    candidate_configs,
) -> TranslatorPair:
    """Grid-search translator hyperparameters and epoch budgets for one device.

    Candidates sharing everything but the epoch count are trained once with
    checkpoints taken at each epoch milestone. Every checkpoint is scored by
    validation TTOD: the share of this device's translated slices the
    classifier assigns to the device. The best checkpoint wins and the full
    selection table is recorded on the returned pair.
    """
    from .baseline import classify  # deferred to avoid a module cycle

    candidates = list(candidate_configs)
    if not candidates:
        raise ShapeError("candidate_configs must be non-empty")
    initial = pair.state_dicts()
    groups: dict[tuple, list[int]] = {}
    for i, cfg in enumerate(candidates):
        key = (cfg.learning_rate, cfg.batch_size, cfg.replay_size, cfg.seed)
        groups.setdefault(key, []).append(i)

    def score_current():
        out = classify(classifier, translate(pair, S_val))
        return 100.0 * float(np.mean(out.predicted == pair.device_id))

    results = []
    best = None  # (score, order, state, index)
    for key, idxs in groups.items():
        milestones = {candidates[i].epochs: i for i in idxs}
        run_cfg = replace(candidates[idxs[0]], epochs=max(milestones))
        pair.load_state_dicts(initial)

        def on_epoch(epoch, p, milestones=milestones):
            nonlocal best
            done = epoch + 1
            if done in milestones:
                idx = milestones[done]
                ttod = score_current()
                results.append((idx, ttod))
                if best is None or ttod > best[0]:
                    best = (ttod, len(results), p.state_dicts(), idx)

        train_translator(pair, S_val, T_val, run_cfg, epoch_callback=on_epoch)

    assert best is not None
    pair.load_state_dicts(best[2])
    chosen = candidates[best[3]]
    pair.customization = {
        "candidates": [
            {
                "epochs": candidates[i].epochs,
                "learning_rate": candidates[i].learning_rate,
                "val_ttod": ttod,
            }
            for i, ttod in sorted(results)
        ],
        "selected": {
            "epochs": chosen.epochs,
            "learning_rate": chosen.learning_rate,
            "val_ttod": best[0],
        },
    }
    return pair


def save_checkpoint(pair: TranslatorPair, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    g = pair.G
    torch.save(
        {
            "device_id": pair.device_id,
            "slice_length": pair.slice_length,
            "cycle_weight": pair.cycle_weight,
            "base_filters": g.encoder[0].out_channels,
            "disc_filters": pair.D_S.body[0].out_channels,
            "source_domain": pair.source_domain,
            "target_domain": pair.target_domain,
            "states": pair.state_dicts(),
            "customization": pair.customization,
        },
        path,
    )


def load_checkpoint(path) -> TranslatorPair:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    pair = build_translator_pair(
        blob["device_id"],
        blob["slice_length"],
        cycle_weight=blob["cycle_weight"],
        base_filters=blob["base_filters"],
        disc_filters=blob["disc_filters"],
    )
    pair.load_state_dicts(blob["states"])
    pair.source_domain = blob["source_domain"]
    pair.target_domain = blob["target_domain"]
    pair.customization = blob["customization"]
    return pair


def write_loss_log(pair: TranslatorPair, path):
    """Export the per-step loss log as CSV (step, l_gan1, l_gan2, l_cyc, l_full)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "l_gan1", "l_gan2", "l_cyc", "l_full"])
        for rec in pair.training_log:
            writer.writerow(
                [
                    rec.step,
                    f"{rec.l_gan1:.8f}",
                    f"{rec.l_gan2:.8f}",
                    f"{rec.l_cyc:.8f}",
                    f"{rec.l_full:.8f}",
                ]
            )
