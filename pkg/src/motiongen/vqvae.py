"""Discrete motion tokenizer: temporal conv VQ-VAE over motion-feature frames.

Encoder downsamples time by a factor ``f`` (stride-2 conv stages), the
codebook snaps each latent frame to its nearest entry (lowest index on ties),
and the decoder mirrors the encoder back to frame rate. Codebook gradients
come from the embedding term; the encoder sees the commitment term plus the
straight-through reconstruction gradient.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
from torch import nn

from .data import Corpus, MotionSequence, normalize
from .errors import ConfigError, DomainError, TrainingError
from .io_utils import atomic_savez

CKPT_MAGIC = "VQV1"


@dataclass
class VqVaeConfig:
    feature_dim: int
    codebook_size: int = 64
    latent_dim: int = 32
    downsample: int = 4
    beta: float = 0.25
    hidden_dim: int = 64

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if self.downsample < 1 or (self.downsample & (self.downsample - 1)) != 0:
            raise ConfigError(f"downsample must be a power of two >= 1, got {self.downsample}")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")


@dataclass
class LossBreakdown:
    """Loss terms; ``commit`` already carries the beta scale, total is their sum."""

    recon: torch.Tensor
    embed: torch.Tensor
    commit: torch.Tensor
    total: torch.Tensor


def quantize(latent: torch.Tensor, entries: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest-codebook-entry lookup. Returns (indices [L], quantized [L x d]).

    Ties break to the lowest index (argmin returns the first minimum).
    """
    if latent.ndim != 2 or latent.shape[1] != entries.shape[1]:
        raise DomainError(
            f"latent width {tuple(latent.shape)} does not match codebook {tuple(entries.shape)}"
        )
    dist = ((latent[:, None, :] - entries[None, :, :]) ** 2).sum(dim=-1)
    indices = dist.argmin(dim=1)
    return indices, entries[indices]


def vqvae_loss(
    motion: torch.Tensor,
    recon: torch.Tensor,
    latent: torch.Tensor,
    quantized: torch.Tensor,
    beta: float,
) -> LossBreakdown:
    """Reconstruction + embedding + beta-scaled commitment (mean-square convention)."""
    if beta < 0:
        raise DomainError("beta must be non-negative")
    recon_term = ((recon - motion) ** 2).mean()
    embed_term = ((latent.detach() - quantized) ** 2).mean()
    commit_term = beta * ((latent - quantized.detach()) ** 2).mean()
    return LossBreakdown(
        recon=recon_term,
        embed=embed_term,
        commit=commit_term,
        total=recon_term + embed_term + commit_term,
    )


class VqVae(nn.Module):
    def __init__(self, config: VqVaeConfig):
        super().__init__()
        self.config = config
        c = config
        n_stages = int(math.log2(c.downsample)) if c.downsample > 1 else 0

        # Window-local encoder: kernel-2 strided stages give each latent a
        # receptive field of exactly f frames, so tokens of a frame window
        # equal the corresponding tokens of the full sequence.
        enc: list[nn.Module] = [nn.Conv1d(c.feature_dim, c.hidden_dim, 1), nn.ReLU()]
        for _ in range(n_stages):
            enc += [nn.Conv1d(c.hidden_dim, c.hidden_dim, 2, stride=2), nn.ReLU()]
        enc.append(nn.Conv1d(c.hidden_dim, c.latent_dim, 1))
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv1d(c.latent_dim, c.hidden_dim, 3, padding=1), nn.ReLU()]
        for _ in range(n_stages):
            dec += [nn.ConvTranspose1d(c.hidden_dim, c.hidden_dim, 4, stride=2, padding=1), nn.ReLU()]
        dec.append(nn.Conv1d(c.hidden_dim, c.feature_dim, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

        self.codebook = nn.Parameter(torch.empty(c.codebook_size, c.latent_dim))
        nn.init.uniform_(self.codebook, -1.0 / c.codebook_size, 1.0 / c.codebook_size)

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        """frames [T x D] -> latents [floor(T/f) x d]; trailing partial window dropped."""
        f = self.config.downsample
        t = frames.shape[0]
        if t < f:
            raise DomainError(f"motion has {t} frames; encoder needs at least {f}")
        if frames.shape[1] != self.config.feature_dim:
            raise DomainError(
                f"feature width {frames.shape[1]} != configured {self.config.feature_dim}"
            )
        t_crop = (t // f) * f
        x = frames[:t_crop].T.unsqueeze(0)  # [1, D, T]
        z = self.encoder(x)
        return z.squeeze(0).T  # [L, d]

    def decode(self, quantized: torch.Tensor) -> torch.Tensor:
        """quantized [L x d] -> frames [L*f x D]."""
        if quantized.ndim != 2 or quantized.shape[1] != self.config.latent_dim:
            raise DomainError(
                f"expected [L x {self.config.latent_dim}] latents, got {tuple(quantized.shape)}"
            )
        x = quantized.T.unsqueeze(0)
        y = self.decoder(x)
        return y.squeeze(0).T

    def forward(self, frames: torch.Tensor):
        """Training pass with straight-through gradient on the quantized latents."""
        latent = self.encode(frames)
        indices, quantized = quantize(latent, self.codebook)
        quantized_st = latent + (quantized - latent).detach()
        recon = self.decode(quantized_st)
        return recon, latent, quantized, indices


def tokenize(model: VqVae, frames: np.ndarray | torch.Tensor) -> list[int]:
    """Normalized frames -> codebook indices, length floor(T/f)."""
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
        latent = model.encode(x)
        indices, _ = quantize(latent, model.codebook)
    return indices.tolist()


def detokenize(model: VqVae, tokens: list[int]) -> np.ndarray:
    """Codebook indices -> normalized frames [len(tokens)*f x D]."""
    if not tokens:
        raise DomainError("cannot detokenize an empty token sequence")
    n = model.config.codebook_size
    for pos, tok in enumerate(tokens):
        if not 0 <= int(tok) < n:
            raise DomainError(f"token {tok} at position {pos} outside [0, {n})")
    with torch.no_grad():
        quantized = model.codebook[torch.as_tensor(tokens, dtype=torch.long)]
        frames = model.decode(quantized)
    return frames.numpy()


@dataclass
class TrainLogEntry:
    step: int
    recon: float
    embed: float
    commit: float
    total: float


@dataclass
class VqVaeTrainResult:
    model: VqVae
    log: list[TrainLogEntry]
    usage: np.ndarray = field(default=None)  # per-entry token counts on the train split

    @property
    def usage_fraction(self) -> float:
        return float((self.usage > 0).mean())


def codebook_usage(model: VqVae, corpus: Corpus) -> np.ndarray:
    counts = np.zeros(model.config.codebook_size, dtype=np.int64)
    for motion in corpus.motions:
        frames = normalize(motion, corpus.stats).frames
        if frames.shape[0] < model.config.downsample:
            continue
        for tok in tokenize(model, frames):
            counts[tok] += 1
    return counts


def train_vqvae(
    corpus: Corpus,
    config: VqVaeConfig,
    steps: int = 2000,
    batch_size: int = 8,
    window: int = 32,
    lr: float = 2e-3,
    seed: int = 0,
    log_every: int = 50,
    reset_every: int = 100,
) -> VqVaeTrainResult:
    """Train on random crops of the normalized train split; deterministic given seed."""
    train = corpus.subset("train")
    if not train.motions:
        raise TrainingError("train split is empty")
    if window % config.downsample != 0:
        raise ConfigError("window must be a multiple of the downsample factor")

    torch.manual_seed(seed)
    model = VqVae(config)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    clips = [normalize(m, corpus.stats).frames for m in train.motions]
    clips = [c for c in clips if c.shape[0] >= window]
    if not clips:
        raise TrainingError(f"no training clip reaches the crop window of {window} frames")

    log: list[TrainLogEntry] = []
    last_finite = None
    hit_counts = np.zeros(config.codebook_size, dtype=np.int64)
    for step in range(steps):
        picks = rng.integers(0, len(clips), size=batch_size)
        batch = []
        for idx in picks:
            clip = clips[idx]
            start = int(rng.integers(0, clip.shape[0] - window + 1))
            batch.append(clip[start : start + window])
        frames = torch.as_tensor(np.stack(batch), dtype=torch.float32)

        if step == 0:
            # Seed the codebook from first-batch latents so entries start
            # inside the latent cloud; dead entries otherwise never revive.
            with torch.no_grad():
                z0 = model.encoder(frames.transpose(1, 2)).transpose(1, 2)
                z0 = z0.reshape(-1, config.latent_dim)
                rows = rng.integers(0, z0.shape[0], size=config.codebook_size)
                jitter = 0.01 * torch.as_tensor(
                    rng.standard_normal(model.codebook.shape), dtype=torch.float32
                )
                model.codebook.copy_(z0[torch.as_tensor(rows, dtype=torch.long)] + jitter)

        # batch as one long sequence per clip is wasteful; run the conv stack batched
        x = frames.transpose(1, 2)  # [B, D, T]
        latent = model.encoder(x).transpose(1, 2)  # [B, L, d]
        flat = latent.reshape(-1, config.latent_dim)
        indices, quantized = quantize(flat, model.codebook)
        hit_counts += np.bincount(indices.numpy(), minlength=config.codebook_size)
        quantized = quantized.reshape(latent.shape)
        quantized_st = latent + (quantized - latent).detach()
        recon = model.decoder(quantized_st.transpose(1, 2)).transpose(1, 2)
        loss = vqvae_loss(frames, recon, latent, quantized, config.beta)

        if not torch.isfinite(loss.total):
            raise TrainingError(
                f"loss diverged at step {step}; last finite step: {last_finite}"
            )
        last_finite = TrainLogEntry(
            step, loss.recon.item(), loss.embed.item(), loss.commit.item(), loss.total.item()
        )
        if step % log_every == 0 or step == steps - 1:
            log.append(last_finite)

        opt.zero_grad()
        loss.total.backward()
        opt.step()

        # Random-restart dead entries: any code unused over the last window is
        # reseeded to a latent from the current batch (plus a little jitter).
        if reset_every and (step + 1) % reset_every == 0 and step + 1 < steps:
            dead = np.flatnonzero(hit_counts == 0)
            if dead.size:
                with torch.no_grad():
                    pool = flat.detach()
                    rows = rng.integers(0, pool.shape[0], size=dead.size)
                    jitter = 0.01 * torch.as_tensor(
                        rng.standard_normal((dead.size, config.latent_dim)),
                        dtype=torch.float32,
                    )
                    model.codebook[torch.as_tensor(dead, dtype=torch.long)] = (
                        pool[torch.as_tensor(rows, dtype=torch.long)] + jitter
                    )
            hit_counts[:] = 0

    model.eval()
    usage = codebook_usage(model, train)
    return VqVaeTrainResult(model=model, log=log, usage=usage)


def save_vqvae(model: VqVae, path, stats=None) -> None:
    """Checkpoint the model (and optionally the corpus normalization stats)."""
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    extra = {}
    if stats is not None:
        extra["stats/mean"] = np.asarray(stats.mean)
        extra["stats/std"] = np.asarray(stats.std)
    atomic_savez(
        path,
        magic=CKPT_MAGIC,
        config=json.dumps(asdict(model.config)),
        **{f"param/{k}": v for k, v in arrays.items()},
        **extra,
    )


def load_vqvae(path) -> VqVae:
    from .data import MotionStats

    with np.load(path, allow_pickle=False) as blob:
        if str(blob["magic"]) != CKPT_MAGIC:
            raise ConfigError(f"{path}: not a VQ-VAE checkpoint (magic {blob['magic']})")
        config = VqVaeConfig(**json.loads(str(blob["config"])))
        model = VqVae(config)
        state = {k[len("param/") :]: torch.as_tensor(blob[k]) for k in blob.files if k.startswith("param/")}
        stats = None
        if "stats/mean" in blob.files:
            stats = MotionStats(blob["stats/mean"], blob["stats/std"])
    model.load_state_dict(state)
    model.eval()
    model.stats = stats
    return model
