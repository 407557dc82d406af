"""Generation-quality metric suite and the desk-scale feature extractor.

Distribution metrics (FID, MM Dist, R-Precision, Diversity) operate on
features from a contrastive bi-encoder trained on the same corpus; the metric
definitions are extractor-agnostic. Pose-consistency metrics (recon / vel /
key dist) compare generated frames against condition frames directly in
feature space.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import Corpus, MotionStats
from .errors import ConfigError, DomainError, TrainingError
from .io_utils import VERSION, atomic_savez, atomic_write_text
from .lm import split_words

ENC_MAGIC = "ENC1"


# --- feature extractor ------------------------------------------------------

class BiEncoder(nn.Module):
    """Two-branch encoder mapping motions and captions into a shared space.

    Motion branch: mean+std pooling over normalized frames, then an MLP.
    Text branch: averaged word embeddings, then an MLP. Trained with a
    symmetric InfoNCE objective over matched (motion, caption) pairs.
    """

    def __init__(self, feature_dim: int, words: list[str], stats: MotionStats,
                 hidden_dim: int = 64, out_dim: int = 16):
        super().__init__()
        self.feature_dim = feature_dim
        self.words = list(words)
        self.word_ids = {w: i + 1 for i, w in enumerate(self.words)}  # 0 = UNK
        self.out_dim = out_dim
        self.mean = torch.as_tensor(stats.mean, dtype=torch.float32)
        self.std = torch.as_tensor(stats.std, dtype=torch.float32)
        self.motion_net = nn.Sequential(
            nn.Linear(2 * feature_dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, out_dim)
        )
        self.word_emb = nn.Embedding(len(self.words) + 1, hidden_dim)
        self.text_net = nn.Sequential(
            nn.Linear(hidden_dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, out_dim)
        )
        self.temperature = nn.Parameter(torch.tensor(0.07))

    def _pool_motion(self, frames: torch.Tensor) -> torch.Tensor:
        norm = (frames - self.mean) / self.std
        return torch.cat([norm.mean(dim=0), norm.std(dim=0, unbiased=False)])

    def motion_features(self, frames) -> torch.Tensor:
        frames = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
        if frames.shape[1] != self.feature_dim:
            raise DomainError(f"motion width {frames.shape[1]} != extractor width {self.feature_dim}")
        return self.motion_net(self._pool_motion(frames))

    def text_features(self, text: str) -> torch.Tensor:
        ids = [self.word_ids.get(w, 0) for w in split_words(text)]
        if not ids:
            ids = [0]
        emb = self.word_emb(torch.as_tensor(ids, dtype=torch.long)).mean(dim=0)
        return self.text_net(emb)

    def encode_motion(self, frames) -> np.ndarray:
        with torch.no_grad():
            return self.motion_features(frames).numpy()

    def encode_text(self, text: str) -> np.ndarray:
        with torch.no_grad():
            return self.text_features(text).numpy()


def train_bi_encoder(
    corpus: Corpus,
    steps: int = 300,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
    out_dim: int = 16,
    hidden_dim: int = 64,
) -> BiEncoder:
    """Contrastive training on the train split's (motion, caption) pairs."""
    train = corpus.subset("train")
    if not train.annotations:
        raise TrainingError("no annotated training pairs")
    if len({a.text for a in train.annotations}) < 2:
        raise TrainingError("contrastive training needs at least 2 distinct captions")

    torch.manual_seed(seed)
    words = sorted({w for a in train.annotations for w in split_words(a.text)})
    model = BiEncoder(corpus.feature_dim, words, corpus.stats, hidden_dim=hidden_dim, out_dim=out_dim)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    pairs = [(train.motion_by_id(a.motion_id).frames, a.text) for a in train.annotations]

    for _ in range(steps):
        picks = rng.integers(0, len(pairs), size=min(batch_size, len(pairs)))
        m_feats = torch.stack([model.motion_features(pairs[i][0]) for i in picks])
        t_feats = torch.stack([model.text_features(pairs[i][1]) for i in picks])
        m_feats = F.normalize(m_feats, dim=1)
        t_feats = F.normalize(t_feats, dim=1)
        logits = m_feats @ t_feats.T / model.temperature.clamp(min=1e-3)
        labels = torch.arange(len(picks))
        loss = 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model


def save_bi_encoder(model: BiEncoder, path) -> None:
    config = {
        "feature_dim": model.feature_dim,
        "words": model.words,
        "hidden_dim": model.word_emb.embedding_dim,
        "out_dim": model.out_dim,
        "mean": model.mean.tolist(),
        "std": model.std.tolist(),
    }
    params = {f"param/{k}": v.detach().numpy() for k, v in model.state_dict().items()}
    atomic_savez(path, magic=ENC_MAGIC, config=json.dumps(config), **params)


def load_bi_encoder(path) -> BiEncoder:
    with np.load(path, allow_pickle=False) as blob:
        if str(blob["magic"]) != ENC_MAGIC:
            raise ConfigError(f"{path}: not a feature-extractor checkpoint")
        cfg = json.loads(str(blob["config"]))
        stats = MotionStats(np.asarray(cfg["mean"]), np.asarray(cfg["std"]))
        model = BiEncoder(cfg["feature_dim"], cfg["words"], stats,
                          hidden_dim=cfg["hidden_dim"], out_dim=cfg["out_dim"])
        state = {k[len("param/"):]: torch.as_tensor(blob[k]) for k in blob.files if k.startswith("param/")}
    model.load_state_dict(state)
    model.eval()
    return model


# --- distribution metrics ---------------------------------------------------

def _cov_mean(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(feats, dtype=np.float64)
    return feats.mean(axis=0), np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    vals = np.clip(vals, 0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _sqrt_trace(cov_r: np.ndarray, cov_g: np.ndarray, clip_tol: float = 1e-8) -> float:
    """Tr((Sr Sg)^{1/2}) via eigendecomposition of the symmetrized product."""
    root_r = _psd_sqrt(cov_r)
    inner = root_r @ cov_g @ root_r
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    if vals.min() < -clip_tol:
        raise np.linalg.LinAlgError(f"covariance product has eigenvalue {vals.min():.3e}")
    return float(np.sqrt(np.clip(vals, 0, None)).sum())


def fid(real_feats: np.ndarray, gen_feats: np.ndarray, return_details: bool = False):
    """Frechet distance between Gaussians fit to the two feature sets."""
    real_feats = np.atleast_2d(np.asarray(real_feats, dtype=np.float64))
    gen_feats = np.atleast_2d(np.asarray(gen_feats, dtype=np.float64))
    if real_feats.shape[0] < 2 or gen_feats.shape[0] < 2:
        raise DomainError("FID needs at least 2 samples per side")
    if real_feats.shape[1] != gen_feats.shape[1]:
        raise DomainError("feature widths differ")
    mu_r, cov_r = _cov_mean(real_feats)
    mu_g, cov_g = _cov_mean(gen_feats)

    jittered = False
    try:
        cross = _sqrt_trace(cov_r, cov_g)
    except np.linalg.LinAlgError:
        jittered = True
        eye = np.eye(cov_r.shape[0]) * 1e-6
        cross = _sqrt_trace(cov_r + eye, cov_g + eye)
        cov_r, cov_g = cov_r + eye, cov_g + eye
    value = float(((mu_r - mu_g) ** 2).sum() + np.trace(cov_r) + np.trace(cov_g) - 2 * cross)
    if return_details:
        return value, jittered
    return value


def mm_dist(text_feats: np.ndarray, gen_motion_feats: np.ndarray) -> float:
    """Mean Euclidean distance between matched (text, generated motion) features."""
    text_feats = np.asarray(text_feats, dtype=np.float64)
    gen_motion_feats = np.asarray(gen_motion_feats, dtype=np.float64)
    if text_feats.shape != gen_motion_feats.shape:
        raise DomainError("paired feature lists must have matching shape")
    return float(np.linalg.norm(text_feats - gen_motion_feats, axis=1).mean())


def r_precision(
    gen_motion_feats: np.ndarray,
    text_feats: np.ndarray,
    pool_size: int = 32,
    k: int = 1,
    seed: int = 0,
) -> float:
    """Top-k motion-to-text retrieval accuracy over pools of 1 true + rest mismatched."""
    gen_motion_feats = np.asarray(gen_motion_feats, dtype=np.float64)
    text_feats = np.asarray(text_feats, dtype=np.float64)
    n = gen_motion_feats.shape[0]
    if pool_size < k + 1:
        raise DomainError("pool_size must exceed k")
    if n < pool_size:
        raise DomainError(f"need at least pool_size={pool_size} paired samples, have {n}")
    rng = np.random.default_rng(seed)
    hits = 0
    for i in range(n):
        others = np.delete(np.arange(n), i)
        mism = rng.choice(others, size=pool_size - 1, replace=False)
        pool = np.concatenate([[i], mism])  # true text at pool index 0
        dists = np.linalg.norm(text_feats[pool] - gen_motion_feats[i], axis=1)
        order = np.argsort(dists, kind="stable")  # ties break by pool index
        if np.where(order == 0)[0][0] < k:
            hits += 1
    return hits / n


def diversity(gen_feats: np.ndarray, subset_size: int | None = None, seed: int = 0) -> float:
    """Mean distance between two disjoint random subsets, matched elementwise."""
    gen_feats = np.asarray(gen_feats, dtype=np.float64)
    n = gen_feats.shape[0]
    if subset_size is None:
        subset_size = min(300, n // 2)
    if subset_size < 1 or 2 * subset_size > n:
        raise DomainError(f"diversity needs 2*subset_size <= n (subset {subset_size}, n {n})")
    rng = np.random.default_rng(seed)
    picks = rng.choice(n, size=2 * subset_size, replace=False)
    a, b = gen_feats[picks[:subset_size]], gen_feats[picks[subset_size:]]
    return float(np.linalg.norm(a - b, axis=1).mean())


# --- pose-consistency metrics ----------------------------------------------

def recon_loss(gen_frames: np.ndarray, cond_frames: np.ndarray, positions) -> float:
    """Mean per-frame L2 distance between generated frames at the condition
    positions and the condition frames."""
    gen_frames = np.asarray(gen_frames, dtype=np.float64)
    cond_frames = np.asarray(cond_frames, dtype=np.float64)
    positions = list(positions)
    if not positions or len(positions) != cond_frames.shape[0]:
        raise DomainError("positions must match condition frames one-to-one")
    if min(positions) < 0 or max(positions) >= gen_frames.shape[0]:
        raise DomainError(
            f"position range [{min(positions)}, {max(positions)}] outside generated length "
            f"{gen_frames.shape[0]}"
        )
    diff = gen_frames[np.asarray(positions)] - cond_frames
    return float(np.linalg.norm(diff, axis=1).mean())


def vel_loss(gen_frames: np.ndarray, gt_frames: np.ndarray, positions) -> float:
    """L2 between generated and ground-truth finite-difference velocities at the
    boundary steps adjoining the condition window."""
    gen_frames = np.asarray(gen_frames, dtype=np.float64)
    gt_frames = np.asarray(gt_frames, dtype=np.float64)
    if gen_frames.shape[0] < 2 or gt_frames.shape[0] < 2:
        raise DomainError("velocity needs at least 2 frames")
    positions = sorted(positions)
    if not positions:
        raise DomainError("empty condition window")
    limit = min(gen_frames.shape[0], gt_frames.shape[0])
    steps = []
    if positions[0] - 1 >= 0:
        steps.append(positions[0] - 1)           # velocity entering the window
    if positions[-1] + 1 < limit:
        steps.append(positions[-1])              # velocity leaving the window
    if not steps:
        raise DomainError("condition window has no neighboring frame in both sequences")
    v_gen = gen_frames[1:] - gen_frames[:-1]
    v_gt = gt_frames[1:] - gt_frames[:-1]
    diff = v_gen[steps] - v_gt[steps]
    return float(np.linalg.norm(diff, axis=1).mean())


def key_dist(gen_frames: np.ndarray, key_frames: np.ndarray) -> float:
    """Mean over keys of the nearest Euclidean distance to any generated frame."""
    gen_frames = np.asarray(gen_frames, dtype=np.float64)
    key_frames = np.atleast_2d(np.asarray(key_frames, dtype=np.float64))
    if gen_frames.shape[0] == 0 or key_frames.shape[0] == 0:
        raise DomainError("key_dist needs non-empty inputs")
    dists = np.linalg.norm(key_frames[:, None, :] - gen_frames[None, :, :], axis=2)
    return float(dists.min(axis=1).mean())


# --- report assembly --------------------------------------------------------

@dataclass
class EvalConfig:
    pool_size: int = 32
    diversity_subset: int | None = None
    r_precision_seed: int = 0
    diversity_seed: int = 0
    sampling: dict = field(default_factory=dict)
    global_seed: int | None = None


@dataclass
class EvalReport:
    metrics: dict
    absent: dict
    counts: dict
    config: dict
    fid_jitter: bool = False
    version: str = VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        atomic_write_text(path, self.to_json())


def evaluate(batch_output, corpus: Corpus, extractor: BiEncoder, config: EvalConfig) -> EvalReport:
    """Compute every metric whose preconditions hold over a batch of results.

    Parse failures (items without a result) are excluded from the feature
    metrics and counted; pose metrics run per task kind where conditions are
    available.
    """
    from .instructions import TaskKind  # avoid import cycle at module load

    items = batch_output.items
    good = batch_output.successes
    metrics: dict[str, float] = {}
    absent: dict[str, str] = {}

    if len(good) >= 2:
        gen_feats = np.stack([extractor.encode_motion(it.result.motion.frames) for it in good])
        real_feats = np.stack(
            [extractor.encode_motion(corpus.motion_by_id(it.record.motion_id).frames) for it in good]
        )
        text_feats = np.stack([extractor.encode_text(it.record.text) for it in good])
        value, jittered = fid(real_feats, gen_feats, return_details=True)
        metrics["fid"] = value
        metrics["mm_dist"] = mm_dist(text_feats, gen_feats)
        fid_jitter = jittered
        if len(good) >= config.pool_size:
            for k in (1, 2, 3):
                metrics[f"r_precision_top{k}"] = r_precision(
                    gen_feats, text_feats, config.pool_size, k, seed=config.r_precision_seed
                )
        else:
            absent["r_precision"] = f"needs {config.pool_size} results, have {len(good)}"
        subset = config.diversity_subset or min(300, len(good) // 2)
        if subset >= 1 and 2 * subset <= len(good):
            metrics["diversity"] = diversity(gen_feats, subset, seed=config.diversity_seed)
        else:
            absent["diversity"] = f"needs 2*{subset} results, have {len(good)}"
    else:
        fid_jitter = False
        for name in ("fid", "mm_dist", "r_precision", "diversity"):
            absent[name] = f"needs >= 2 parsed results, have {len(good)}"

    # pose metrics are computed in normalized feature space
    mean, std = corpus.stats.mean, corpus.stats.std
    recon_vals, vel_vals, dist_vals = [], [], []
    for it in good:
        kind = it.record.sample.kind
        if kind == TaskKind.TEXT_ONLY or not it.record.positions:
            continue
        gt = (corpus.motion_by_id(it.record.motion_id).frames - mean) / std
        cond = gt[np.asarray(it.record.positions)]
        gen = (it.result.motion.frames - mean) / std
        if kind in (TaskKind.TEXT_INIT, TaskKind.TEXT_LAST):
            try:
                recon_vals.append(recon_loss(gen, cond, it.record.positions))
                vel_vals.append(vel_loss(gen, gt, it.record.positions))
            except DomainError:
                continue
        elif kind == TaskKind.TEXT_KEY:
            dist_vals.append(key_dist(gen, cond))
    if recon_vals:
        metrics["recon"] = float(np.mean(recon_vals))
        metrics["vel"] = float(np.mean(vel_vals))
    else:
        absent["recon"] = absent["vel"] = "no init/last conditioned results"
    if dist_vals:
        metrics["dist"] = float(np.mean(dist_vals))
    else:
        absent["dist"] = "no keyframe conditioned results"

    return EvalReport(
        metrics=metrics,
        absent=absent,
        counts={"evaluated": len(good), "excluded": len(items) - len(good)},
        config=asdict(config),
        fid_jitter=fid_jitter,
    )
