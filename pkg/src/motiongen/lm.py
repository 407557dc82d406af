"""Decoder-only LM with a frozen base and trainable low-rank adapters.

The base transformer (token + position embeddings, pre-LN causal attention,
MLP blocks) stands in for the frozen foundation model. Adapters follow the
usual low-rank recipe: each adapted projection computes
``W x + (alpha / r) * B A x`` with ``B`` zero-initialized so the model equals
the frozen base at step 0. Only the adapter matrices receive gradients during
instruction tuning; the loss is cross-entropy over answer-span positions.

Motion indices are atomic vocabulary entries (one id per codebook slot), so
answers decode deterministically back to token indices.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, DomainError, TrainingError
from .instructions import (
    MOTION_CLOSE,
    MOTION_OPEN,
    InstructionRecord,
    InstructionSample,
    PromptVariant,
    preamble,
)
from .io_utils import atomic_savez

BASE_MAGIC = "BASE1"
LORA_MAGIC = "LORA1"

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
PRE_DEFAULT, PRE_V1 = "<preamble:default>", "<preamble:v1>"
SEC_INSTRUCTION, SEC_INPUT, SEC_RESPONSE = "### Instruction:", "### Input:", "### Response:"
STRUCTURAL_TOKENS = (
    PAD, BOS, EOS, UNK,
    MOTION_OPEN, MOTION_CLOSE,
    PRE_DEFAULT, PRE_V1,
    SEC_INSTRUCTION, SEC_INPUT, SEC_RESPONSE,
)

_WORD_RE = re.compile(r"[a-z]+(?:'[a-z]+)?|\d+|[^\w\s]")


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


@dataclass
class Vocabulary:
    """Dense id table: sorted text words, then the motion block, then structural."""

    text_tokens: list[str]
    motion_vocab_size: int

    def __post_init__(self):
        if self.motion_vocab_size <= 0:
            raise DomainError("motion_vocab_size must be positive")
        self._ids = {tok: i for i, tok in enumerate(self.text_tokens)}
        self.motion_offset = len(self.text_tokens)
        base = self.motion_offset + self.motion_vocab_size
        self._structural = {tok: base + i for i, tok in enumerate(STRUCTURAL_TOKENS)}

    def __len__(self) -> int:
        return self.motion_offset + self.motion_vocab_size + len(STRUCTURAL_TOKENS)

    def text_id(self, word: str) -> int:
        return self._ids.get(word, self._structural[UNK])

    def motion_id(self, index: int) -> int:
        if not 0 <= index < self.motion_vocab_size:
            raise DomainError(f"motion index {index} outside [0, {self.motion_vocab_size})")
        return self.motion_offset + index

    def motion_index(self, token_id: int) -> int | None:
        """Inverse of motion_id; None when the id is not in the motion block."""
        if self.motion_offset <= token_id < self.motion_offset + self.motion_vocab_size:
            return token_id - self.motion_offset
        return None

    def structural_id(self, token: str) -> int:
        return self._structural[token]

    @property
    def pad_id(self) -> int:
        return self._structural[PAD]

    @property
    def bos_id(self) -> int:
        return self._structural[BOS]

    @property
    def eos_id(self) -> int:
        return self._structural[EOS]

    def to_json(self) -> dict:
        return {"text_tokens": self.text_tokens, "motion_vocab_size": self.motion_vocab_size}

    @classmethod
    def from_json(cls, blob: dict) -> "Vocabulary":
        return cls(text_tokens=list(blob["text_tokens"]), motion_vocab_size=int(blob["motion_vocab_size"]))


def build_vocab(records: list[InstructionRecord] | list[InstructionSample], motion_vocab_size: int) -> Vocabulary:
    if motion_vocab_size <= 0:
        raise DomainError("motion_vocab_size must be positive")
    if not records:
        raise DomainError("cannot build a vocabulary from an empty corpus")
    words: set[str] = set()
    for rec in records:
        sample = rec.sample if isinstance(rec, InstructionRecord) else rec
        words.update(split_words(sample.instruction))
        for segment in _split_motion_spans(sample.input):
            if isinstance(segment, str):
                words.update(split_words(segment))
    return Vocabulary(text_tokens=sorted(words), motion_vocab_size=motion_vocab_size)


def _split_motion_spans(text: str):
    """Yield text segments and lists of motion indices from a delimited input string."""
    cursor = 0
    while True:
        start = text.find(MOTION_OPEN, cursor)
        if start == -1:
            if cursor < len(text):
                yield text[cursor:]
            return
        if start > cursor:
            yield text[cursor:start]
        end = text.find(MOTION_CLOSE, start)
        if end == -1:
            raise DomainError("unterminated motion token span")
        body = text[start + len(MOTION_OPEN) : end]
        yield [int(p) for p in re.findall(r"\d+", body)]
        cursor = end + len(MOTION_CLOSE)


def encode_sample(sample: InstructionSample, vocab: Vocabulary) -> tuple[list[int], int]:
    """Render a sample to token ids. Returns (ids, answer_start).

    Positions from ``answer_start`` to the end (answer tokens + EOS) form the
    supervised span; everything before is prompt.
    """
    pre_tok = PRE_V1 if sample.variant == PromptVariant.V1 else PRE_DEFAULT
    ids = [vocab.bos_id, vocab.structural_id(pre_tok), vocab.structural_id(SEC_INSTRUCTION)]
    ids += [vocab.text_id(w) for w in split_words(sample.instruction)]
    ids.append(vocab.structural_id(SEC_INPUT))
    for segment in _split_motion_spans(sample.input):
        if isinstance(segment, str):
            ids += [vocab.text_id(w) for w in split_words(segment)]
        else:
            ids.append(vocab.structural_id(MOTION_OPEN))
            ids += [vocab.motion_id(i) for i in segment]
            ids.append(vocab.structural_id(MOTION_CLOSE))
    ids.append(vocab.structural_id(SEC_RESPONSE))
    answer_start = len(ids)
    ids += [vocab.motion_id(int(p)) for p in re.findall(r"\d+", sample.output)]
    ids.append(vocab.eos_id)
    return ids, answer_start


def decode_answer_ids(ids: list[int], vocab: Vocabulary) -> str:
    """Render generated ids back to the bare comma-separated answer text."""
    pieces = []
    for token_id in ids:
        if token_id == vocab.eos_id:
            break
        index = vocab.motion_index(int(token_id))
        pieces.append(str(index) if index is not None else "?")
    return ", ".join(pieces)


@dataclass
class LmConfig:
    n_layers: int = 4
    n_heads: int = 4
    model_dim: int = 256
    ffn_dim: int = 512
    max_seq_len: int = 256

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise ConfigError("model_dim must be divisible by n_heads")


LORA_TARGETS = ("q", "k", "v", "o")


@dataclass
class LoraConfig:
    r: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = LORA_TARGETS
    dropout: float = 0.0

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError("LoRA rank r must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("LoRA alpha must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        unknown = set(self.targets) - set(LORA_TARGETS)
        if unknown:
            raise ConfigError(f"unknown LoRA targets {sorted(unknown)}")
        self.targets = tuple(self.targets)

    @property
    def scaling(self) -> float:
        return self.alpha / self.r


def effective_weight(w: torch.Tensor, a: torch.Tensor, b: torch.Tensor, alpha: float, r: int) -> torch.Tensor:
    """W + (alpha / r) * B A."""
    if a.shape[0] != r or b.shape[1] != r or w.shape != (b.shape[0], a.shape[1]):
        raise DomainError(
            f"shape mismatch: W {tuple(w.shape)}, A {tuple(a.shape)}, B {tuple(b.shape)}, r={r}"
        )
    return w + (alpha / r) * (b @ a)


class LoraLinear(nn.Module):
    """Frozen linear projection with an optional low-rank adapter on top."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.base = nn.Linear(d_in, d_out, bias=False)
        self.lora_a: nn.Parameter | None = None
        self.lora_b: nn.Parameter | None = None
        self.scaling = 0.0
        self.dropout = nn.Identity()

    def attach_adapter(self, cfg: LoraConfig) -> None:
        d_out, d_in = self.base.weight.shape
        self.lora_a = nn.Parameter(torch.randn(cfg.r, d_in) * 0.01)
        self.lora_b = nn.Parameter(torch.zeros(d_out, cfg.r))
        self.scaling = cfg.scaling
        self.dropout = nn.Dropout(cfg.dropout) if cfg.dropout > 0 else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.base(x)
        if self.lora_a is not None:
            out = out + self.scaling * (self.dropout(x) @ self.lora_a.T @ self.lora_b.T)
        return out


class Block(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        d = cfg.model_dim
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.q = LoraLinear(d, d)
        self.k = LoraLinear(d, d)
        self.v = LoraLinear(d, d)
        self.o = LoraLinear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(
            nn.Linear(d, cfg.ffn_dim), nn.GELU(), nn.Linear(cfg.ffn_dim, d)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, s, d = x.shape
        h = self.ln1(x)
        q = self.q(h).view(b, s, self.n_heads, -1).transpose(1, 2)
        k = self.k(h).view(b, s, self.n_heads, -1).transpose(1, 2)
        v = self.v(h).view(b, s, self.n_heads, -1).transpose(1, 2)
        att = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        att = att.transpose(1, 2).reshape(b, s, d)
        x = x + self.o(att)
        x = x + self.mlp(self.ln2(x))
        return x


class DecoderLM(nn.Module):
    def __init__(self, cfg: LmConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.tok_emb = nn.Embedding(vocab_size, cfg.model_dim)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, cfg.model_dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.model_dim)
        self.head = nn.Linear(cfg.model_dim, vocab_size, bias=False)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.ndim == 1:
            ids = ids.unsqueeze(0)
        s = ids.shape[1]
        if s > self.cfg.max_seq_len:
            raise DomainError(f"sequence of {s} tokens exceeds max_seq_len={self.cfg.max_seq_len}")
        if int(ids.max()) >= self.vocab_size:
            raise DomainError("token id outside vocabulary")
        pos = torch.arange(s, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(pos)[None]
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))

    # --- adapter management -------------------------------------------------

    def attach_adapters(self, cfg: LoraConfig, seed: int | None = None) -> None:
        if seed is not None:
            torch.manual_seed(seed)
        self.lora_config = cfg
        for block in self.blocks:
            for name in cfg.targets:
                getattr(block, name).attach_adapter(cfg)

    def adapter_parameters(self):
        for _, p in self.named_adapter_parameters():
            yield p

    def named_adapter_parameters(self):
        for name, p in self.named_parameters():
            if "lora_a" in name or "lora_b" in name:
                yield name, p

    def base_parameters(self):
        adapter = {id(p) for p in self.adapter_parameters()}
        return [p for p in self.parameters() if id(p) not in adapter]

    def freeze_base(self) -> None:
        for p in self.base_parameters():
            p.requires_grad_(False)


# --- parameter accounting ---------------------------------------------------

def count_base_params(cfg: LmConfig, vocab_size: int) -> int:
    """Closed-form base parameter count for this architecture."""
    d, ffn = cfg.model_dim, cfg.ffn_dim
    per_layer = 2 * d + 4 * d * d + 2 * d + (d * ffn + ffn) + (ffn * d + d)
    return (
        vocab_size * d            # token embedding
        + cfg.max_seq_len * d     # position embedding
        + cfg.n_layers * per_layer
        + 2 * d                   # final layernorm
        + d * vocab_size          # output head
    )


def count_adapter_params(lora: LoraConfig, cfg: LmConfig) -> int:
    d = cfg.model_dim
    return cfg.n_layers * sum(lora.r * (d + d) for _ in lora.targets)


def trainable_ratio(lora: LoraConfig, cfg: LmConfig, vocab_size: int) -> float:
    return count_adapter_params(lora, cfg) / count_base_params(cfg, vocab_size)


# --- training ---------------------------------------------------------------

@dataclass
class TrainSchedule:
    steps: int = 500
    lr: float = 3e-3               # initial learning rate (AdamW)
    weight_decay: float = 0.01
    batch_size: int = 256
    micro_batch: int = 4
    seed: int = 0
    memory_budget_mb: float = 2048.0

    @property
    def accumulation_steps(self) -> int:
        if self.batch_size % self.micro_batch != 0:
            raise ConfigError("batch_size must be a multiple of micro_batch")
        return self.batch_size // self.micro_batch


@dataclass
class LmTrainResult:
    model: DecoderLM
    log: list[dict] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.log[-1]["loss"] if self.log else float("nan")


def _encode_batch(records, vocab, cfg: LmConfig):
    encoded = []
    for rec in records:
        sample = rec.sample if isinstance(rec, InstructionRecord) else rec
        ids, answer_start = encode_sample(sample, vocab)
        if len(ids) > cfg.max_seq_len:
            raise ConfigError(
                f"rendered sample of {len(ids)} tokens exceeds max_seq_len={cfg.max_seq_len}"
            )
        encoded.append((ids, answer_start))
    return encoded


def _pad_batch(items, pad_id: int):
    """Pad to common length; returns (ids [B,S], loss_mask [B,S])."""
    width = max(len(ids) for ids, _ in items)
    ids_out = torch.full((len(items), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(items), width), dtype=torch.bool)
    for row, (ids, answer_start) in enumerate(items):
        ids_out[row, : len(ids)] = torch.as_tensor(ids)
        mask[row, answer_start : len(ids)] = True
    return ids_out, mask


def answer_cross_entropy(model: DecoderLM, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """CE of next-token prediction over answer-span positions only."""
    logits = model(ids)
    targets = ids[:, 1:]
    target_mask = mask[:, 1:]
    if not target_mask.any():
        raise DomainError("batch has no supervised positions")
    flat = logits[:, :-1][target_mask]
    return F.cross_entropy(flat, targets[target_mask])


def train_step(model: DecoderLM, optimizer, batch, vocab: Vocabulary) -> float:
    ids, mask = _pad_batch(_encode_batch(batch, vocab, model.cfg), vocab.pad_id)
    loss = answer_cross_entropy(model, ids, mask)
    if not torch.isfinite(loss):
        raise TrainingError("cross-entropy loss is not finite")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


def pretrain_base(
    records,
    vocab: Vocabulary,
    cfg: LmConfig,
    steps: int = 200,
    lr: float = 1e-3,
    seed: int = 0,
    include_answers: bool = False,
) -> DecoderLM:
    """Briefly train the base LM on the corpus text side, then freeze it.

    With include_answers=False the answer span is masked out, so the base only
    learns the prompt-side language; answer behavior is left to the adapters.
    """
    torch.manual_seed(seed)
    model = DecoderLM(cfg, len(vocab))
    encoded = _encode_batch(records, vocab, cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.01)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        picks = rng.integers(0, len(encoded), size=min(8, len(encoded)))
        items = [encoded[i] for i in picks]
        ids, answer_mask = _pad_batch(items, vocab.pad_id)
        not_pad = ids != vocab.pad_id
        mask = not_pad if include_answers else (not_pad & ~answer_mask)
        mask = mask.clone()
        mask[:, 0] = False  # BOS has no preceding context
        loss = answer_cross_entropy(model, ids, mask)
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.freeze_base()
    model.eval()
    model.vocab = vocab
    return model


def train_lm(
    records,
    model: DecoderLM,
    lora: LoraConfig,
    schedule: TrainSchedule,
    log_every: int = 25,
) -> LmTrainResult:
    """LoRA fine-tune a frozen base on instruction records.

    The effective batch is assembled by gradient accumulation
    (batch_size = micro_batch * accumulation steps); only adapter matrices
    receive gradients. Deterministic given schedule.seed.
    """
    if not records:
        raise TrainingError("instruction corpus is empty")
    accumulation = schedule.accumulation_steps
    est_mb = 4 * count_base_params(model.cfg, model.vocab_size) / 2**20 * 4  # params+grads+adam
    if est_mb > schedule.memory_budget_mb:
        raise ConfigError(
            f"configuration needs ~{est_mb:.0f} MiB, over the {schedule.memory_budget_mb:.0f} MiB budget"
        )

    model.freeze_base()
    model.attach_adapters(lora, seed=schedule.seed)
    model.train()
    params = list(model.adapter_parameters())
    opt = torch.optim.AdamW(params, lr=schedule.lr, weight_decay=schedule.weight_decay)
    rng = np.random.default_rng(schedule.seed)

    vocab = getattr(model, "vocab", None)
    if vocab is None:
        raise TrainingError("model has no attached vocabulary; set model.vocab before training")
    encoded = _encode_batch(records, vocab, model.cfg)

    log: list[dict] = []
    for step in range(schedule.steps):
        opt.zero_grad()
        total = 0.0
        for _ in range(accumulation):
            picks = rng.integers(0, len(encoded), size=min(schedule.micro_batch, len(encoded)))
            ids, mask = _pad_batch([encoded[i] for i in picks], vocab.pad_id)
            loss = answer_cross_entropy(model, ids, mask) / accumulation
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged at step {step}")
            loss.backward()
            total += loss.item()
        opt.step()
        if step % log_every == 0 or step == schedule.steps - 1:
            log.append({"step": step, "loss": total})
    model.eval()
    return LmTrainResult(model=model, log=log)


def corpus_cross_entropy(model: DecoderLM, records, vocab: Vocabulary) -> float:
    """Answer-span CE over a whole instruction corpus (evaluation mode)."""
    model.eval()
    with torch.no_grad():
        ids, mask = _pad_batch(_encode_batch(records, vocab, model.cfg), vocab.pad_id)
        return answer_cross_entropy(model, ids, mask).item()


# --- checkpoints ------------------------------------------------------------

def save_base(model: DecoderLM, vocab: Vocabulary, path) -> None:
    state = {k: v.detach().numpy() for k, v in model.state_dict().items() if "lora_" not in k}
    atomic_savez(
        path,
        magic=BASE_MAGIC,
        config=json.dumps(asdict(model.cfg)),
        vocab=json.dumps(vocab.to_json()),
        **{f"param/{k}": v for k, v in state.items()},
    )


def load_base(path) -> tuple[DecoderLM, Vocabulary]:
    with np.load(path, allow_pickle=False) as blob:
        if str(blob["magic"]) != BASE_MAGIC:
            raise ConfigError(f"{path}: not a base LM checkpoint")
        cfg = LmConfig(**json.loads(str(blob["config"])))
        vocab = Vocabulary.from_json(json.loads(str(blob["vocab"])))
        state = {k[len("param/"):]: torch.as_tensor(blob[k]) for k in blob.files if k.startswith("param/")}
    model = DecoderLM(cfg, len(vocab))
    model.load_state_dict(state)
    model.freeze_base()
    model.eval()
    model.vocab = vocab
    return model, vocab


def save_adapter(model: DecoderLM, path) -> None:
    if not hasattr(model, "lora_config"):
        raise DomainError("model has no attached adapters")
    arrays = {name: p.detach().numpy() for name, p in model.named_adapter_parameters()}
    cfg = asdict(model.lora_config)
    cfg["targets"] = list(cfg["targets"])
    atomic_savez(path, magic=LORA_MAGIC, config=json.dumps(cfg), **{f"param/{k}": v for k, v in arrays.items()})


def load_adapter(model: DecoderLM, path) -> LoraConfig:
    with np.load(path, allow_pickle=False) as blob:
        if str(blob["magic"]) != LORA_MAGIC:
            raise ConfigError(f"{path}: not an adapter checkpoint")
        raw = json.loads(str(blob["config"]))
        raw["targets"] = tuple(raw["targets"])
        cfg = LoraConfig(**raw)
        arrays = {k[len("param/"):]: torch.as_tensor(blob[k]) for k in blob.files if k.startswith("param/")}
    model.attach_adapters(cfg)
    with torch.no_grad():
        for name, p in model.named_adapter_parameters():
            p.copy_(arrays[name])
    model.eval()
    return cfg
