"""Autoregressive decoding of motion-token answers and the full generation pipeline.

The pipeline for one request: tokenize the pose condition (if any), render the
instruction prompt, sample answer ids from the LM, parse them back into motion
token indices, and decode those through the VQ-VAE into denormalized frames.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .data import MotionSequence, MotionStats, denormalize, normalize
from .errors import DomainError, GenerationError, ParseError
from .instructions import (
    InstructionRecord,
    InstructionSample,
    PromptVariant,
    TaskKind,
    build_instruction,
    parse_motion_answer,
)
from .lm import DecoderLM, Vocabulary, decode_answer_ids, encode_sample
from .vqvae import VqVae, detokenize, tokenize


@dataclass
class SamplingConfig:
    mode: str = "greedy"  # greedy | top-k | temperature
    k: int = 10
    temperature: float = 1.0
    max_new_tokens: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "top-k", "temperature"):
            raise DomainError(f"unknown sampling mode '{self.mode}'")
        if self.max_new_tokens < 1:
            raise DomainError("max_new_tokens must be >= 1")
        if self.temperature <= 0:
            raise DomainError("temperature must be positive")


@dataclass
class GenerationResult:
    tokens: list[int]
    motion: MotionSequence
    raw_answer: str
    stop_reason: str  # eos | max_len | parse_stop
    prompt_ids: list[int] = field(default_factory=list)
    generated_ids: list[int] = field(default_factory=list)


@dataclass
class ModelBundle:
    """Everything needed to run the pipeline end to end."""

    vqvae: VqVae
    lm: DecoderLM
    vocab: Vocabulary
    stats: MotionStats
    variant: PromptVariant = PromptVariant.V0


def generate_tokens(
    model: DecoderLM,
    prompt_ids: list[int],
    cfg: SamplingConfig,
    eos_id: int,
) -> tuple[list[int], str]:
    """Sample ids until EOS or the token budget. Greedy mode is deterministic;
    sampling modes are deterministic given cfg.seed."""
    if len(prompt_ids) + cfg.max_new_tokens > model.cfg.max_seq_len:
        raise DomainError(
            f"prompt of {len(prompt_ids)} tokens leaves no room for {cfg.max_new_tokens} "
            f"new tokens under max_seq_len={model.cfg.max_seq_len}"
        )
    gen = torch.Generator().manual_seed(cfg.seed)
    ids = list(prompt_ids)
    new_ids: list[int] = []
    model.eval()
    with torch.no_grad():
        for _ in range(cfg.max_new_tokens):
            logits = model(torch.as_tensor(ids, dtype=torch.long))[0, -1]
            if cfg.mode == "greedy":
                next_id = int(logits.argmax())
            else:
                scaled = logits / cfg.temperature
                if cfg.mode == "top-k":
                    top = torch.topk(scaled, min(cfg.k, scaled.shape[0]))
                    probs = torch.softmax(top.values, dim=0)
                    next_id = int(top.indices[torch.multinomial(probs, 1, generator=gen)])
                else:
                    probs = torch.softmax(scaled, dim=0)
                    next_id = int(torch.multinomial(probs, 1, generator=gen))
            ids.append(next_id)
            new_ids.append(next_id)
            if next_id == eos_id:
                return new_ids, "eos"
    return new_ids, "max_len"


def build_prompt_ids(sample: InstructionSample, vocab: Vocabulary) -> list[int]:
    """Ids of the rendered prompt up to (and including) the response marker."""
    probe = replace(sample, output="")
    ids, answer_start = encode_sample(probe, vocab)
    return ids[:answer_start]


def generate_motion(
    task: TaskKind,
    text: str,
    pose_cond: np.ndarray | None,
    bundle: ModelBundle,
    cfg: SamplingConfig,
    pose_tokens: list[int] | None = None,
) -> GenerationResult:
    """Full (text, task, condition) -> motion pipeline.

    ``pose_cond`` is a raw [n x D] frame array for the condition window; it is
    normalized and tokenized here. Precomputed ``pose_tokens`` may be passed
    instead (e.g. when replaying an instruction record).
    """
    if task == TaskKind.TEXT_ONLY:
        if pose_cond is not None or pose_tokens is not None:
            raise DomainError("text-only task takes no pose condition")
    else:
        if pose_tokens is None:
            if pose_cond is None:
                raise DomainError(f"task '{task.value}' requires a pose condition")
            cond = MotionSequence(np.asarray(pose_cond), source_id="condition")
            cond_norm = normalize(cond, bundle.stats)
            pose_tokens = tokenize(bundle.vqvae, cond_norm.frames)

    sample = build_instruction(task, text, pose_tokens, [0], bundle.variant)
    prompt_ids = build_prompt_ids(sample, bundle.vocab)
    generated_ids, stop_reason = generate_tokens(bundle.lm, prompt_ids, cfg, bundle.vocab.eos_id)
    raw_answer = decode_answer_ids(generated_ids, bundle.vocab)
    try:
        parsed = parse_motion_answer(raw_answer, bundle.vqvae.config.codebook_size)
    except ParseError as exc:
        raise GenerationError(f"generated answer failed to parse: {exc}", raw_answer=raw_answer) from exc
    if parsed.truncated:
        stop_reason = "parse_stop"
    frames_norm = detokenize(bundle.vqvae, parsed.tokens)
    motion = denormalize(MotionSequence(frames_norm, source_id="generated"), bundle.stats)
    return GenerationResult(
        tokens=parsed.tokens,
        motion=motion,
        raw_answer=raw_answer,
        stop_reason=stop_reason,
        prompt_ids=prompt_ids,
        generated_ids=generated_ids,
    )


@dataclass
class BatchItem:
    record: InstructionRecord
    result: GenerationResult | None
    error: str | None = None


@dataclass
class BatchOutput:
    items: list[BatchItem]

    @property
    def failures(self) -> int:
        return sum(1 for it in self.items if it.result is None)

    @property
    def successes(self) -> list[BatchItem]:
        return [it for it in self.items if it.result is not None]


def replay_record(record: InstructionRecord, bundle: ModelBundle, cfg: SamplingConfig) -> GenerationResult:
    """Generate from an instruction record's prompt (conditions already tokenized)."""
    prompt_ids = build_prompt_ids(record.sample, bundle.vocab)
    generated_ids, stop_reason = generate_tokens(bundle.lm, prompt_ids, cfg, bundle.vocab.eos_id)
    raw_answer = decode_answer_ids(generated_ids, bundle.vocab)
    try:
        parsed = parse_motion_answer(raw_answer, bundle.vqvae.config.codebook_size)
    except ParseError as exc:
        raise GenerationError(f"generated answer failed to parse: {exc}", raw_answer=raw_answer) from exc
    if parsed.truncated:
        stop_reason = "parse_stop"
    frames_norm = detokenize(bundle.vqvae, parsed.tokens)
    motion = denormalize(MotionSequence(frames_norm, source_id=record.motion_id), bundle.stats)
    return GenerationResult(
        tokens=parsed.tokens,
        motion=motion,
        raw_answer=raw_answer,
        stop_reason=stop_reason,
        prompt_ids=prompt_ids,
        generated_ids=generated_ids,
    )


def batch_generate(
    records: list[InstructionRecord],
    bundle: ModelBundle,
    cfg: SamplingConfig,
    task: TaskKind | None = None,
) -> BatchOutput:
    """One result per record (optionally filtered to one task kind).

    Failures are recorded per item, never fatal; ordering follows the input.
    """
    items: list[BatchItem] = []
    for record in records:
        if task is not None and record.sample.kind != task:
            continue
        try:
            result = replay_record(record, bundle, cfg)
            items.append(BatchItem(record=record, result=result))
        except (GenerationError, DomainError) as exc:
            items.append(BatchItem(record=record, result=None, error=str(exc)))
    return BatchOutput(items=items)
