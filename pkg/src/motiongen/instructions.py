"""Instruction templates, answer parsing, and pose-condition sampling.

The prompt layout is the stock instruction-tuning template (system preamble,
``### Instruction`` / ``### Input`` / ``### Response`` sections). Motion token
indices travel as comma-separated decimals; pose control conditions are
wrapped in a ``<Motion Token>...</Motion Token>`` span appended to the input
text. Three prompt wordings (V0 default, V1, V2) are supported.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .data import Corpus, MotionSequence, normalize
from .errors import DomainError, ParseError
from .io_utils import atomic_write_text


class TaskKind(str, Enum):
    TEXT_ONLY = "text"
    TEXT_INIT = "init"
    TEXT_LAST = "last"
    TEXT_KEY = "key"

    @property
    def slot(self) -> str:
        return self.value


class PromptVariant(str, Enum):
    V0 = "v0"
    V1 = "v1"
    V2 = "v2"


MOTION_OPEN = "<Motion Token>"
MOTION_CLOSE = "</Motion Token>"

PREAMBLE_DEFAULT = (
    "Below is an instruction that describes a task, paired with an input that provides "
    "further context. Write a response that appropriately completes the request."
)
PREAMBLE_V1 = (
    "Human motion can be represented by token indices by VQ-VAE. Below is an instruction "
    "that describes human motion generation condition types, paired with an input that "
    "provides specific conditions. Write a sequence of tokens matching with given conditions."
)

_TASK_PROMPTS = {
    PromptVariant.V0: (
        "Generate a sequence of motion tokens matching the following human motion description.",
        "Generate a sequence of motion tokens matching the following human motion description"
        " given the {slot} pose tokens.",
    ),
    PromptVariant.V1: (
        "Motion description.",
        "Motion description and the {slot} pose tokens.",
    ),
    PromptVariant.V2: (
        "Generate the token sequence of the given human motion description.",
        "Generate the token sequence of the given human motion description"
        " under the premise of the given {slot} pose tokens.",
    ),
}


@dataclass
class InstructionSample:
    instruction: str
    input: str
    output: str
    kind: TaskKind
    variant: PromptVariant = PromptVariant.V0


def preamble(variant: PromptVariant) -> str:
    return PREAMBLE_V1 if variant == PromptVariant.V1 else PREAMBLE_DEFAULT


def render_task_prompt(kind: TaskKind, variant: PromptVariant = PromptVariant.V0) -> str:
    text_only, with_pose = _TASK_PROMPTS[variant]
    if kind == TaskKind.TEXT_ONLY:
        return text_only
    return with_pose.format(slot=kind.slot)


def _check_tokens(tokens) -> list[int]:
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise DomainError("motion token sequence must be non-empty")
    if any(t < 0 for t in tokens):
        raise DomainError("motion token indices must be non-negative")
    return tokens


def format_token_indices(tokens) -> str:
    """Bare answer form: decimals joined by a comma and a space."""
    return ", ".join(str(t) for t in _check_tokens(tokens))


def encode_motion_tokens(tokens) -> str:
    """Delimiter-wrapped pose condition span."""
    return MOTION_OPEN + format_token_indices(tokens) + MOTION_CLOSE


def build_instruction(
    kind: TaskKind,
    text: str,
    pose_tokens,
    answer_tokens,
    variant: PromptVariant = PromptVariant.V0,
) -> InstructionSample:
    if kind == TaskKind.TEXT_ONLY:
        if pose_tokens is not None:
            raise DomainError("text-only task takes no pose tokens")
        input_text = text
    else:
        if pose_tokens is None:
            raise DomainError(f"task '{kind.value}' requires pose tokens")
        input_text = text + encode_motion_tokens(pose_tokens)
    return InstructionSample(
        instruction=render_task_prompt(kind, variant),
        input=input_text,
        output=format_token_indices(answer_tokens),
        kind=kind,
        variant=variant,
    )


def render_full_prompt(
    sample: InstructionSample,
    include_answer: bool = False,
    variant: PromptVariant | None = None,
) -> str:
    variant = sample.variant if variant is None else variant
    prompt = (
        preamble(variant)
        + "\n\n### Instruction:\n"
        + sample.instruction
        + "\n\n### Input:\n"
        + sample.input
        + "\n\n### Response:"
    )
    if include_answer:
        prompt += "\n" + sample.output
    return prompt


_STOP_MARKERS = ("</s>", MOTION_CLOSE, "###")
_TOKEN_RE = re.compile(r"\s*(\d+)\s*(?:,|$|\s)")


@dataclass
class ParsedAnswer:
    tokens: list[int]
    truncated: bool = False

    def __iter__(self):
        return iter(self.tokens)

    def __len__(self):
        return len(self.tokens)


def parse_motion_answer(text: str, vocab_size: int, strict: bool = False) -> ParsedAnswer:
    """Extract motion token indices from answer text.

    Reads comma/whitespace separated decimals left to right, stopping at the
    first end-of-sequence marker. A non-numeric token truncates the sequence
    (longest valid prefix) unless ``strict``; an out-of-range index is always
    an error.
    """
    body = text
    for marker in _STOP_MARKERS:
        cut = body.find(marker)
        if cut != -1:
            body = body[:cut]

    tokens: list[int] = []
    truncated = False
    pos = 0
    for piece in re.split(r"[,\s]+", body.strip()):
        if not piece:
            continue
        if not piece.isdigit():
            truncated = True
            if strict:
                raise ParseError(
                    f"non-numeric token {piece!r} at position {pos}", raw_text=text, position=pos
                )
            break
        value = int(piece)
        if value >= vocab_size:
            raise ParseError(
                f"token {value} at position {pos} outside vocabulary of {vocab_size}",
                raw_text=text,
                position=pos,
            )
        tokens.append(value)
        pos += 1
    if not tokens:
        raise ParseError("no valid motion tokens in answer", raw_text=text)
    return ParsedAnswer(tokens=tokens, truncated=truncated)


INIT_LAST_WINDOW = 4
KEY_COUNT_RANGE = (12, 20)


def sample_pose_condition(
    gt: MotionSequence,
    kind: TaskKind,
    rng: np.random.Generator,
    vqvae,
) -> tuple[np.ndarray, list[int], list[int]]:
    """Extract condition frames + tokens from a (normalized) ground-truth motion.

    Init/last use the leading/trailing 4-frame window aligned to whole
    downsample windows; key picks a uniform count in [12, 20] of sorted random
    frame positions. Condition tokens are the tokens of the full-sequence
    tokenization that cover the chosen frames, so they agree with the answer
    token sequence by construction.
    """
    from .vqvae import tokenize  # local import to avoid a module cycle

    if kind == TaskKind.TEXT_ONLY:
        raise DomainError("text-only task has no pose condition")
    f = vqvae.config.downsample
    t = gt.num_frames
    t_crop = (t // f) * f
    full_tokens = tokenize(vqvae, gt.frames)
    n_window_tokens = -(-INIT_LAST_WINDOW // f)  # ceil(4 / f)

    if kind == TaskKind.TEXT_INIT:
        if t_crop < INIT_LAST_WINDOW:
            raise DomainError(f"motion too short for a {INIT_LAST_WINDOW}-frame init window")
        positions = list(range(INIT_LAST_WINDOW))
        tokens = full_tokens[:n_window_tokens]
    elif kind == TaskKind.TEXT_LAST:
        if t_crop < INIT_LAST_WINDOW:
            raise DomainError(f"motion too short for a {INIT_LAST_WINDOW}-frame last window")
        positions = list(range(t_crop - INIT_LAST_WINDOW, t_crop))
        tokens = full_tokens[-n_window_tokens:]
    elif kind == TaskKind.TEXT_KEY:
        lo, hi = KEY_COUNT_RANGE
        if t_crop < lo:
            raise DomainError(f"motion too short for keyframe sampling (needs >= {lo} frames)")
        count = int(rng.integers(lo, min(hi, t_crop) + 1))
        positions = sorted(int(p) for p in rng.choice(t_crop, size=count, replace=False))
        token_ids = sorted({p // f for p in positions})
        tokens = [full_tokens[i] for i in token_ids]
    else:  # pragma: no cover
        raise DomainError(f"unknown task kind {kind}")

    frames = gt.frames[np.asarray(positions)]
    return frames, tokens, positions


@dataclass
class InstructionRecord:
    """One corpus row: the sample plus provenance needed by the metric suite."""

    sample: InstructionSample
    motion_id: str
    text: str
    positions: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "kind": self.sample.kind.value,
            "instruction": self.sample.instruction,
            "input": self.sample.input,
            "output": self.sample.output,
            "motion_id": self.motion_id,
            "text": self.text,
            "positions": self.positions,
            "variant": self.sample.variant.value,
        }

    @classmethod
    def from_json(cls, row: dict) -> "InstructionRecord":
        sample = InstructionSample(
            instruction=row["instruction"],
            input=row["input"],
            output=row["output"],
            kind=TaskKind(row["kind"]),
            variant=PromptVariant(row.get("variant", "v0")),
        )
        return cls(
            sample=sample,
            motion_id=row["motion_id"],
            text=row.get("text", ""),
            positions=list(row.get("positions", [])),
        )


def build_instruction_corpus(
    corpus: Corpus,
    vqvae,
    kinds=(TaskKind.TEXT_ONLY, TaskKind.TEXT_INIT, TaskKind.TEXT_LAST, TaskKind.TEXT_KEY),
    variant: PromptVariant = PromptVariant.V0,
    seed: int = 0,
    split: str = "train",
) -> list[InstructionRecord]:
    """Render every (annotation, task kind) pair into an instruction record.

    Motions too short for a kind's condition window are skipped for that kind.
    """
    from .vqvae import tokenize

    rng = np.random.default_rng(seed)
    sub = corpus.subset(split)
    records: list[InstructionRecord] = []
    for ann in sub.annotations:
        motion = sub.motion_by_id(ann.motion_id)
        norm = normalize(motion, corpus.stats)
        if norm.num_frames < vqvae.config.downsample:
            continue
        answer_tokens = tokenize(vqvae, norm.frames)
        for kind in kinds:
            if kind == TaskKind.TEXT_ONLY:
                sample = build_instruction(kind, ann.text, None, answer_tokens, variant)
                positions: list[int] = []
            else:
                try:
                    _, cond_tokens, positions = sample_pose_condition(norm, kind, rng, vqvae)
                except DomainError:
                    continue
                sample = build_instruction(kind, ann.text, cond_tokens, answer_tokens, variant)
            records.append(
                InstructionRecord(
                    sample=sample, motion_id=ann.motion_id, text=ann.text, positions=positions
                )
            )
    return records


def save_instruction_corpus(records: list[InstructionRecord], path: Path | str) -> None:
    lines = [json.dumps(r.to_json(), sort_keys=True) for r in records]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_instruction_corpus(path: Path | str) -> list[InstructionRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(InstructionRecord.from_json(json.loads(line)))
    return records
