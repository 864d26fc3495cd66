"""Byte-level tokenizer and k-shot sequence construction with loss masks."""
from __future__ import annotations

from dataclasses import dataclass, field

BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259


class SequenceTooLongError(ValueError):
    pass


def tokenize(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def detokenize(ids) -> str:
    """Inverse of :func:`tokenize`; reserved ids (BOS/EOS/PAD) are dropped."""
    return bytes(int(i) for i in ids if 0 <= int(i) < 256).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class Example:
    x: str
    y: str

    def __post_init__(self):
        if not self.y:
            raise ValueError("Example.y must be non-empty")


@dataclass(frozen=True)
class Template:
    separator: str = "\n== Next Example ==\n"
    query_suffix: str = ""
    instruction: str | None = None

    def __post_init__(self):
        if not tokenize(self.separator):
            raise ValueError("separator must encode to at least one token")


@dataclass
class PromptSequence:
    tokens: list[int]
    loss_mask: list[int]
    n_context: int = 0
    target_start: int = 0  # index of the first token of the final response
    spans: list[tuple[str, int, int]] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_masked(self) -> int:
        return sum(self.loss_mask)


def _assemble(ctx, x: str, y: str | None, template: Template, mask_context: bool):
    tokens = [BOS]
    mask = [0]
    spans = []

    def put(kind, ids, m):
        spans.append((kind, len(tokens), len(tokens) + len(ids)))
        tokens.extend(ids)
        mask.extend([m] * len(ids))

    if template.instruction:
        put("instruction", tokenize(template.instruction), 0)
    sep = tokenize(template.separator)
    for ex in ctx:
        put("query", tokenize(ex.x + template.query_suffix), 0)
        put("response", tokenize(ex.y), 1 if mask_context else 0)
        put("separator", sep, 0)
    put("query", tokenize(x + template.query_suffix), 0)
    target_start = len(tokens)
    if y is not None:
        put("response", tokenize(y), 1)
        put("eos", [EOS], 1)
    return tokens, mask, spans, target_start


def _check_length(tokens, spans, max_seq_len):
    if max_seq_len is not None and len(tokens) > max_seq_len:
        parts = {}
        for kind, a, b in spans:
            parts[kind] = parts.get(kind, 0) + (b - a)
        detail = ", ".join(f"{k}={v}" for k, v in parts.items())
        raise SequenceTooLongError(
            f"sequence of {len(tokens)} tokens exceeds max_seq_len={max_seq_len} ({detail})"
        )


def build_training_sequence(
    ctx, target: Example, template: Template, max_seq_len: int | None = None, mask_context: bool = True
) -> PromptSequence:
    """BOS [instruction] x1 y1 sep ... xk yk sep x y EOS.

    The mask is 1 on every response span and on the closing EOS.  With
    ``mask_context=False`` only the final response and EOS are scored, which is
    what next-step evaluation of a single target needs.
    """
    tokens, mask, spans, start = _assemble(ctx, target.x, target.y, template, mask_context)
    _check_length(tokens, spans, max_seq_len)
    return PromptSequence(tokens, mask, n_context=len(ctx), target_start=start, spans=spans)


def build_eval_prompt(ctx, x: str, template: Template, max_seq_len: int | None = None) -> list[int]:
    """Same layout as the training sequence, cut right after the final query."""
    tokens, _, spans, _ = _assemble(ctx, x, None, template, True)
    _check_length(tokens, spans, max_seq_len)
    return tokens
