"""Tokenization, dataset files, and desk-scale synthetic classification tasks.

The tokenizer is byte-level: PAD=0, CLS=1, EOS=2, MASK=3 and byte ``b``
maps to ``4 + b`` (vocabulary size 260). Every sequence is laid out as
``[CLS] bytes [EOS] [PAD]...`` at a fixed length; over-long inputs are
tail-truncated and lose their EOS.

Two generators provide stand-in tasks:

* ``paren3`` - three classes of broken code-like snippets (an unmatched
  bracket, corrupted leading whitespace, a character deleted from a
  keyword), balanced;
* ``swapbug2`` - arithmetic expressions whose operands are either sorted
  (class 0, 90%) or have one adjacent pair swapped (class 1, 10%).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import InputError

logger = logging.getLogger(__name__)

PAD_ID = 0
CLS_ID = 1
EOS_ID = 2
MASK_ID = 3
BYTE_OFFSET = 4
VOCAB_SIZE = BYTE_OFFSET + 256

SPLIT_NAMES = ("train", "valid", "test")


@dataclass
class TokenizedSequence:
    """One classified input at fixed length with its special-token masks."""

    ids: np.ndarray                 # int64, shape (S,)
    attention_mask: np.ndarray      # bool, True for CLS/bytes/EOS
    code_token_mask: np.ndarray     # bool, True for byte positions only
    label: int | None = None
    text: str | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenizedSequence):
            return NotImplemented
        return (
            np.array_equal(self.ids, other.ids)
            and np.array_equal(self.attention_mask, other.attention_mask)
            and np.array_equal(self.code_token_mask, other.code_token_mask)
            and self.label == other.label
            and self.text == other.text
        )


def tokenize(text: str, max_seq: int, label: int | None = None) -> TokenizedSequence:
    """Byte-encode ``text`` into a fixed-length sequence.

    If the bytes do not fit alongside CLS and EOS, the byte tail is cut to
    ``max_seq - 1`` and no EOS is emitted.
    """
    raw = text.encode("utf-8")
    ids = np.full(max_seq, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    n = len(raw)
    if n > max_seq - 2:
        n = max_seq - 1
        body = np.frombuffer(raw[:n], dtype=np.uint8).astype(np.int64)
        ids[1 : 1 + n] = body + BYTE_OFFSET
        eos_pos = None
    else:
        if n:
            body = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
            ids[1 : 1 + n] = body + BYTE_OFFSET
        eos_pos = 1 + n
        ids[eos_pos] = EOS_ID
    attention = ids != PAD_ID
    code = np.zeros(max_seq, dtype=bool)
    code[1 : 1 + n] = True
    return TokenizedSequence(ids, attention, code, label=label, text=text)


@dataclass
class DatasetSplits:
    """Tokenized train/valid/test splits plus class bookkeeping."""

    train: list[TokenizedSequence]
    valid: list[TokenizedSequence]
    test: list[TokenizedSequence]
    num_classes: int
    class_counts: dict[str, list[int]] = field(default_factory=dict)

    def split(self, name: str) -> list[TokenizedSequence]:
        if name not in SPLIT_NAMES:
            raise InputError(f"unknown split {name!r}")
        return getattr(self, name)


def _count_classes(seqs: Sequence[TokenizedSequence], num_classes: int) -> list[int]:
    counts = [0] * num_classes
    for s in seqs:
        counts[s.label] += 1
    return counts


def _finish_splits(splits: dict[str, list[TokenizedSequence]]) -> DatasetSplits:
    labels = [s.label for name in SPLIT_NAMES for s in splits[name]]
    num_classes = max(labels) + 1
    present = set(labels)
    missing = sorted(set(range(num_classes)) - present)
    if missing:
        logger.warning("labels %s never occur; class count is %d", missing, num_classes)
    counts = {name: _count_classes(splits[name], num_classes) for name in SPLIT_NAMES}
    return DatasetSplits(
        train=splits["train"],
        valid=splits["valid"],
        test=splits["test"],
        num_classes=num_classes,
        class_counts=counts,
    )


def load_dataset(directory: str | Path, max_seq: int) -> DatasetSplits:
    """Read ``train/valid/test.jsonl`` files of ``{"text":..., "label":...}``.

    The class count is inferred from the training labels and every split is
    validated against it.
    """
    directory = Path(directory)
    splits: dict[str, list[TokenizedSequence]] = {}
    for name in SPLIT_NAMES:
        path = directory / f"{name}.jsonl"
        if not path.is_file():
            raise InputError(f"missing dataset file: {path}")
        seqs = []
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    text = rec["text"]
                    label = rec["label"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise InputError(f"{path}:{lineno}: malformed record ({exc})") from exc
                if not isinstance(text, str) or not isinstance(label, int) or label < 0:
                    raise InputError(
                        f"{path}:{lineno}: need a string 'text' and a non-negative "
                        f"integer 'label'"
                    )
                seqs.append(tokenize(text, max_seq, label=label))
        if not seqs:
            raise InputError(f"{path} holds no records")
        splits[name] = seqs
    num_classes = max(s.label for s in splits["train"]) + 1
    for name in ("valid", "test"):
        for s in splits[name]:
            if s.label >= num_classes:
                raise InputError(
                    f"label {s.label} in {name} split exceeds class count "
                    f"{num_classes} inferred from train"
                )
    return _finish_splits(splits)


def save_dataset(splits: DatasetSplits, directory: str | Path) -> None:
    """Write splits back to JSON-lines files (requires raw text present)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in SPLIT_NAMES:
        with (directory / f"{name}.jsonl").open("w", encoding="utf-8") as fh:
            for s in splits.split(name):
                if s.text is None:
                    raise InputError("cannot save a sequence without raw text")
                fh.write(json.dumps({"text": s.text, "label": s.label}) + "\n")


# ---------------------------------------------------------------------------
# synthetic tasks


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Which generator to run, split sizes, seed, and raw-length bound."""

    task: str                       # "paren3" | "swapbug2"
    sizes: tuple[int, int, int]     # train, valid, test
    seed: int
    max_chars: int = 48

    def __post_init__(self):
        if self.task not in ("paren3", "swapbug2"):
            raise InputError(f"unknown synthetic task {self.task!r}")
        if len(self.sizes) != 3:
            raise InputError("sizes must be (train, valid, test)")


_KEYWORDS = ("return", "while", "import", "lambda", "assert", "yield")
_LETTERS = "abcdefghijklmnopqrstuvwxyz"
_OPS = ("+", "-", "*", "/")


def _name(rng: np.random.Generator) -> str:
    head = _LETTERS[rng.integers(len(_LETTERS))]
    return head + str(rng.integers(10))


def _base_snippet(rng: np.random.Generator, max_chars: int) -> str:
    """A clean code-like line: one keyword, a few names, nested brackets."""
    kw = _KEYWORDS[rng.integers(len(_KEYWORDS))]
    a, b, c, d = (_name(rng) for _ in range(4))
    op1 = _OPS[rng.integers(len(_OPS))]
    op2 = _OPS[rng.integers(len(_OPS))]
    shapes = (
        f"{kw} {a}({b}, {c})",
        f"{kw} ({a} {op1} {b}) {op2} {c}",
        f"{kw} {a}[{b}] {op1} {c}({d})",
        f"{kw} {a}({b}) {op1} ({c} {op2} {d})",
    )
    text = shapes[rng.integers(len(shapes))]
    return text[:max_chars]


_BRACKETS = "()[]"


def _break_bracket(text: str, rng: np.random.Generator) -> str:
    spots = [i for i, ch in enumerate(text) if ch in _BRACKETS]
    i = spots[rng.integers(len(spots))]
    return text[:i] + text[i + 1 :]


def _break_indent(text: str, rng: np.random.Generator) -> str:
    pad = "".join(" \t"[rng.integers(2)] for _ in range(rng.integers(1, 4)))
    return pad + text


def _break_keyword(text: str, rng: np.random.Generator) -> str:
    kw = text.split(" ", 1)[0]
    i = int(rng.integers(1, len(kw)))
    return kw[:i] + kw[i + 1 :] + text[len(kw):]


_PAREN3_BREAKERS = (_break_bracket, _break_indent, _break_keyword)


def _gen_paren3(spec: SyntheticTaskSpec, max_seq: int) -> dict[str, list[TokenizedSequence]]:
    rng = np.random.default_rng([spec.seed, 101])
    seen: set[str] = set()
    splits: dict[str, list[TokenizedSequence]] = {}
    for name, size in zip(SPLIT_NAMES, spec.sizes):
        seqs = []
        for i in range(size):
            label = i % 3
            while True:
                text = _PAREN3_BREAKERS[label](_base_snippet(rng, spec.max_chars), rng)
                if text not in seen:
                    seen.add(text)
                    break
            seqs.append(tokenize(text, max_seq, label=label))
        order = rng.permutation(size)
        splits[name] = [seqs[j] for j in order]
    return splits


def _expression(rng: np.random.Generator, max_chars: int) -> tuple[str, list[str]]:
    """A parenthesised arithmetic expression over sorted distinct operands."""
    k = int(rng.integers(3, 6))
    names = sorted({_name(rng) for _ in range(k)})
    while len(names) < 3:
        names = sorted(set(names) | {_name(rng)})
    ops = [_OPS[rng.integers(len(_OPS))] for _ in range(len(names) - 1)]
    parts = [names[0]]
    for op, nm in zip(ops, names[1:]):
        parts += [f" {op} ", nm]
    if rng.random() < 0.5 and len(names) >= 3:
        # wrap one adjacent pair in parentheses
        j = int(rng.integers(len(names) - 1))
        parts[2 * j] = "(" + parts[2 * j]
        parts[2 * j + 2] = parts[2 * j + 2] + ")"
    text = "".join(parts)
    return text[:max_chars], names


def _swap_adjacent(text: str, operands: list[str], rng: np.random.Generator) -> str:
    j = int(rng.integers(len(operands) - 1))
    a, b = operands[j], operands[j + 1]
    ia = text.index(a)
    ib = text.index(b, ia + len(a))
    return text[:ia] + b + text[ia + len(a):ib] + a + text[ib + len(b):]


def expression_tokens(text: str) -> list[str] | None:
    """Parse an expression; operand list if well-formed, else None."""
    depth = 0
    token = ""
    out: list[str] = []
    expect_operand = True
    for ch in text + " ":
        if ch.isalnum():
            token += ch
            continue
        if token:
            if not expect_operand:
                return None
            out.append(token)
            token = ""
            expect_operand = False
        if ch == " ":
            continue
        if ch == "(":
            if not expect_operand:
                return None
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0 or expect_operand:
                return None
        elif ch in _OPS:
            if expect_operand:
                return None
            expect_operand = True
        else:
            return None
    if depth != 0 or expect_operand or not out:
        return None
    return out


def expression_label(text: str) -> int | None:
    """0 when the operands are strictly ascending, 1 when out of order."""
    ops = expression_tokens(text)
    if ops is None:
        return None
    return 0 if all(a < b for a, b in zip(ops, ops[1:])) else 1


def _gen_swapbug2(spec: SyntheticTaskSpec, max_seq: int) -> dict[str, list[TokenizedSequence]]:
    rng = np.random.default_rng([spec.seed, 202])
    seen: set[str] = set()
    splits: dict[str, list[TokenizedSequence]] = {}
    for name, size in zip(SPLIT_NAMES, spec.sizes):
        n_buggy = max(1, round(0.1 * size))
        seqs = []
        for i in range(size):
            label = 1 if i < n_buggy else 0
            while True:
                text, operands = _expression(rng, spec.max_chars)
                if label == 1:
                    text = _swap_adjacent(text, operands, rng)
                if text not in seen and expression_label(text) == label:
                    seen.add(text)
                    break
            seqs.append(tokenize(text, max_seq, label=label))
        order = rng.permutation(size)
        splits[name] = [seqs[j] for j in order]
    return splits


def gen_synthetic(spec: SyntheticTaskSpec, max_seq: int) -> DatasetSplits:
    """Generate a deterministic synthetic task; splits are disjoint by text."""
    num_classes = 3 if spec.task == "paren3" else 2
    for size in spec.sizes:
        if size < num_classes * 10:
            raise InputError(
                f"split size {size} too small for {spec.task} "
                f"(need at least {num_classes * 10})"
            )
    gen = _gen_paren3 if spec.task == "paren3" else _gen_swapbug2
    return _finish_splits(gen(spec, max_seq))


def gen_corpus(n: int, seed: int, max_chars: int = 48) -> list[str]:
    """Clean snippet lines for masked-token pretraining."""
    if n < 1:
        raise InputError("corpus size must be positive")
    rng = np.random.default_rng([seed, 303])
    lines = []
    for _ in range(n):
        if rng.random() < 0.3:
            lines.append(_expression(rng, max_chars)[0])
        else:
            lines.append(_base_snippet(rng, max_chars))
    return lines


# ---------------------------------------------------------------------------
# batching


def batch_iter(
    split: Sequence[TokenizedSequence],
    batch_size: int,
    seed: int,
    epoch: int,
) -> Iterator[list[TokenizedSequence]]:
    """Shuffled batches; order is a pure function of (seed, epoch).

    The final partial batch is kept.
    """
    if not split:
        raise InputError("cannot iterate an empty split")
    if batch_size < 1:
        raise InputError("batch size must be positive")
    rng = np.random.default_rng([seed, epoch, 404])
    order = rng.permutation(len(split))
    for start in range(0, len(split), batch_size):
        yield [split[int(j)] for j in order[start : start + batch_size]]
