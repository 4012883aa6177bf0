"""Byte-level corpus handling: identity tokenizer, window sampler, and a
deterministic synthetic English corpus for self-contained runs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

VOCAB_SIZE = 256


def tokenize_bytes(path: str | Path) -> np.ndarray:
    """Identity byte mapping; vocab is the 256 byte values."""
    raw = Path(path).read_bytes()
    if not raw:
        raise ValueError(f"corpus file {path} is empty")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def encode_bytes(text: bytes) -> np.ndarray:
    return np.frombuffer(text, dtype=np.uint8).astype(np.int64)


def decode_bytes(ids: np.ndarray) -> bytes:
    return np.asarray(ids, dtype=np.uint8).tobytes()


def sample_batch(
    tokens: np.ndarray,
    context_length: int,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform random windows; targets are inputs shifted left by one.

    A window start s uses tokens[s : s + context_length + 1], so starts are
    drawn from [0, len - context_length - 1] and never cross the corpus end.
    """
    n = len(tokens)
    if n < context_length + 1:
        raise ValueError(
            f"corpus has {n} tokens, need at least context_length + 1 = {context_length + 1}"
        )
    starts = rng.integers(0, n - context_length, size=batch_size)
    inputs = np.stack([tokens[s:s + context_length] for s in starts])
    targets = np.stack([tokens[s + 1:s + context_length + 1] for s in starts])
    return inputs, targets


# --- synthetic corpus --------------------------------------------------------

_NOUNS = (
    "river time stone house garden wind light road mountain door bird tree "
    "morning shadow winter summer letter voice city bridge fire water paper "
    "horse window night field forest rain snow table ship captain island "
    "market street child mother father friend king story song year day"
).split()

_ADJECTIVES = (
    "old quiet long small bright dark cold warm green silent heavy light "
    "narrow wide young tired slow quick empty full strange familiar deep "
    "high distant near pale golden gray broken gentle"
).split()

_VERBS_PAST = (
    "crossed watched followed opened closed carried remembered found lost "
    "reached left built burned answered called waited turned climbed held "
    "covered filled passed touched moved"
).split()

_TEMPLATES = (
    "the {a} {n} {v} the {a2} {n2}.",
    "a {a} {n} {v} the {n2} before {n3}.",
    "in the {a} {n}, the {n2} {v} the {n3}.",
    "the {n} of the {a} {n2} {v} them.",
    "no {n} ever {v} that {a} {n2}.",
    "they say the {n} {v} a {a} {n2} near the {n3}.",
    "when the {n} {v} the {n2}, the {a} {n3} was gone.",
    "every {n} in the {a} {n2} {v} something.",
)


def generate_demo_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic English-like prose, exactly ``n_bytes`` long.

    Regular word-level statistics make it easy for a byte model to beat the
    uniform 8 bits/byte baseline quickly, which is all the sanity runs need.
    """
    rng = np.random.default_rng(seed)
    pieces: list[str] = []
    size = 0
    sentence_in_paragraph = 0
    while size < n_bytes:
        template = _TEMPLATES[rng.integers(len(_TEMPLATES))]
        sentence = template.format(
            n=_NOUNS[rng.integers(len(_NOUNS))],
            n2=_NOUNS[rng.integers(len(_NOUNS))],
            n3=_NOUNS[rng.integers(len(_NOUNS))],
            a=_ADJECTIVES[rng.integers(len(_ADJECTIVES))],
            a2=_ADJECTIVES[rng.integers(len(_ADJECTIVES))],
            v=_VERBS_PAST[rng.integers(len(_VERBS_PAST))],
        )
        sentence = sentence[0].upper() + sentence[1:]
        sentence_in_paragraph += 1
        if sentence_in_paragraph >= rng.integers(4, 9):
            sentence += "\n\n"
            sentence_in_paragraph = 0
        else:
            sentence += " "
        pieces.append(sentence)
        size += len(sentence)
    return "".join(pieces).encode("ascii")[:n_bytes]


def write_demo_corpus(path: str | Path, n_bytes: int, seed: int = 0) -> Path:
    path = Path(path)
    path.write_bytes(generate_demo_corpus(n_bytes, seed))
    return path
