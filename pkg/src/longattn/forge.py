"""Synthetic long-dependency training samples and passkey documents.

Every sample carries enough metadata for :func:`verify_sample` to confirm
its answer without a model.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from longattn.errors import (
    AmbiguityError,
    ConfigurationError,
    LengthError,
    MissingKeyError,
    NeighborRangeError,
    PermutationError,
    SpanError,
)

GAP = "⟨GAP⟩"
PARAGRAPH_SEP = "\n\n"
PASSKEY_TEMPLATE = "The hidden pass key is {passkey} . Remember it."
PASSKEY_QUERY = "What is the hidden pass key in the document?"
KINDS = ("fim", "keywordRetrieval", "positionRetrieval", "reorder", "passkey")

_WORDS = (
    "the of and to in is was for on that with as by at from his her they which "
    "river stone garden window market winter summer morning evening harbor valley "
    "letter journey village forest mountain bridge candle lantern kitchen orchard "
    "quiet bright narrow heavy gentle distant ancient silver golden crowded empty "
    "walked carried opened watched gathered followed painted counted built crossed "
    "slowly often never always later early together again almost perhaps"
).split()


@dataclass
class SyntheticSample:
    kind: str
    context: str
    query: str
    answer: str
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSample":
        return cls(d["kind"], d["context"], d["query"], d["answer"], d["meta"])


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def whitespace_tokens(text: str) -> list[str]:
    return text.split()


def make_fim(text: str, span: tuple[int, int]) -> SyntheticSample:
    start, end = span
    if not 0 <= start < end <= len(text):
        raise SpanError(f"span {span} invalid for text of length {len(text)}", field="span")
    if GAP in text:
        raise SpanError("text already contains the gap sentinel", field="text")
    prefix, middle, suffix = text[:start], text[start:end], text[end:]
    return SyntheticSample(
        "fim",
        prefix + GAP + suffix,
        "Fill in the text that replaces " + GAP + ".",
        middle,
        {"start": start, "end": end, "sha256": _digest(text)},
    )


def _check_paragraphs(paragraphs: Sequence[str]):
    for i, p in enumerate(paragraphs):
        if not p or PARAGRAPH_SEP in p or p != p.strip("\n"):
            raise ConfigurationError(
                f"paragraph {i} is empty or contains the paragraph separator", field="paragraphs"
            )


def make_retrieval(paragraphs: Sequence[str], kind: str, key) -> SyntheticSample:
    """Keyword (``kind="keyword"``) or neighbour (``"before"``/``"after"``) retrieval."""
    paragraphs = list(paragraphs)
    _check_paragraphs(paragraphs)
    context = PARAGRAPH_SEP.join(paragraphs)
    if kind == "keyword":
        hits = [i for i, p in enumerate(paragraphs) if key in p]
        if not hits:
            raise MissingKeyError(f"keyword {key!r} occurs in no paragraph", field="key")
        if len(hits) > 1:
            raise AmbiguityError(f"keyword {key!r} occurs in paragraphs {hits}", field="key")
        index = hits[0]
        query = f'Retrieve the paragraph that contains the keyword "{key}".'
        return SyntheticSample(
            "keywordRetrieval", context, query, paragraphs[index], {"index": index, "key": key}
        )
    if kind not in ("before", "after"):
        raise ConfigurationError(f"unknown retrieval kind {kind!r}", field="kind")
    key = int(key)
    if not 0 <= key < len(paragraphs):
        raise NeighborRangeError(f"paragraph index {key} out of range", field="key")
    index = key - 1 if kind == "before" else key + 1
    if not 0 <= index < len(paragraphs):
        raise NeighborRangeError(f"paragraph {key} has no neighbour {kind} it", field="key")
    query = (
        f"Retrieve the paragraph that appears immediately {kind} paragraph {key} (counting from 0)."
    )
    return SyntheticSample(
        "positionRetrieval",
        context,
        query,
        paragraphs[index],
        {"index": index, "key": key, "direction": kind},
    )


def _check_permutation(permutation: Sequence[int], n: int) -> list[int]:
    perm = [int(p) for p in permutation]
    if len(perm) != n or sorted(perm) != list(range(n)):
        raise PermutationError(f"{perm} is not a permutation of 0..{n - 1}", field="permutation")
    return perm


def inverse_permutation(perm: Sequence[int]) -> list[int]:
    inv = [0] * len(perm)
    for k, p in enumerate(perm):
        inv[p] = k
    return inv


def make_reorder(paragraphs: Sequence[str], permutation: Sequence[int]) -> SyntheticSample:
    """Shuffle so that slot ``k`` holds ``paragraphs[permutation[k]]``.

    The answer lists, for each original paragraph, its slot in the shuffled
    context.
    """
    paragraphs = list(paragraphs)
    _check_paragraphs(paragraphs)
    perm = _check_permutation(permutation, len(paragraphs))
    shuffled = [paragraphs[p] for p in perm]
    inv = inverse_permutation(perm)
    return SyntheticSample(
        "reorder",
        PARAGRAPH_SEP.join(shuffled),
        "The paragraphs above are shuffled. List, in original order, the position of each.",
        ",".join(str(i) for i in inv),
        {"permutation": perm, "sha256": _digest(PARAGRAPH_SEP.join(paragraphs))},
    )


def apply_reorder_answer(shuffled: Sequence[str], answer: str) -> list[str]:
    slots = [int(x) for x in answer.split(",")] if answer else []
    return [shuffled[s] for s in slots]


def make_passkey(
    target_len: int,
    depth: float,
    passkey: str,
    filler: Sequence[str],
    tokenize: Callable[[str], list[str]] = whitespace_tokens,
) -> SyntheticSample:
    """Filler document of ``target_len`` tokens with one carrier sentence at ``depth``.

    Filler sentences that contain the passkey are skipped so the key occurs
    exactly once.
    """
    if not passkey.isdigit():
        raise ConfigurationError("passkey must be a digit string", field="passkey")
    if not 0.0 <= depth <= 1.0:
        raise ConfigurationError(f"depth {depth} outside [0, 1]", field="depth")
    carrier = tokenize(PASSKEY_TEMPLATE.format(passkey=passkey))
    if target_len < len(carrier):
        raise LengthError(
            f"target length {target_len} cannot hold the {len(carrier)}-token carrier",
            field="targetLen",
        )
    usable = [tokenize(s) for s in filler if passkey not in s]
    usable = [t for t in usable if t]
    n_filler = target_len - len(carrier)
    if n_filler and not usable:
        raise ConfigurationError("filler has no sentence free of the passkey", field="filler")
    stream: list[str] = []
    while len(stream) < n_filler:
        for toks in usable:
            stream.extend(toks)
    stream = stream[:n_filler]
    offset = int(round(depth * n_filler))
    words = stream[:offset] + carrier + stream[offset:]
    context = " ".join(words)
    if context.count(passkey) != 1:
        raise ConfigurationError("passkey collides with filler text", field="filler")
    return SyntheticSample(
        "passkey",
        context,
        PASSKEY_QUERY,
        passkey,
        {
            "depth": depth,
            "targetLen": target_len,
            "tokenOffset": offset,
            "carrierLen": len(carrier),
        },
    )


def _verify_fim(s: SyntheticSample) -> bool:
    start, end = s.meta["start"], s.meta["end"]
    if len(s.answer) != end - start or s.context[start : start + len(GAP)] != GAP:
        return False
    text = s.context[:start] + s.answer + s.context[start + len(GAP) :]
    return _digest(text) == s.meta["sha256"]


def _verify_retrieval(s: SyntheticSample) -> bool:
    paragraphs = s.context.split(PARAGRAPH_SEP)
    index = s.meta["index"]
    if not 0 <= index < len(paragraphs) or paragraphs[index] != s.answer:
        return False
    if s.kind == "keywordRetrieval":
        return [i for i, p in enumerate(paragraphs) if s.meta["key"] in p] == [index]
    step = -1 if s.meta["direction"] == "before" else 1
    return index == s.meta["key"] + step


def _verify_reorder(s: SyntheticSample) -> bool:
    shuffled = s.context.split(PARAGRAPH_SEP)
    perm = s.meta["permutation"]
    slots = [int(x) for x in s.answer.split(",")]
    if sorted(slots) != list(range(len(shuffled))) or slots != inverse_permutation(perm):
        return False
    restored = apply_reorder_answer(shuffled, s.answer)
    return _digest(PARAGRAPH_SEP.join(restored)) == s.meta["sha256"]


def _verify_passkey(s: SyntheticSample, tol: float = 0.02) -> bool:
    tokens = s.context.split()
    target = s.meta["targetLen"]
    carrier = PASSKEY_TEMPLATE.format(passkey=s.answer).split()
    if abs(len(tokens) - target) > tol * target or s.context.count(s.answer) != 1:
        return False
    offset = next((i for i in range(len(tokens)) if tokens[i : i + len(carrier)] == carrier), None)
    if offset is None:
        return False
    expected = int(round(s.meta["depth"] * (len(tokens) - len(carrier))))
    return offset == s.meta["tokenOffset"] == expected


_VERIFIERS = {
    "fim": _verify_fim,
    "keywordRetrieval": _verify_retrieval,
    "positionRetrieval": _verify_retrieval,
    "reorder": _verify_reorder,
    "passkey": _verify_passkey,
}


def verify_sample(sample: SyntheticSample) -> bool:
    """Check the answer from context and metadata alone."""
    try:
        return _VERIFIERS[sample.kind](sample)
    except (KeyError, ValueError, TypeError, IndexError):
        return False


def emit_jsonl(samples: Iterable[SyntheticSample], path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")
            count += 1
    return count


def read_jsonl(path) -> list[SyntheticSample]:
    with open(path, encoding="utf-8") as fh:
        return [SyntheticSample.from_dict(json.loads(line)) for line in fh if line.strip()]


def mix_lengths(
    max_len: int,
    count: int,
    rng: np.random.Generator,
    long_fraction: float = 0.75,
    min_len: int = 1,
) -> list[int]:
    """Target lengths: ``long_fraction`` at ``max_len``, the rest uniformly shorter."""
    if not 0 <= long_fraction <= 1:
        raise ConfigurationError("longFraction must lie in [0, 1]", field="longFraction")
    n_long = int(round(long_fraction * count))
    short_hi = max(min_len, max_len - 1)
    lengths = [max_len] * n_long + [
        int(x) for x in rng.integers(min_len, short_hi + 1, size=count - n_long)
    ]
    return [lengths[i] for i in rng.permutation(count)]


def filler_sentences(rng: np.random.Generator, count: int, words: int = 12) -> list[str]:
    out = []
    for _ in range(count):
        toks = [_WORDS[i] for i in rng.integers(0, len(_WORDS), size=words)]
        out.append(" ".join(toks).capitalize() + " .")
    return out


def _paragraphs(rng: np.random.Generator, count: int, sentences: int = 3) -> list[str]:
    return [" ".join(filler_sentences(rng, sentences)) for _ in range(count)]


def random_sample(
    kind: str, rng: np.random.Generator, *, target_len: int = 1000
) -> SyntheticSample:
    """One sample of ``kind`` built from seeded pseudo-text."""
    if kind == "fim":
        text = " ".join(filler_sentences(rng, int(rng.integers(4, 20))))
        a, b = sorted(int(x) for x in rng.choice(len(text) + 1, size=2, replace=False))
        return make_fim(text, (a, b))
    if kind == "keywordRetrieval":
        paras = _paragraphs(rng, int(rng.integers(3, 16)))
        index = int(rng.integers(len(paras)))
        key = f"kw{int(rng.integers(10**6, 10**7))}"
        paras[index] = paras[index] + f" The keyword is {key} ."
        return make_retrieval(paras, "keyword", key)
    if kind == "positionRetrieval":
        paras = _paragraphs(rng, int(rng.integers(3, 16)))
        direction = "before" if rng.random() < 0.5 else "after"
        lo, hi = (1, len(paras)) if direction == "before" else (0, len(paras) - 1)
        return make_retrieval(paras, direction, int(rng.integers(lo, hi)))
    if kind == "reorder":
        paras = _paragraphs(rng, int(rng.integers(2, 21)))
        return make_reorder(paras, [int(p) for p in rng.permutation(len(paras))])
    if kind == "passkey":
        passkey = str(int(rng.integers(10**4, 10**5)))
        depth = float(rng.choice([0.0, 0.25, 0.5, 0.75, 1.0]))
        return make_passkey(target_len, depth, passkey, filler_sentences(rng, 64))
    raise ConfigurationError(f"unknown sample kind {kind!r}", field="kinds")


def forge_corpus(
    count: int,
    seed: int,
    kinds: Sequence[str] = KINDS,
    *,
    max_len: int = 1000,
    long_fraction: float = 0.75,
) -> list[SyntheticSample]:
    """Deterministic mixed corpus; passkey lengths follow :func:`mix_lengths`."""
    rng = np.random.default_rng(seed)
    lengths = mix_lengths(max_len, count, rng, long_fraction, min_len=max(16, max_len // 4))
    return [random_sample(kinds[i % len(kinds)], rng, target_len=lengths[i]) for i in range(count)]
