"""Synthetic heterogeneous parallel domains, vocabulary, splits, and bitext ingestion."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
N_RESERVED = 4

# 40 content symbols; with the four reserved ids the default vocabulary has 44 entries.
CONTENT_SYMBOLS = tuple("abcdefghijklmnopqrstuvwxyz0123456789") + (".", ",", "?", "!")

DEFAULT_MAX_LEN = 16

DOMAIN_KINDS = ("copy", "reverse", "sort", "shift3", "swap_pairs")


class Vocab:
    """Fixed symbol inventory with reserved PAD/BOS/EOS/UNK ids."""

    def __init__(self, symbols: tuple[str, ...] = CONTENT_SYMBOLS):
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate symbols in vocabulary")
        self.symbols = tuple(symbols)
        self._to_id = {s: i + N_RESERVED for i, s in enumerate(self.symbols)}

    @property
    def size(self) -> int:
        return N_RESERVED + len(self.symbols)

    def token_id(self, token: str) -> int:
        return self._to_id.get(token, UNK_ID)

    def encode(self, tokens: list[str]) -> tuple[int, ...]:
        return tuple(self.token_id(t) for t in tokens)

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            if N_RESERVED <= i < self.size:
                out.append(self.symbols[i - N_RESERVED])
            else:
                out.append(f"<{i}>")
        return out


def default_vocab() -> Vocab:
    return Vocab()


@dataclass(frozen=True)
class DomainSpec:
    kind: str
    size: int
    seed: int

    def __post_init__(self) -> None:
        if self.kind not in DOMAIN_KINDS:
            raise ValueError(f"unknown domain kind '{self.kind}' (choices: {DOMAIN_KINDS})")
        if self.size < 30:
            raise ValueError(f"domain size must be >= 30, got {self.size}")
        if self.seed < 0:
            raise ValueError("domain seed must be non-negative")


@dataclass(frozen=True)
class Corpus:
    domain: str
    pairs: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]

    def __post_init__(self) -> None:
        if not self.pairs:
            raise ValueError(f"corpus '{self.domain}' is empty")
        for src, tgt in self.pairs:
            if not src or not tgt:
                raise ValueError(f"corpus '{self.domain}' contains an empty sequence")

    @property
    def n_k(self) -> int:
        return len(self.pairs)


def _transform(kind: str, src: tuple[int, ...], n_content: int) -> tuple[int, ...]:
    if kind == "copy":
        return src
    if kind == "reverse":
        return tuple(reversed(src))
    if kind == "sort":
        return tuple(sorted(src))
    if kind == "shift3":
        return tuple((i - N_RESERVED + 3) % n_content + N_RESERVED for i in src)
    if kind == "swap_pairs":
        out = list(src)
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return tuple(out)
    raise ValueError(f"unknown domain kind '{kind}'")


# Fraction of source tokens drawn from the shared symbol pool instead of the
# domain's own band.  Specialist domains stay identifiable from their band
# symbols while the shared symbols receive conflicting treatment across
# domains, the way real domains share vocabulary but use it differently.
SHARED_TOKEN_RATE = 0.25

# The copy domain is the broad-coverage generalist (the largest corpus and the
# pretraining source): its band spans the whole inventory, the way a general
# domain's vocabulary covers the specialist domains'.
GENERALIST_KIND = "copy"


def domain_band(kind: str, n_content: int = len(CONTENT_SYMBOLS)) -> tuple[int, int]:
    """Half-open source-symbol id range [lo, hi) owned by one domain kind.

    The generalist kind spans the full inventory; each specialist kind owns a
    narrow slice, with a trailing pool (`shared_pool`) common to all."""
    if kind == GENERALIST_KIND:
        return N_RESERVED, N_RESERVED + n_content
    specialists = [k for k in DOMAIN_KINDS if k != GENERALIST_KIND]
    width = n_content // (len(specialists) + 2)
    lo = N_RESERVED + specialists.index(kind) * width
    return lo, lo + width


def shared_pool(n_content: int = len(CONTENT_SYMBOLS)) -> tuple[int, int]:
    specialists = len(DOMAIN_KINDS) - 1
    width = n_content // (specialists + 2)
    return N_RESERVED + specialists * width, N_RESERVED + n_content


def generate_domain(
    spec: DomainSpec, max_len: int = DEFAULT_MAX_LEN, vocab: Vocab | None = None
) -> Corpus:
    """Deterministically generate `spec.size` pairs for one synthetic domain.

    Sources mix the domain's own band symbols with shared-pool symbols, with
    length uniform in [3, max_len - 2]; the target is the kind-specific
    transform of the source.
    """
    vocab = vocab or default_vocab()
    n_content = len(vocab.symbols)
    lo, hi = domain_band(spec.kind, n_content)
    pool_lo, pool_hi = shared_pool(n_content)
    rng = np.random.default_rng(spec.seed)
    pairs = []
    for _ in range(spec.size):
        length = int(rng.integers(3, max_len - 1))
        if spec.kind == GENERALIST_KIND:
            src = tuple(int(x) for x in rng.integers(lo, hi, size=length))
        else:
            own = rng.integers(lo, hi, size=length)
            pooled = rng.integers(pool_lo, pool_hi, size=length)
            use_pool = rng.random(length) < SHARED_TOKEN_RATE
            src = tuple(int(x) for x in np.where(use_pool, pooled, own))
        pairs.append((src, _transform(spec.kind, src, n_content)))
    return Corpus(domain=spec.kind, pairs=tuple(pairs))


def split(corpus: Corpus, test_n: int, dev_n: int, seed) -> tuple[Corpus, Corpus, Corpus]:
    """Seeded disjoint (train, dev, test) split with exact sizes."""
    if test_n < 1 or dev_n < 1:
        raise ValueError("test_n and dev_n must be >= 1")
    if test_n + dev_n >= corpus.n_k:
        raise ValueError(
            f"cannot split corpus '{corpus.domain}' of {corpus.n_k} pairs into "
            f"test={test_n} + dev={dev_n} with a non-empty train set"
        )
    perm = np.random.default_rng(seed).permutation(corpus.n_k)
    test = tuple(corpus.pairs[i] for i in perm[:test_n])
    dev = tuple(corpus.pairs[i] for i in perm[test_n : test_n + dev_n])
    train = tuple(corpus.pairs[i] for i in perm[test_n + dev_n :])
    mk = lambda pairs: replace(corpus, pairs=pairs)
    return mk(train), mk(dev), mk(test)


def load_parallel_files(
    source_path,
    target_path,
    domain: str,
    vocab: Vocab,
    max_len: int = DEFAULT_MAX_LEN,
) -> Corpus:
    """Load aligned plain-text files (one sentence per line, whitespace tokens).

    Unknown symbols map to UNK; lines longer than max_len - 2 tokens are
    truncated; pairs with an empty side are dropped.
    """
    src_lines = Path(source_path).read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(target_path).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise ValueError(f"line counts {len(src_lines)} != {len(tgt_lines)}")
    limit = max_len - 2
    pairs = []
    for src_line, tgt_line in zip(src_lines, tgt_lines):
        src_tokens = src_line.split()
        tgt_tokens = tgt_line.split()
        if not src_tokens or not tgt_tokens:
            continue
        pairs.append((vocab.encode(src_tokens[:limit]), vocab.encode(tgt_tokens[:limit])))
    return Corpus(domain=domain, pairs=tuple(pairs))


def concatenate(corpora: list[Corpus], domain: str = "combined") -> Corpus:
    if not corpora:
        raise ValueError("no corpora to concatenate")
    pairs = []
    for c in corpora:
        pairs.extend(c.pairs)
    return Corpus(domain=domain, pairs=tuple(pairs))
