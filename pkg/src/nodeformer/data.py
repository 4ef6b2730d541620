"""Exhaustive parity dataset over binary strings of bounded length.

Labels: a string is "odd" iff it contains an odd number of 1s, so flipping
any single bit flips the label. The training collection holds every binary
string of length 1..max_len exactly once, each with an SOS token prepended,
grouped into same-length buckets (one bucket is one training batch).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .autodiff import ContractError
from .model import TOKEN_SOS

LABEL_EVEN = 0
LABEL_ODD = 1
LABEL_NAMES = ("even", "odd")

MAX_SUPPORTED_LEN = 20


def parity_oracle(bits: Sequence[int]) -> int:
    """LABEL_ODD iff the number of 1s is odd. Empty input is an error."""
    if len(bits) == 0:
        raise ContractError("parity is undefined for the empty string")
    acc = 0
    for b in bits:
        if b not in (0, 1):
            raise ContractError(f"bits must be 0 or 1, got {b!r}")
        acc ^= b
    return acc


@dataclass
class ParityDataset:
    max_len: int
    items: list[tuple[tuple[int, ...], int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def buckets(self) -> dict[int, tuple[list[tuple[int, ...]], list[int]]]:
        """Group items by bit length: {length: (token lists, labels)}."""
        out: dict[int, tuple[list[tuple[int, ...]], list[int]]] = {}
        for tokens, label in self.items:
            bucket = out.setdefault(len(tokens) - 1, ([], []))
            bucket[0].append(tokens)
            bucket[1].append(label)
        return out


def gen_dataset(max_len: int) -> ParityDataset:
    """Every binary string of length 1..max_len, SOS-prefixed and labeled."""
    if not (1 <= max_len <= MAX_SUPPORTED_LEN):
        raise ValueError(f"max_len must be in 1..{MAX_SUPPORTED_LEN}, got {max_len}")
    items = []
    for length in range(1, max_len + 1):
        for bits in itertools.product((0, 1), repeat=length):
            items.append(((TOKEN_SOS,) + bits, parity_oracle(bits)))
    return ParityDataset(max_len=max_len, items=items)


def bits_to_tokens(bits: Iterable[int]) -> tuple[int, ...]:
    return (TOKEN_SOS,) + tuple(int(b) for b in bits)


def write_dataset(ds: ParityDataset, path: str | Path) -> None:
    """One `<bits> <label>` line per item, length-major lexicographic order."""
    lines = []
    for tokens, label in ds.items:
        bits = "".join(str(b) for b in tokens[1:])
        lines.append(f"{bits} {LABEL_NAMES[label]}\n")
    Path(path).write_text("".join(lines))


def read_dataset(path: str | Path) -> ParityDataset:
    items = []
    max_len = 0
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            bits_str, label_str = line.split()
            bits = tuple(int(ch) for ch in bits_str)
            label = LABEL_NAMES.index(label_str)
        except (ValueError, IndexError) as e:
            raise ValueError(f"{path}:{lineno}: malformed dataset line {line!r}") from e
        items.append((bits_to_tokens(bits), label))
        max_len = max(max_len, len(bits))
    return ParityDataset(max_len=max_len, items=items)
