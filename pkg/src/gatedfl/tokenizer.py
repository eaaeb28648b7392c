"""Character-level tokenizer with reserved special ids.

Layout of the id space::

    0            end-of-text (also used as BOS and padding)
    1            [MASK]
    2            unknown-key marker (out-of-registry key)
    3            unknown character
    4..98        printable ASCII 32..126
    99..vocab-1  key slots, only ever assigned by an organisation-local tokenizer

The public tokenizer never emits a key-slot id.
"""

from __future__ import annotations

EOT = 0
MASK = 1
UNKNOWN_KEY = 2
UNK = 3
FIRST_CHAR = 4
N_PRINTABLE = 95
FIRST_KEY_SLOT = FIRST_CHAR + N_PRINTABLE  # 99
N_RESERVED = FIRST_KEY_SLOT

MASK_TEXT = "[MASK]"


class CharTokenizer:
    """The public tokenizer: characters plus the atomic ``[MASK]`` token."""

    def __init__(self, vocab_size: int = 160):
        if vocab_size <= N_RESERVED:
            raise ValueError(f"vocab_size must exceed {N_RESERVED} reserved ids, got {vocab_size}")
        self.vocab_size = vocab_size

    @property
    def key_slots(self) -> range:
        return range(FIRST_KEY_SLOT, self.vocab_size)

    def encode(self, text: str) -> list[int]:
        ids = []
        i = 0
        while i < len(text):
            if text.startswith(MASK_TEXT, i):
                ids.append(MASK)
                i += len(MASK_TEXT)
                continue
            o = ord(text[i])
            ids.append(FIRST_CHAR + o - 32 if 32 <= o <= 126 else UNK)
            i += 1
        return ids

    def decode(self, ids) -> str:
        out = []
        for t in ids:
            t = int(t)
            if t == MASK:
                out.append(MASK_TEXT)
            elif FIRST_CHAR <= t < FIRST_KEY_SLOT:
                out.append(chr(t - FIRST_CHAR + 32))
            elif t == UNK:
                out.append("?")
            # EOT, the unknown-key marker and key slots render as nothing
        return "".join(out)

    def encode_doc(self, text: str) -> list[int]:
        """BOS + text + EOT, the unit every loss and perplexity is computed on."""
        return [EOT, *self.encode(text), EOT]

    def to_json(self) -> dict:
        vocab = {"<eot>": EOT, MASK_TEXT: MASK, "<unknown-key>": UNKNOWN_KEY, "<unk>": UNK}
        for c in range(32, 127):
            vocab[chr(c)] = FIRST_CHAR + c - 32
        return {"type": "char", "vocab_size": self.vocab_size, "vocab": vocab}
