"""Unified discrete token space shared by text, image codes, coordinate bins and tags."""

from __future__ import annotations

from dataclasses import dataclass, field

TEXT = "text"
IMAGE = "image"
BIN = "bin"
SPECIAL = "special"

SEGMENT_ORDER = (TEXT, IMAGE, BIN, SPECIAL)

BOI = "[BOI]"
BOT = "[BOT]"
EOC = "[EOC]"
C_ST = "<c_st>"
C_ED = "<c_ed>"
B_ST = "<b_st>"
B_ED = "<b_ed>"
PAD = "[PAD]"

DEFAULT_TAGS = (BOI, BOT, EOC, C_ST, C_ED, B_ST, B_ED, PAD)
NUM_BINS = 1001

_MANIFEST_HEADER = "unicl-vocab 1"


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Contiguous segments in the fixed order text, image, bin, special."""

    text_size: int
    image_code_count: int
    bin_count: int
    special_tags: tuple[str, ...]
    segment_offsets: dict[str, int] = field(compare=False, repr=False)

    @property
    def total_size(self) -> int:
        return self.text_size + self.image_code_count + self.bin_count + len(self.special_tags)

    def segment_size(self, kind: str) -> int:
        return {
            TEXT: self.text_size,
            IMAGE: self.image_code_count,
            BIN: self.bin_count,
            SPECIAL: len(self.special_tags),
        }[kind]

    def to_id(self, kind: str, local: int) -> int:
        if kind not in self.segment_offsets:
            raise VocabError(f"unknown segment {kind!r}")
        if not 0 <= local < self.segment_size(kind):
            raise VocabError(f"local index {local} out of range for segment {kind!r}")
        return self.segment_offsets[kind] + local

    def resolve(self, token_id: int) -> tuple[str, int]:
        return resolve(self, token_id)

    def tag(self, name: str) -> int:
        try:
            return self.segment_offsets[SPECIAL] + self.special_tags.index(name)
        except ValueError:
            raise VocabError(f"unknown tag {name!r}") from None

    def bin_id(self, index: int) -> int:
        return self.to_id(BIN, index)

    def image_id(self, code: int) -> int:
        return self.to_id(IMAGE, code)

    def text_id(self, local: int) -> int:
        return self.to_id(TEXT, local)

    def kind_of(self, token_id: int) -> str:
        return resolve(self, token_id)[0]

    def is_kind(self, token_id: int, kind: str) -> bool:
        start = self.segment_offsets[kind]
        return start <= token_id < start + self.segment_size(kind)

    def token_name(self, token_id: int) -> str:
        kind, local = resolve(self, token_id)
        if kind == SPECIAL:
            return self.special_tags[local]
        if kind == BIN:
            return f"<bin_{local}>"
        return f"{kind}:{local}"

    def to_text(self) -> str:
        lines = [_MANIFEST_HEADER]
        for kind in SEGMENT_ORDER:
            lines.append(f"segment {kind} {self.segment_offsets[kind]} {self.segment_size(kind)}")
        lines.extend(f"tag {name}" for name in self.special_tags)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        lines = text.splitlines()
        if not lines or lines[0] != _MANIFEST_HEADER:
            raise VocabError("not a vocabulary manifest")
        sizes: dict[str, int] = {}
        offsets: dict[str, int] = {}
        tags: list[str] = []
        for line in lines[1:]:
            head, _, rest = line.partition(" ")
            if head == "segment":
                kind, off, size = rest.split(" ")
                sizes[kind] = int(size)
                offsets[kind] = int(off)
            elif head == "tag":
                tags.append(rest)
            else:
                raise VocabError(f"bad manifest line {line!r}")
        vocab = build_vocabulary(sizes[TEXT], sizes[IMAGE], sizes[BIN], tags)
        if vocab.segment_offsets != offsets:
            raise VocabError("manifest offsets are not contiguous")
        return vocab


def build_vocabulary(
    text_size: int,
    image_code_count: int,
    bin_count: int = NUM_BINS,
    special_tags=DEFAULT_TAGS,
) -> Vocabulary:
    tags = tuple(special_tags)
    for name, count in (("text", text_size), ("image", image_code_count), ("bin", bin_count), ("tag", len(tags))):
        if count < 1:
            raise VocabError(f"{name} segment must hold at least one token, got {count}")
    if len(set(tags)) != len(tags):
        dupes = sorted({t for t in tags if tags.count(t) > 1})
        raise VocabError(f"duplicate special tags: {dupes}")
    for t in tags:
        if not t or any(c.isspace() for c in t):
            raise VocabError(f"tag names must be nonempty without whitespace: {t!r}")
    offsets = {}
    start = 0
    for kind, size in zip(SEGMENT_ORDER, (text_size, image_code_count, bin_count, len(tags))):
        offsets[kind] = start
        start += size
    return Vocabulary(text_size, image_code_count, bin_count, tags, offsets)


def resolve(v: Vocabulary, token_id: int) -> tuple[str, int]:
    """Map a global id back to its ``(segment, local index)`` pair."""
    token_id = int(token_id)
    if not 0 <= token_id < v.total_size:
        raise VocabError(f"token id {token_id} out of range [0, {v.total_size})")
    for kind in reversed(SEGMENT_ORDER):
        start = v.segment_offsets[kind]
        if token_id >= start:
            return kind, token_id - start
    raise AssertionError("unreachable")
