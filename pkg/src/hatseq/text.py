"""Text preprocessing: sentence segmentation, BOS insertion, segment ids,
document chunking, vocabulary induction, and batching.

Tokenization is plain whitespace splitting over pre-tokenized text; a
subword front-end can be swapped in later since every encoder here
accepts token lists.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"

_SPECIALS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)

_TERMINATORS = ".!?"


def tokenize(text: str) -> list[str]:
    return text.split()


class Vocabulary:
    """Token/id bijection with reserved ids 0..3 for PAD, BOS, EOS, UNK."""

    def __init__(self, tokens: list[str]):
        self.id_to_token = list(_SPECIALS) + list(tokens)
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens: list[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(tok, UNK_ID) for tok in tokens]

    def decode(self, ids, skip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            if skip_special and i < len(_SPECIALS):
                continue
            out.append(self.id_to_token[i])
        return out

    def save(self, path) -> None:
        # One corpus token per line; line number = id - 4.
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.id_to_token[len(_SPECIALS):]:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(tokens)


def build_vocab(texts, max_size: int = 32000, min_freq: int = 1) -> Vocabulary:
    """Frequency-ranked word vocabulary; ties broken lexicographically.

    ``max_size`` caps the total size including the four reserved ids.
    Tokens below ``min_freq`` (and any literal special markers) are left
    out and map to UNK at encode time.
    """
    counts: Counter[str] = Counter()
    n_texts = 0
    for text in texts:
        n_texts += 1
        counts.update(tokenize(text))
    if n_texts == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    for special in _SPECIALS:
        counts.pop(special, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    budget = max(0, max_size - len(_SPECIALS))
    kept = [tok for tok, c in ranked if c >= min_freq][:budget]
    return Vocabulary(kept)


def segment_sentences(text: str) -> list[str]:
    """Split on '.', '!' or '?' runs followed by whitespace or end of text.

    Terminators stay attached to their sentence, so joining the pieces
    with single spaces reproduces the (whitespace-normalized) input.
    """
    sentences: list[str] = []
    start = 0
    i = 0
    n = len(text)
    while i < n:
        if text[i] in _TERMINATORS:
            j = i + 1
            while j < n and text[j] in _TERMINATORS:
                j += 1
            if j >= n or text[j].isspace():
                piece = text[start:j].strip()
                if piece:
                    sentences.append(piece)
                start = j
            i = j
        else:
            i += 1
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


@dataclass
class EncodedExample:
    """Model-ready source/target ids with BOS markers and segment labels."""

    source_ids: np.ndarray      # int64 [src_len]
    bos_positions: np.ndarray   # sorted indices into source_ids
    segment_ids: np.ndarray     # int64 [src_len]
    target_ids: np.ndarray      # int64 [tgt_len], ends with EOS
    doc: int | None = None      # original document index for chunked datasets

    def __post_init__(self):
        self.source_ids = np.asarray(self.source_ids, dtype=np.int64)
        self.bos_positions = np.asarray(self.bos_positions, dtype=np.int64)
        self.segment_ids = np.asarray(self.segment_ids, dtype=np.int64)
        self.target_ids = np.asarray(self.target_ids, dtype=np.int64)

    def validate(self) -> None:
        if len(self.segment_ids) != len(self.source_ids):
            raise ValueError("segment_ids and source_ids lengths differ")
        if len(self.source_ids) and len(self.bos_positions) == 0:
            raise ValueError("non-empty source has no BOS positions")
        if np.any(np.diff(self.bos_positions) <= 0):
            raise ValueError("bos_positions must be strictly increasing")
        if np.any(self.source_ids[self.bos_positions] != BOS_ID):
            raise ValueError("bos_positions must address BOS tokens")
        if len(self.target_ids) and self.target_ids[-1] != EOS_ID:
            raise ValueError("target_ids must end with EOS")


def encode_document(sentences: list[str], vocab: Vocabulary,
                    max_source_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """BOS-prefix every sentence and concatenate, truncating to the limit.

    Returns (source_ids, bos_positions, segment_ids); segment ids are all
    zero for plain documents.  Truncation never leaves a trailing BOS with
    no content after it.
    """
    if not sentences:
        raise ValueError("encode_document needs at least one sentence")
    ids: list[int] = []
    bos: list[int] = []
    for sent in sentences:
        bos.append(len(ids))
        ids.append(BOS_ID)
        ids.extend(vocab.encode(tokenize(sent)))
    ids = ids[:max_source_len]
    bos = [p for p in bos if p < len(ids)]
    if bos and bos[-1] == len(ids) - 1:
        # contentless sentence slot after truncation: drop the dangling BOS
        ids = ids[:-1]
        bos = bos[:-1]
    if not ids:
        raise ValueError(f"max_source_len={max_source_len} leaves no tokens")
    return (np.array(ids, dtype=np.int64),
            np.array(bos, dtype=np.int64),
            np.zeros(len(ids), dtype=np.int64))


def encode_conversation(turns: list[tuple[str, str]], vocab: Vocabulary,
                        max_segments: int = 16,
                        max_source_len: int | None = None,
                        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Encode speaker turns as BOS + role + utterance with per-role segments.

    Roles get segment ids in order of first appearance; every token of a
    turn (including its BOS) carries the turn's segment id.
    """
    if not turns:
        raise ValueError("encode_conversation needs at least one turn")
    role_to_segment: dict[str, int] = {}
    ids: list[int] = []
    bos: list[int] = []
    segments: list[int] = []
    for role, utterance in turns:
        if not role:
            raise ValueError("speaker role must be a non-empty string")
        if role not in role_to_segment:
            if len(role_to_segment) >= max_segments:
                raise ValueError(
                    f"more than {max_segments} distinct roles in conversation"
                )
            role_to_segment[role] = len(role_to_segment)
        seg = role_to_segment[role]
        turn_tokens = [BOS_ID] + vocab.encode(tokenize(role) + tokenize(utterance))
        bos.append(len(ids))
        ids.extend(turn_tokens)
        segments.extend([seg] * len(turn_tokens))
    if max_source_len is not None:
        ids = ids[:max_source_len]
        segments = segments[:max_source_len]
        bos = [p for p in bos if p < len(ids)]
        if bos and bos[-1] == len(ids) - 1:
            ids = ids[:-1]
            segments = segments[:-1]
            bos = bos[:-1]
    return (np.array(ids, dtype=np.int64),
            np.array(bos, dtype=np.int64),
            np.array(segments, dtype=np.int64))


def encode_target(text: str, vocab: Vocabulary, max_target_len: int) -> np.ndarray:
    tokens = vocab.encode(tokenize(text))
    tokens = tokens[:max(1, max_target_len) - 1]
    return np.array(tokens + [EOS_ID], dtype=np.int64)


def chunk_document(segments: list[tuple[list[str], list[str]]],
                   max_tokens: int = 512) -> list[list[int]]:
    """Greedily pack aligned (source, target) segments into chunks.

    Splits happen only at segment boundaries; the source-side token count
    of a chunk never exceeds ``max_tokens``.  Returns chunks as lists of
    segment indices, in document order.
    """
    chunks: list[list[int]] = []
    current: list[int] = []
    used = 0
    for idx, (src, _tgt) in enumerate(segments):
        n = len(src)
        if n > max_tokens:
            raise ValueError(
                f"segment {idx} has {n} source tokens, over the {max_tokens} limit"
            )
        if current and used + n > max_tokens:
            chunks.append(current)
            current = []
            used = 0
        current.append(idx)
        used += n
    if current:
        chunks.append(current)
    return chunks


@dataclass
class Batch:
    """Padded matrices plus the masks that recover the real tokens."""

    source: np.ndarray        # int64 [batch, max_src]
    target: np.ndarray        # int64 [batch, max_tgt]
    source_mask: np.ndarray   # bool, true at non-PAD source positions
    bos_mask: np.ndarray      # bool, true exactly at BOS source positions
    segments: np.ndarray      # int64 [batch, max_src]
    examples: list[EncodedExample] = field(default_factory=list)

    def __len__(self) -> int:
        return self.source.shape[0]


def collate(examples: list[EncodedExample], pad_id: int = PAD_ID) -> Batch:
    if not examples:
        raise ValueError("cannot collate an empty batch")
    max_src = max(len(ex.source_ids) for ex in examples)
    max_tgt = max(len(ex.target_ids) for ex in examples)
    n = len(examples)
    source = np.full((n, max_src), pad_id, dtype=np.int64)
    target = np.full((n, max_tgt), pad_id, dtype=np.int64)
    source_mask = np.zeros((n, max_src), dtype=bool)
    bos_mask = np.zeros((n, max_src), dtype=bool)
    segments = np.zeros((n, max_src), dtype=np.int64)
    for i, ex in enumerate(examples):
        s, t = len(ex.source_ids), len(ex.target_ids)
        source[i, :s] = ex.source_ids
        target[i, :t] = ex.target_ids
        source_mask[i, :s] = True
        bos_mask[i, ex.bos_positions] = True
        segments[i, :s] = ex.segment_ids
    return Batch(source, target, source_mask, bos_mask, segments, list(examples))


# -- dataset ingestion ---------------------------------------------------------


def iter_jsonl(path):
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({e})") from e


def record_texts(record: dict, mode: str) -> list[str]:
    """All raw text carried by one dataset record, for vocabulary induction."""
    if mode == "document":
        return [record["source"], record["target"]]
    if mode == "conversation":
        texts = [f"{t['role']} {t['text']}" for t in record["turns"]]
        return texts + [record["target"]]
    if mode == "mt":
        return [s["src"] for s in record["segments"]] + [s["tgt"] for s in record["segments"]]
    raise ValueError(f"unknown dataset mode: {mode!r}")


def encode_record(record: dict, mode: str, vocab: Vocabulary, *,
                  max_source_len: int = 3072, max_target_len: int = 512,
                  chunk_tokens: int = 512, max_segments: int = 16,
                  doc: int | None = None) -> list[EncodedExample]:
    """Turn one JSONL record into one or more encoded examples.

    Record shapes:
      document:     {"source": str, "target": str}
      conversation: {"turns": [{"role": str, "text": str}], "target": str}
      mt:           {"segments": [{"src": str, "tgt": str}]}
    """
    if mode == "document":
        sentences = segment_sentences(record["source"])
        src, bos, seg = encode_document(sentences, vocab, max_source_len)
        tgt = encode_target(record["target"], vocab, max_target_len)
        return [EncodedExample(src, bos, seg, tgt, doc=doc)]
    if mode == "conversation":
        turns = [(t["role"], t["text"]) for t in record["turns"]]
        src, bos, seg = encode_conversation(turns, vocab, max_segments, max_source_len)
        tgt = encode_target(record["target"], vocab, max_target_len)
        return [EncodedExample(src, bos, seg, tgt, doc=doc)]
    if mode == "mt":
        pairs = [(tokenize(s["src"]), tokenize(s["tgt"])) for s in record["segments"]]
        out = []
        for chunk in chunk_document(pairs, chunk_tokens):
            src: list[int] = []
            bos: list[int] = []
            tgt: list[int] = []
            for idx in chunk:
                bos.append(len(src))
                src.append(BOS_ID)
                src.extend(vocab.encode(pairs[idx][0]))
                tgt.extend(vocab.encode(pairs[idx][1]))
            out.append(EncodedExample(
                np.array(src, dtype=np.int64),
                np.array(bos, dtype=np.int64),
                np.zeros(len(src), dtype=np.int64),
                np.array(tgt[:max(1, max_target_len) - 1] + [EOS_ID], dtype=np.int64),
                doc=doc,
            ))
        return out
    raise ValueError(f"unknown dataset mode: {mode!r}")


def load_dataset(path, mode: str, vocab: Vocabulary, **limits) -> list[EncodedExample]:
    examples: list[EncodedExample] = []
    for doc, (lineno, record) in enumerate(iter_jsonl(path)):
        try:
            examples.extend(encode_record(record, mode, vocab, doc=doc, **limits))
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"{path}:{lineno}: {e}") from e
    return examples


def save_encoded(examples: list[EncodedExample], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            rec = {
                "source_ids": ex.source_ids.tolist(),
                "bos_positions": ex.bos_positions.tolist(),
                "segment_ids": ex.segment_ids.tolist(),
                "target_ids": ex.target_ids.tolist(),
            }
            if ex.doc is not None:
                rec["doc"] = ex.doc
            f.write(json.dumps(rec) + "\n")


def load_encoded(path) -> list[EncodedExample]:
    examples = []
    for lineno, rec in iter_jsonl(path):
        try:
            examples.append(EncodedExample(
                rec["source_ids"], rec["bos_positions"], rec["segment_ids"],
                rec["target_ids"], doc=rec.get("doc"),
            ))
        except KeyError as e:
            raise ValueError(f"{path}:{lineno}: missing field {e}") from e
    return examples
