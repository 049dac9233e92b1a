"""Beam search and greedy decoding with length penalty, minimum and maximum
generation lengths, and deterministic tie-breaking.

Scoring conventions, fixed here and relied on by the tests: a
hypothesis's log-probability includes the EOS step when EOS was
generated; its length for the penalty is the number of non-EOS tokens;
the final score is logprob / len**alpha with len floored at 1.
Hypotheses reaching max_len are finished as they stand, without an EOS
term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from .heatmap import AttentionTrace
from .tensor import no_grad
from .text import BOS_ID, EOS_ID


@dataclass
class GenConfig:
    beam_width: int = 4
    length_penalty: float = 1.0
    min_len: int = 0
    max_len: int = 128
    trace_attention: bool = False

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if not 0 <= self.min_len <= self.max_len:
            raise ValueError("need 0 <= min_len <= max_len")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**d)


@dataclass
class BeamHypothesis:
    tokens: list[int]           # generated ids, BOS and EOS excluded
    logprob: float              # cumulative, including the EOS step if any
    finished: bool = False
    trace: AttentionTrace | None = None

    def score(self, alpha: float) -> float:
        return self.logprob / (max(1, len(self.tokens)) ** alpha)


class HatScorer:
    """Next-token log-probabilities from a decoder run over the full prefix."""

    def __init__(self, params, cfg: M.HatConfig, enc_out: M.EncoderOutput,
                 bos_id: int = BOS_ID, eos_id: int = EOS_ID):
        self.params = params
        self.cfg = cfg
        self.enc_out = enc_out
        self.bos_id = bos_id
        self.eos_id = eos_id
        self.vocab_size = cfg.vocab_size

    def log_probs(self, prefix: list[int]) -> np.ndarray:
        with no_grad():
            logits = M.decode_step(self.params, self.cfg,
                                   np.asarray(prefix, dtype=np.int64), self.enc_out)
            row = logits.data[-1]
        row = row - row.max()
        return row - np.log(np.exp(row).sum())


class TableScorer:
    """Log-probabilities read from a prefix-keyed table (tests, toy models)."""

    def __init__(self, table: dict[tuple[int, ...], np.ndarray], vocab_size: int,
                 bos_id: int = 0, eos_id: int = 1, default=None):
        self.table = table
        self.vocab_size = vocab_size
        self.bos_id = bos_id
        self.eos_id = eos_id
        self.default = default

    def log_probs(self, prefix: list[int]) -> np.ndarray:
        key = tuple(prefix[1:])  # table is keyed by generated tokens only
        if key in self.table:
            return self.table[key]
        if self.default is not None:
            return self.default
        raise KeyError(f"no distribution for prefix {key}")


def _best(hypotheses: list[BeamHypothesis], alpha: float) -> BeamHypothesis:
    best = hypotheses[0]
    best_score = best.score(alpha)
    for h in hypotheses[1:]:
        s = h.score(alpha)
        if s > best_score:
            best, best_score = h, s
    return best


def beam_search(scorer, cfg: GenConfig) -> BeamHypothesis:
    """Standard beam search over ``scorer``'s next-token distributions.

    Each step ranks all (beam, token) extensions by cumulative logprob,
    keeping the top beam_width; ties prefer the lower beam index, then the
    lower token id, so results are deterministic.  EOS is masked while a
    hypothesis has fewer than min_len tokens; an EOS extension moves the
    hypothesis to the finished pool.  The search stops once no live
    hypothesis could still beat the best finished score.
    """
    if cfg.beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if cfg.max_len == 0:
        return BeamHypothesis([], 0.0, True)
    alpha = cfg.length_penalty
    live = [BeamHypothesis([], 0.0)]
    finished: list[BeamHypothesis] = []
    while live:
        candidates = []  # (negative cum logprob, beam index, token, cum)
        for bi, hyp in enumerate(live):
            lp = np.asarray(scorer.log_probs([scorer.bos_id] + hyp.tokens), dtype=np.float64)
            if len(hyp.tokens) < cfg.min_len:
                lp = lp.copy()
                lp[scorer.eos_id] = -np.inf
            top = np.argsort(-lp, kind="stable")[: cfg.beam_width + 1]
            for tok in top:
                cum = hyp.logprob + lp[tok]
                if np.isfinite(cum):
                    candidates.append((-cum, bi, int(tok), cum))
        candidates.sort()
        new_live = []
        for _, bi, tok, cum in candidates[: cfg.beam_width]:
            hyp = live[bi]
            if tok == scorer.eos_id:
                finished.append(BeamHypothesis(list(hyp.tokens), cum, True))
            else:
                ext = BeamHypothesis(hyp.tokens + [tok], cum)
                if len(ext.tokens) >= cfg.max_len:
                    ext.finished = True
                    finished.append(ext)
                else:
                    new_live.append(ext)
        live = new_live
        if finished and live:
            best_done = _best(finished, alpha).score(alpha)
            # logprobs only decrease, so the best a live hypothesis can ever
            # score is its current logprob spread over the maximum length
            bound = max(h.logprob for h in live) / (max(1, cfg.max_len) ** alpha)
            if bound < best_done:
                break
    if not finished:
        raise RuntimeError("beam search finished no hypothesis")
    return _best(finished, alpha)


def greedy_decode(scorer, cfg: GenConfig) -> BeamHypothesis:
    """Argmax decoding under the same length constraints as beam search."""
    tokens: list[int] = []
    logprob = 0.0
    while len(tokens) < cfg.max_len:
        lp = np.asarray(scorer.log_probs([scorer.bos_id] + tokens), dtype=np.float64)
        if len(tokens) < cfg.min_len:
            lp = lp.copy()
            lp[scorer.eos_id] = -np.inf
        tok = int(np.argmax(lp))
        logprob += float(lp[tok])
        if tok == scorer.eos_id:
            return BeamHypothesis(tokens, logprob, True)
        tokens.append(tok)
    return BeamHypothesis(tokens, logprob, True)


def retrace(params, cfg: M.HatConfig, enc_out: M.EncoderOutput,
            tokens: list[int], bos_id: int = BOS_ID) -> AttentionTrace:
    """Re-decode a finished sequence to record its hierarchical attention.

    One forward pass over the full prefix reproduces, row by row, the
    attention of every generation step (causal self-attention makes row i
    identical to what the incremental decode computed when it generated
    token i).  Shape: [layers, heads, steps, num_bos].
    """
    if cfg.mode != "hat":
        raise ValueError("attention traces exist only in hat mode")
    if not tokens:
        num_bos = len(enc_out.bos_positions)
        return AttentionTrace(np.zeros((cfg.num_layers, cfg.num_heads, 0, num_bos)))
    prefix = np.concatenate(([bos_id], np.asarray(tokens[:-1], dtype=np.int64)))
    sink: list[np.ndarray] = []
    with no_grad():
        M.decode_step(params, cfg, prefix, enc_out, trace_sink=sink)
    return AttentionTrace(np.stack(sink, axis=0))


def generate(params, cfg: M.HatConfig, enc_out: M.EncoderOutput,
             gen_cfg: GenConfig) -> BeamHypothesis:
    """Beam-search one example; optionally attach its attention trace."""
    scorer = HatScorer(params, cfg, enc_out)
    hyp = beam_search(scorer, gen_cfg)
    if gen_cfg.trace_attention and cfg.mode == "hat":
        hyp.trace = retrace(params, cfg, enc_out, hyp.tokens)
    return hyp
