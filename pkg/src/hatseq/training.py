"""Optimization loop: Adam with decoupled weight decay, label-smoothed
cross-entropy, linear warmup + linear decay, gradient accumulation, and
best-by-validation-loss checkpointing.  Also the masked-token pre-training
objective for the encoder-only variants.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as M
from .tensor import DropoutRng, Tensor, constant, log_softmax, no_grad, pick
from .text import BOS_ID, EncodedExample, PAD_ID, UNK_ID


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    peak_lr: float = 3e-5
    warmup_steps: int = 900
    total_steps: int = 30000
    grad_accum_steps: int = 1
    label_smoothing: float = 0.1
    dropout: float = 0.1
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps cannot exceed total_steps")
        for name in ("epsilon", "peak_lr", "warmup_steps", "total_steps",
                     "grad_accum_steps", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**d)


@dataclass
class TrainState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    best_valid: float = math.inf

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "TrainState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def lr_at(step: int, cfg: OptimizerConfig) -> float:
    """Linear warmup to peak_lr, then linear decay to 0 at total_steps."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    return cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


def smoothed_ce_sum(logits: Tensor, targets: np.ndarray, label_smoothing: float,
                    pad_id: int | None = PAD_ID) -> tuple[Tensor, int]:
    """Summed label-smoothed cross-entropy over non-PAD positions.

    The smoothed target puts 1 - eps on the gold class and eps/(V-1) on
    each of the other V-1 classes.  Returns (loss sum, position count).
    """
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    logp = log_softmax(logits, axis=-1)          # [T, V]
    picked = pick(logp, targets)                 # [T]
    eps = label_smoothing
    if eps > 0.0:
        if vocab < 2:
            raise ValueError("label smoothing needs at least 2 classes")
        spread = eps / (vocab - 1)
        per_pos = (picked * (1.0 - eps - spread) + logp.sum(axis=-1) * spread) * -1.0
    else:
        per_pos = picked * -1.0
    if pad_id is None:
        keep = np.ones(len(targets), dtype=bool)
    else:
        keep = targets != pad_id
    n = int(keep.sum())
    if n == 0:
        raise ValueError("all target positions are padding")
    loss_sum = (per_pos * constant(keep.astype(logits.dtype))).sum()
    return loss_sum, n


def label_smoothed_ce(logits: Tensor, targets: np.ndarray, label_smoothing: float,
                      pad_id: int | None = PAD_ID) -> Tensor:
    """Mean label-smoothed cross-entropy over non-PAD positions (scalar)."""
    loss_sum, n = smoothed_ce_sum(logits, targets, label_smoothing, pad_id)
    return loss_sum * (1.0 / n)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: TrainState, cfg: OptimizerConfig) -> None:
    """One Adam update with bias correction.

    Decoupled weight decay is applied as p -= lr * wd * p before the
    moment update.  Moments are updated in place; state.step advances.
    """
    t = state.step + 1
    lr = lr_at(t, cfg)
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if cfg.weight_decay:
            p.data -= lr * cfg.weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
    state.step = t


# -- seq2seq loss -------------------------------------------------------------


def decoder_input(target_ids: np.ndarray) -> np.ndarray:
    """Teacher-forcing prefix: BOS followed by the target without its EOS."""
    return np.concatenate(([BOS_ID], np.asarray(target_ids)[:-1]))


def example_loss_sum(params, cfg, example: EncodedExample, label_smoothing: float,
                     train: bool = False, rng: DropoutRng | None = None,
                     ) -> tuple[Tensor, int]:
    enc = M.encode(params, cfg, example.source_ids, example.segment_ids,
                   example.bos_positions, train=train, rng=rng)
    logits = M.decode_step(params, cfg, decoder_input(example.target_ids), enc,
                           train=train, rng=rng)
    return smoothed_ce_sum(logits, example.target_ids, label_smoothing, PAD_ID)


def batch_loss(params, cfg, examples: list[EncodedExample], label_smoothing: float,
               train: bool = False, rng: DropoutRng | None = None) -> tuple[Tensor, int]:
    """Position-weighted mean loss over a list of examples."""
    total: Tensor | None = None
    positions = 0
    for ex in examples:
        loss_sum, n = example_loss_sum(params, cfg, ex, label_smoothing, train, rng)
        total = loss_sum if total is None else total + loss_sum
        positions += n
    if total is None:
        raise ValueError("empty batch")
    return total * (1.0 / positions), positions


def dataset_loss(params, cfg, dataset: list[EncodedExample],
                 label_smoothing: float) -> float:
    with no_grad():
        total = 0.0
        positions = 0
        for ex in dataset:
            loss_sum, n = example_loss_sum(params, cfg, ex, label_smoothing)
            total += float(loss_sum.data)
            positions += n
    return total / positions


def _example_stream(dataset: list[EncodedExample], rng: np.random.Generator):
    while True:
        for i in rng.permutation(len(dataset)):
            yield dataset[int(i)]


def train(model_cfg: M.HatConfig, opt_cfg: OptimizerConfig,
          train_set: list[EncodedExample], valid_set: list[EncodedExample],
          out_dir, *, init_from=None, valid_interval: int = 50,
          selection: str = "loss", metric_fn=None, dropout_schedule=None,
          dtype=np.float32, quiet: bool = True) -> Path:
    """Run the full loop and return the path of the best checkpoint.

    Model selection minimizes validation label-smoothing loss; pass
    selection="metric" with a ``metric_fn(params, cfg) -> float`` (lower is
    better) to select on an external score instead.  ``dropout_schedule``
    maps epoch index to a dropout rate, overriding the configured one
    (used to disable dropout for an initial epoch).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if selection not in ("loss", "metric"):
        raise ValueError("selection must be 'loss' or 'metric'")
    if selection == "metric" and metric_fn is None:
        raise ValueError("selection='metric' needs a metric_fn")

    params = M.init_parameters(model_cfg, opt_cfg.seed, dtype)
    if init_from is not None:
        skipped = M.load_matching_parameters(params, init_from)
        if skipped and not quiet:
            print(f"kept fresh init for {len(skipped)} parameters: {skipped}")
    state = TrainState.for_params(params)
    order_rng = np.random.default_rng(opt_cfg.seed)
    drop_rng = DropoutRng(opt_cfg.seed)
    stream = _example_stream(train_set, order_rng)
    micro = max(1, opt_cfg.batch_size // opt_cfg.grad_accum_steps)
    best_path = out_dir / "best.ckpt"
    log_path = out_dir / "train.log.jsonl"
    examples_seen = 0

    with open(log_path, "w", encoding="utf-8") as log:
        for step in range(1, opt_cfg.total_steps + 1):
            epoch = examples_seen // max(1, len(train_set))
            p_drop = opt_cfg.dropout if dropout_schedule is None else dropout_schedule(epoch)
            cfg_step = replace(model_cfg, dropout=p_drop)
            losses = []
            for _ in range(opt_cfg.grad_accum_steps):
                examples = [next(stream) for _ in range(micro)]
                examples_seen += micro
                loss, _ = batch_loss(params, cfg_step, examples,
                                     opt_cfg.label_smoothing, train=True, rng=drop_rng)
                loss.backward()
                losses.append(float(loss.data))
            grads = {k: p.grad / opt_cfg.grad_accum_steps
                     for k, p in params.items() if p.grad is not None}
            adam_step(params, grads, state, opt_cfg)
            M.zero_grads(params)

            record = {"step": step, "lr": lr_at(step, opt_cfg),
                      "train_loss": float(np.mean(losses))}
            if step % valid_interval == 0 or step == opt_cfg.total_steps:
                valid_loss = dataset_loss(params, model_cfg, valid_set,
                                          opt_cfg.label_smoothing)
                record["valid_loss"] = valid_loss
                score = valid_loss if selection == "loss" else metric_fn(params, model_cfg)
                if score < state.best_valid:
                    state.best_valid = score
                    M.save_checkpoint(best_path, model_cfg, params)
            log.write(json.dumps(record) + "\n")
    if not best_path.exists():
        M.save_checkpoint(best_path, model_cfg, params)
    return best_path


# -- masked-token pre-training -------------------------------------------------


def apply_mlm_mask(example: EncodedExample, vocab_size: int,
                   rng: np.random.Generator, mask_rate: float = 0.15,
                   mask_id: int = UNK_ID) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt 15% of the non-BOS source positions, 80/10/10 mask/random/keep.

    Returns (corrupted ids, chosen positions).  At least one position is
    always chosen.  Random replacements draw from the non-reserved ids.
    """
    ids = example.source_ids.copy()
    eligible = np.flatnonzero(ids != BOS_ID)
    if len(eligible) == 0:
        raise ValueError("example has no maskable positions")
    k = max(1, int(round(mask_rate * len(eligible))))
    chosen = rng.choice(eligible, size=min(k, len(eligible)), replace=False)
    chosen.sort()
    roll = rng.random(len(chosen))
    for pos, r in zip(chosen, roll):
        if r < 0.8:
            ids[pos] = mask_id
        elif r < 0.9:
            ids[pos] = rng.integers(4, vocab_size)
    return ids, chosen


def masked_lm_loss(params, cfg, example: EncodedExample,
                   mask_rng: np.random.Generator, train: bool = False,
                   drop_rng: DropoutRng | None = None) -> tuple[Tensor, int]:
    """Cross-entropy on the masked positions only (no smoothing)."""
    corrupted, positions = apply_mlm_mask(example, cfg.vocab_size, mask_rng)
    states, _ = M.encoder_only_forward(params, cfg, corrupted, example.segment_ids,
                                       example.bos_positions, train=train, rng=drop_rng)
    logits = M.masked_token_logits(params, states, positions)
    gold = example.source_ids[positions]
    return smoothed_ce_sum(logits, gold, 0.0, pad_id=None)


def mlm_pretrain(encoder_cfg: M.HatConfig, opt_cfg: OptimizerConfig,
                 examples: list[EncodedExample], out_dir,
                 dtype=np.float32) -> Path:
    """Masked-token pre-training loop for the encoder-only variants."""
    if encoder_cfg.mode not in ("encoder_only_hat", "encoder_only_plain"):
        raise ValueError("mlm_pretrain needs an encoder_only config")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = M.init_parameters(encoder_cfg, opt_cfg.seed, dtype)
    state = TrainState.for_params(params)
    order_rng = np.random.default_rng(opt_cfg.seed)
    drop_rng = DropoutRng(opt_cfg.seed)
    stream = _example_stream(examples, order_rng)
    micro = max(1, opt_cfg.batch_size // opt_cfg.grad_accum_steps)
    ckpt_path = out_dir / "mlm.ckpt"
    log_path = out_dir / "mlm.log.jsonl"

    with open(log_path, "w", encoding="utf-8") as log:
        for step in range(1, opt_cfg.total_steps + 1):
            losses = []
            for a in range(opt_cfg.grad_accum_steps):
                mask_rng = np.random.default_rng((opt_cfg.seed, step, a))
                total = None
                count = 0
                for ex in (next(stream) for _ in range(micro)):
                    loss_sum, n = masked_lm_loss(params, encoder_cfg, ex, mask_rng,
                                                 train=True, drop_rng=drop_rng)
                    total = loss_sum if total is None else total + loss_sum
                    count += n
                loss = total * (1.0 / count)
                loss.backward()
                losses.append(float(loss.data))
            grads = {k: p.grad / opt_cfg.grad_accum_steps
                     for k, p in params.items() if p.grad is not None}
            adam_step(params, grads, state, opt_cfg)
            M.zero_grads(params)
            log.write(json.dumps({"step": step, "lr": lr_at(step, opt_cfg),
                                  "train_loss": float(np.mean(losses))}) + "\n")
    M.save_checkpoint(ckpt_path, encoder_cfg, params)
    return ckpt_path
