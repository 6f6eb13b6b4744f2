"""Training loop, optimizer dispatch and the training-correctness check."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .. import optim
from .model import Batch, ToyModel, make_batch

OPTIMIZERS = ("adamw", "schedulefree", "muon", "atan2")

# per-optimizer learning rates that work at toy scale
DEFAULT_LR = {"adamw": 1e-2, "schedulefree": 3.0, "muon": 2e-2, "atan2": 1e-2}


class VerificationError(RuntimeError):
    pass


@dataclass
class VerificationReport:
    loss: float
    grad_norm: float
    trainable_fraction: float
    expected_fraction: float
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"loss": self.loss, "grad_norm": self.grad_norm,
                "trainable_fraction": self.trainable_fraction,
                "expected_fraction": self.expected_fraction,
                "pass": self.passed, "failures": list(self.failures)}


def verify(model: ToyModel, batch: Batch, grad_transform=None) -> VerificationReport:
    """One forward/backward, then check loss, gradient norm and trainable share.

    ``grad_transform`` (grads -> grads) lets tests inject faults.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        loss, grads = model.loss_and_grads(batch)
    if grad_transform is not None:
        grads = grad_transform(grads)
    with np.errstate(over="ignore", invalid="ignore"):
        gnorm = optim.global_norm(grads) if grads else 0.0
    frac = model.trainable_fraction()
    expected = model.expected_trainable_fraction()
    failures = []
    if not math.isfinite(loss):
        failures.append("non-finite loss")
    if not math.isfinite(gnorm):
        failures.append("non-finite gradient norm")
    elif not gnorm > 0:
        failures.append("gradient norm is zero")
    if not math.isclose(frac, expected, rel_tol=1e-12):
        failures.append(f"trainable fraction {frac:.4f} != expected {expected:.4f}")
    return VerificationReport(float(loss), float(gnorm), frac, expected, failures)


class Optimizer:
    """Applies one optimizer kind to a dict of named parameters."""

    def __init__(self, kind: str, names, lr: float, weight_decay: float = 0.01,
                 lora_ratio: float = 1.0, beta: float = 0.9, muon_steps: int = 5,
                 quant_block: int | None = None):
        if kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {kind!r}; choose from {OPTIMIZERS}")
        self.kind = kind
        self.lr = lr
        self.beta = beta
        self.muon_steps = muon_steps
        self.quant_block = quant_block
        self.t = 0
        self.lr_mult, self.wd = {}, {}
        for g in optim.build_lora_plus_groups(sorted(names), lr, lora_ratio, weight_decay):
            for n in g.names:
                self.lr_mult[n] = g.lr / lr
                self.wd[n] = g.weight_decay
        self.state = {}

    def _adamw_state(self, name, p):
        if name not in self.state:
            self.state[name] = optim.AdamWState.zeros_like(p, quant_block=self.quant_block)
        return self.state[name]

    def step(self, params: dict, grads: dict, lr_scale: float = 1.0, clip_coef: float = 1.0):
        self.t += 1
        for name in sorted(grads):
            p, g = params[name], grads[name]
            lr = self.lr * lr_scale * self.lr_mult.get(name, 1.0)
            wd = self.wd.get(name, 0.0)
            if self.kind == "adamw" or (self.kind == "muon" and p.ndim < 2):
                optim.adamw_step(p, g, self._adamw_state(name, p), clip_coef, lr=lr,
                                 weight_decay=wd)
            elif self.kind == "muon":
                optim.muon_step(p, g * clip_coef, lr, self.muon_steps)
            elif self.kind == "atan2":
                st = self.state.get(name)
                if st is None:
                    st = self.state[name] = optim.Atan2State(np.zeros_like(p), np.zeros_like(p))
                optim.atan2_adam_update(p, g, st, lr, clip_coef, wd)
            else:  # schedule-free
                z = self.state.setdefault(name, p.copy())
                if not np.all(np.isfinite(g)):
                    raise FloatingPointError("non-finite gradient")
                theta, z_new = optim.schedulefree_step(p, z, g * clip_coef, lr, self.beta, self.t)
                p[...] = theta
                self.state[name] = z_new


def warmup_scale(step: int, total_steps: int, warmup_ratio: float = 0.03) -> float:
    """Linear warmup from ~0 over ceil(ratio * steps) steps (step is 0-based)."""
    n = math.ceil(warmup_ratio * total_steps)
    if n <= 0:
        return 1.0
    return min(1.0, (step + 1) / n)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def copy_task_sequences(n: int, seq_len: int, vocab: int, rng) -> list:
    """Sequences a,b,a,b,...: every token repeats the one two places back."""
    seqs = []
    for _ in range(n):
        a, b = rng.choice(vocab, size=2, replace=False)
        seqs.append([int(a) if i % 2 == 0 else int(b) for i in range(seq_len)])
    return seqs


def copy_task_batches(batch_size: int, seq_len: int, vocab: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    while True:
        yield make_batch(copy_task_sequences(batch_size, seq_len, vocab, rng))


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

def train(model: ToyModel, batches, optimizer: str = "adamw", steps: int = 300,
          lr: float | None = None, warmup_ratio: float = 0.03, max_grad_norm: float = 1.0,
          weight_decay: float = 0.01, verify_every: int = 50, metrics_path=None,
          quant_block: int | None = None) -> list:
    """Train ``model`` in place; returns one metrics dict per step.

    ``batches`` is an iterator of Batch. Every ``verify_every`` steps the
    correctness checks run and a failure raises VerificationError.
    """
    lr = DEFAULT_LR[optimizer] if lr is None else lr
    ratio = model.cfg.lora_ratio if model.cfg.adapter == "lora+" else 1.0
    opt = Optimizer(optimizer, model.trainable, lr, weight_decay, ratio, quant_block=quant_block)
    log = []
    fh = open(metrics_path, "w") if metrics_path else None
    try:
        for step in range(steps):
            batch = next(batches)
            if verify_every and step % verify_every == 0:
                report = verify(model, batch)
                if not report.passed:
                    raise VerificationError(f"step {step}: " + "; ".join(report.failures))
            loss, grads = model.loss_and_grads(batch)
            gnorm = optim.global_norm(grads)
            coef = optim.clip_coefficient(grads, max_grad_norm) if max_grad_norm else 1.0
            scale = warmup_scale(step, steps, warmup_ratio)
            opt.step(model.params, grads, scale, coef)
            rec = {"step": step, "loss": float(loss), "grad_norm": gnorm, "lr": lr * scale}
            log.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
    finally:
        if fh:
            fh.close()
    return log


def steps_to_threshold(log, threshold: float, window: int = 10) -> int:
    """First step where the trailing-window mean loss is <= threshold."""
    losses = [r["loss"] for r in log]
    for i in range(len(losses)):
        lo = max(0, i - window + 1)
        if np.mean(losses[lo:i + 1]) <= threshold:
            return i
    return len(losses)
