"""Toy decoder-only transformer with a hand-written reverse pass.

Every block is pre-norm:  h += Attn(RMSNorm(h));  h += MLP(RMSNorm(h)),
with RoPE on q/k, a block-diagonal causal mask built from segment ids, and a
SwiGLU MLP. The LM head feeds the chunked cross-entropy directly, so the
``[tokens, vocab]`` logits are never formed.

A batch is one flat token stream; sequences are told apart by ``segments``
(globally unique per sequence) and ``positions`` restart at 0 for each one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .. import layers
from ..adapters import DoraAdapter, LoraAdapter, dora_bwd, dora_fwd, lora_bwd, lora_fwd
from ..losses import IGNORE_INDEX, CceConfig, cce_bwd, cce_fwd

PROJECTIONS = ("q", "k", "v", "o", "gate", "up", "down")
ADAPTER_MODES = ("full", "lora", "lora+", "dora")


@dataclass
class ModelConfig:
    n_layers: int = 2
    hidden: int = 32
    n_heads: int = 4
    head_dim: int = 8
    ffn_dim: int = 64
    vocab: int = 97
    max_seq: int = 16
    rope_base: float = 10000.0
    adapter: str = "full"
    lora_r: int = 4
    lora_alpha: float = 8.0
    lora_ratio: float = 16.0
    norm_eps: float = 1e-6
    init_std: float = 0.02
    chunk_size: int = 32
    block_q: int = 16
    block_kv: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.hidden != self.n_heads * self.head_dim:
            raise ValueError(f"hidden ({self.hidden}) must equal n_heads*head_dim "
                             f"({self.n_heads}*{self.head_dim})")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even")
        if self.adapter not in ADAPTER_MODES:
            raise ValueError(f"adapter must be one of {ADAPTER_MODES}, got {self.adapter!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    tokens: np.ndarray     # [T]
    targets: np.ndarray    # [T], IGNORE_INDEX where unsupervised
    positions: np.ndarray  # [T]
    segments: np.ndarray   # [T]

    @property
    def n_supervised(self) -> int:
        return int(np.sum(self.targets != IGNORE_INDEX))


def make_batch(sequences) -> Batch:
    """Concatenate sequences into one stream with next-token targets."""
    tokens, targets, positions, segments = [], [], [], []
    for s, seq in enumerate(sequences):
        seq = [int(t) for t in seq]
        if not seq:
            continue
        tokens += seq
        targets += seq[1:] + [IGNORE_INDEX]
        positions += list(range(len(seq)))
        segments += [s] * len(seq)
    as_int = lambda a: np.asarray(a, dtype=np.int64)
    return Batch(as_int(tokens), as_int(targets), as_int(positions), as_int(segments))


def batch_from_packing(packed, sequences) -> Batch:
    """Flatten a PackedBatch (bins of (index, length)) into one stream."""
    order = [i for b in packed.bins for i, _ in b]
    return make_batch([sequences[i] for i in order])


class ToyModel:
    def __init__(self, cfg: ModelConfig, params: dict | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        self.trainable = set(default_trainable(cfg, self.params))
        self.rope = layers.rope_build_cache(cfg.max_seq, cfg.head_dim, cfg.rope_base)
        self.attn_cfg = layers.AttentionConfig(cfg.n_heads, cfg.head_dim, True,
                                               cfg.block_q, cfg.block_kv)
        self.cce_cfg = CceConfig(chunk_size=cfg.chunk_size)

    # -- bookkeeping ---------------------------------------------------------
    def n_params(self, names=None) -> int:
        names = self.params if names is None else names
        return int(sum(self.params[n].size for n in names))

    def trainable_fraction(self) -> float:
        return self.n_params(self.trainable) / self.n_params()

    def expected_trainable_fraction(self) -> float:
        return self.n_params(default_trainable(self.cfg, self.params)) / self.n_params()

    def freeze_all(self):
        self.trainable = set()

    # -- linear layers with optional adapters --------------------------------
    def _linear(self, x, prefix):
        p = self.params
        W = p[prefix + ".weight"]
        mode = self.cfg.adapter
        if mode == "full":
            return x @ W.T
        lo = LoraAdapter(p[prefix + ".lora_A"], p[prefix + ".lora_B"], self.cfg.lora_alpha)
        if mode == "dora":
            return dora_fwd(x, W, DoraAdapter(lo, p[prefix + ".dora_m"]))
        return lora_fwd(x, W, lo)

    def _linear_bwd(self, dy, x, prefix, grads):
        p = self.params
        W = p[prefix + ".weight"]
        mode = self.cfg.adapter
        if mode == "full":
            grads[prefix + ".weight"] = grads.get(prefix + ".weight", 0) + dy.T @ x
            return dy @ W
        lo = LoraAdapter(p[prefix + ".lora_A"], p[prefix + ".lora_B"], self.cfg.lora_alpha)
        if mode == "dora":
            dx, dA, dB, dm = dora_bwd(dy, x, W, DoraAdapter(lo, p[prefix + ".dora_m"]))
            grads[prefix + ".dora_m"] = dm
        else:
            dx, dA, dB = lora_bwd(dy, x, W, lo)
        grads[prefix + ".lora_A"] = dA
        grads[prefix + ".lora_B"] = dB
        return dx

    # -- forward -------------------------------------------------------------
    def forward(self, batch: Batch):
        cfg, p = self.cfg, self.params
        tokens = np.asarray(batch.tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
            raise ValueError("token id out of range")
        T, H, hd = tokens.size, cfg.n_heads, cfg.head_dim
        h = p["embed.weight"][tokens]
        tape = []
        for i in range(cfg.n_layers):
            pre = f"layers.{i}"
            c = {"h": h}
            a_in, c["n1"] = layers.rmsnorm_fwd(h, p[pre + ".attn_norm.weight"], cfg.norm_eps)
            c["a_in"] = a_in
            heads = []
            for name in ("q", "k", "v"):
                heads.append(self._linear(a_in, f"{pre}.{name}").reshape(T, H, hd).transpose(1, 0, 2))
            q, k, v = heads
            qr, kr = layers.rope_apply_qk(q, k, batch.positions, self.rope)
            att = layers.attention_tiled(qr, kr, v, self.attn_cfg, segment_ids=batch.segments)
            c.update(qr=qr, kr=kr, v=v)
            o_in = att.transpose(1, 0, 2).reshape(T, cfg.hidden)
            c["o_in"] = o_in
            h2 = h + self._linear(o_in, pre + ".o")
            c["h2"] = h2
            m_in, c["n2"] = layers.rmsnorm_fwd(h2, p[pre + ".mlp_norm.weight"], cfg.norm_eps)
            c["m_in"] = m_in
            g = self._linear(m_in, pre + ".gate")
            u = self._linear(m_in, pre + ".up")
            s = layers.swiglu_fwd(g, u)
            c.update(g=g, u=u, s=s)
            h = h2 + self._linear(s, pre + ".down")
            tape.append(c)
        hf, nf = layers.rmsnorm_fwd(h, p["final_norm.weight"], cfg.norm_eps)
        result = cce_fwd(hf, p["lm_head.weight"], batch.targets, self.cce_cfg)
        caches = {"tape": tape, "h_last": h, "hf": hf, "nf": nf, "result": result, "batch": batch}
        return result.mean_loss, caches

    def loss(self, batch: Batch) -> float:
        return self.forward(batch)[0]

    # -- backward ------------------------------------------------------------
    def backward(self, caches) -> dict:
        """Gradients of the mean loss for every trainable parameter."""
        cfg, p = self.cfg, self.params
        batch = caches["batch"]
        T, H, hd = batch.tokens.size, cfg.n_heads, cfg.head_dim
        grads = {}
        dhf, grads["lm_head.weight"] = cce_bwd(caches["hf"], p["lm_head.weight"], batch.targets,
                                              caches["result"], self.cce_cfg)
        dh, grads["final_norm.weight"] = layers.rmsnorm_bwd(
            dhf, caches["h_last"], p["final_norm.weight"], caches["nf"])
        for i in reversed(range(cfg.n_layers)):
            pre = f"layers.{i}"
            c = caches["tape"][i]
            ds = self._linear_bwd(dh, c["s"], pre + ".down", grads)
            dg, du = layers.swiglu_bwd(ds, c["g"], c["u"])
            dm_in = (self._linear_bwd(dg, c["m_in"], pre + ".gate", grads)
                     + self._linear_bwd(du, c["m_in"], pre + ".up", grads))
            dh2_n, grads[pre + ".mlp_norm.weight"] = layers.rmsnorm_bwd(
                dm_in, c["h2"], p[pre + ".mlp_norm.weight"], c["n2"])
            dh2 = dh + dh2_n
            do_in = self._linear_bwd(dh2, c["o_in"], pre + ".o", grads)
            datt = do_in.reshape(T, H, hd).transpose(1, 0, 2)
            dqr, dkr, dv = layers.attention_bwd(datt, c["qr"], c["kr"], c["v"], True, batch.segments)
            dq = layers.rope_apply(dqr, batch.positions, self.rope, inverse=True)
            dk = layers.rope_apply(dkr, batch.positions, self.rope, inverse=True)
            da_in = 0
            for name, d in (("q", dq), ("k", dk), ("v", dv)):
                da_in = da_in + self._linear_bwd(d.transpose(1, 0, 2).reshape(T, cfg.hidden),
                                                 c["a_in"], f"{pre}.{name}", grads)
            dh_n, grads[pre + ".attn_norm.weight"] = layers.rmsnorm_bwd(
                da_in, c["h"], p[pre + ".attn_norm.weight"], c["n1"])
            dh = dh2 + dh_n
        demb = np.zeros_like(p["embed.weight"])
        np.add.at(demb, batch.tokens, dh)
        grads["embed.weight"] = demb
        return {n: g for n, g in grads.items() if n in self.trainable}

    def loss_and_grads(self, batch: Batch):
        loss, caches = self.forward(batch)
        return loss, self.backward(caches)


def init_params(cfg: ModelConfig) -> dict:
    rng = np.random.default_rng(cfg.seed)
    d, f, V = cfg.hidden, cfg.ffn_dim, cfg.vocab
    normal = lambda *shape: rng.normal(0.0, cfg.init_std, size=shape)
    p = {"embed.weight": normal(V, d)}
    shapes = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d),
              "gate": (f, d), "up": (f, d), "down": (d, f)}
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        p[pre + ".attn_norm.weight"] = np.ones(d)
        p[pre + ".mlp_norm.weight"] = np.ones(d)
        for name in PROJECTIONS:
            p[f"{pre}.{name}.weight"] = normal(*shapes[name])
    p["final_norm.weight"] = np.ones(d)
    p["lm_head.weight"] = normal(V, d)
    if cfg.adapter != "full":
        for i in range(cfg.n_layers):
            for name in PROJECTIONS:
                pre = f"layers.{i}.{name}"
                out_dim, in_dim = shapes[name]
                lo = LoraAdapter.init(out_dim, in_dim, cfg.lora_r, cfg.lora_alpha, rng)
                p[pre + ".lora_A"] = lo.A
                p[pre + ".lora_B"] = lo.B
                if cfg.adapter == "dora":
                    p[pre + ".dora_m"] = DoraAdapter.from_base(p[pre + ".weight"], lo).m
    return p


def default_trainable(cfg: ModelConfig, params: dict) -> list:
    if cfg.adapter == "full":
        return sorted(params)
    keep = (".lora_A", ".lora_B", ".dora_m")
    return sorted(n for n in params if n.endswith(keep))


def gradient_check(model: ToyModel, batch: Batch, h: float = 1e-5, names=None,
                   max_entries: int | None = None, rng=None) -> dict:
    """Central-difference check of ``backward``.

    Returns {name: (abs_error, scale)} with abs_error = ||fd - analytic|| and
    scale = max(||fd||, ||analytic||) over the checked entries.
    """
    _, grads = model.loss_and_grads(batch)
    names = sorted(model.trainable) if names is None else names
    rng = rng if rng is not None else np.random.default_rng(0)
    out = {}
    for name in names:
        w = model.params[name]
        flat = w.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        fd = np.empty(idx.size)
        for j, e in enumerate(idx):
            orig = flat[e]
            flat[e] = orig + h
            lp = model.loss(batch)
            flat[e] = orig - h
            lm = model.loss(batch)
            flat[e] = orig
            fd[j] = (lp - lm) / (2 * h)
        an = grads[name].reshape(-1)[idx]
        out[name] = (float(np.linalg.norm(fd - an)),
                     float(max(np.linalg.norm(fd), np.linalg.norm(an))))
    return out


def gradient_check_failures(report: dict, rtol: float = 1e-4, atol: float = 1e-8) -> list:
    """Names whose error exceeds rtol * scale + atol."""
    return [n for n, (err, scale) in report.items() if err > rtol * scale + atol]
