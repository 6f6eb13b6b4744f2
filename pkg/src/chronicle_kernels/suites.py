"""Self-check suites run by ``chronicle-kernels verify``.

Each check is a small oracle or property test registered with the
operations it covers. ``OPERATIONS`` lists every public operation of the
package; ``missing_coverage()`` must be empty, which the registry itself
checks.
"""
from __future__ import annotations

import contextlib
import json
import math
import tempfile
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import adapters, analysis, fp8, layers, losses, numerics, optim, packing

OPERATIONS = (
    "numerics.online_update", "numerics.logsumexp", "numerics.stable_softmax",
    "numerics.kahan_add",
    "layers.rmsnorm_fwd", "layers.rmsnorm_bwd", "layers.rmsnorm_residual_fwd",
    "layers.swiglu_fwd", "layers.swiglu_bwd", "layers.rope_build_cache",
    "layers.rope_apply_qk", "layers.dropout_fwd", "layers.attention_naive",
    "layers.attention_tiled",
    "losses.ce_naive", "losses.cce_fwd", "losses.cce_bwd", "losses.select_chunk_size",
    "optim.clip_coefficient", "optim.adamw_step", "optim.quantize_state",
    "optim.schedulefree_step", "optim.newton_schulz", "optim.muon_step",
    "optim.adam_atan2_step", "optim.build_lora_plus_groups",
    "adapters.lora_fwd", "adapters.lora_bwd", "adapters.dora_fwd",
    "packing.pack_bfd", "packing.cu_seqlens", "packing.position_ids",
    "packing.token_batches", "packing.waste_stats",
    "fp8.fp8_codec", "fp8.quantize_block_e4m3", "fp8.delayed_scale_update",
    "fp8.snr_accum",
    "analysis.ridge_point", "analysis.arithmetic_intensity", "analysis.mfu",
    "analysis.memory_budget", "analysis.checkpoint_plan", "analysis.ratios",
    "trainer.forward_loss", "trainer.backward", "trainer.train", "trainer.verify",
    "cli.cmd_verify", "cli.cmd_pack_train_analyze",
)


@dataclass
class Check:
    suite: str
    name: str
    covers: tuple
    fn: object


REGISTRY: list = []


def check(suite: str, *covers: str):
    def deco(fn):
        REGISTRY.append(Check(suite, fn.__name__, covers, fn))
        return fn
    return deco


def missing_coverage() -> list:
    covered = {op for c in REGISTRY for op in c.covers}
    return [op for op in OPERATIONS if op not in covered]


def _close(a, b, tol, what):
    err = float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))
    if not err <= tol:
        raise AssertionError(f"{what}: max |diff| {err:.3e} > {tol:.1e}")


def _rel_fd(f, x, analytic, h=1e-5):
    """Norm-relative error between analytic gradient and central differences."""
    fd = np.zeros_like(x)
    flat, fdf = x.reshape(-1), fd.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        fp = f()
        flat[i] = o - h
        fm = f()
        flat[i] = o
        fdf[i] = (fp - fm) / (2 * h)
    return np.linalg.norm(fd - analytic) / max(np.linalg.norm(fd), np.linalg.norm(analytic), 1e-300)


# ---------------------------------------------------------------------------
# numerics
# ---------------------------------------------------------------------------

@check("numerics", "numerics.online_update", "numerics.logsumexp")
def streaming_lse_matches_two_pass():
    rng = np.random.default_rng(0)
    for _ in range(50):
        z = rng.normal(0, 5, size=rng.integers(1, 200))
        z = np.concatenate([z, [z.max()] * 3])
        two_pass = z.max() + math.log(np.exp(z - z.max()).sum())
        _close(numerics.online_lse(rng.permutation(z)), two_pass, 1e-12, "online lse")
        _close(numerics.logsumexp(z), two_pass, 1e-12, "logsumexp")


@check("numerics", "numerics.stable_softmax")
def softmax_shift_invariant():
    rng = np.random.default_rng(1)
    for _ in range(50):
        z = rng.normal(0, 10, size=20)
        p = numerics.stable_softmax(z)
        _close(p, numerics.stable_softmax(z + rng.uniform(-1e3, 1e3)), 1e-12, "shift")
        _close(p.sum(), 1.0, 1e-12, "sum")
    p, flag = numerics.stable_softmax([-np.inf] * 4, return_flag=True)
    assert flag and np.allclose(p, 0.25)


@check("numerics", "numerics.kahan_add")
def kahan_beats_naive_float32():
    vals = np.full(10**5, 1e-8, dtype=np.float32)
    exact = 1.0 + 1e-3
    seq = np.concatenate([[np.float32(1.0)], vals])
    k = numerics.kahan_sum(seq, np.float32)
    n = numerics.naive_sum(seq, np.float32)
    assert n == np.float32(1.0), "naive float32 should stall at 1.0"
    assert abs(float(k) - exact) <= 1e-6, f"kahan error {abs(float(k) - exact):.2e}"


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

@check("layers", "layers.rmsnorm_fwd", "layers.rmsnorm_bwd", "layers.rmsnorm_residual_fwd")
def rmsnorm_forward_backward():
    y, c = layers.rmsnorm_fwd(np.array([[3.0, 4.0]]), np.ones(2), 0.0)
    _close(y, [[0.848528137423857, 1.131370849898476]], 1e-12, "rmsnorm [3,4]")
    rng = np.random.default_rng(2)
    x, g, dy = rng.normal(size=(3, 8)), rng.normal(size=8), rng.normal(size=(3, 8))
    _, c = layers.rmsnorm_fwd(x, g, 1e-6)
    dx, dg = layers.rmsnorm_bwd(dy, x, g, c)
    loss = lambda: float(np.sum(layers.rmsnorm_fwd(x, g, 1e-6)[0] * dy))
    assert _rel_fd(loss, x, dx) <= 1e-6, "rmsnorm dx vs finite differences"
    assert _rel_fd(loss, g, dg) <= 1e-6, "rmsnorm dgamma vs finite differences"
    r = rng.normal(size=(3, 8))
    y2, new_r, _ = layers.rmsnorm_residual_fwd(x, r, g)
    _close(y2, layers.rmsnorm_fwd(x + r, g)[0], 0.0, "fused residual")
    _close(new_r, x + r, 0.0, "new residual")


@check("layers", "layers.swiglu_fwd", "layers.swiglu_bwd")
def swiglu_forward_backward():
    _close(layers.swiglu_fwd(np.array([1.0]), np.array([2.0])), [1.4621171572600098], 1e-12, "swiglu(1,2)")
    rng = np.random.default_rng(3)
    g, u, do = rng.normal(size=10), rng.normal(size=10), rng.normal(size=10)
    dg, du = layers.swiglu_bwd(do, g, u)
    loss = lambda: float(np.sum(layers.swiglu_fwd(g, u) * do))
    assert _rel_fd(loss, g, dg) <= 1e-6, "swiglu dgate"
    assert _rel_fd(loss, u, du) <= 1e-6, "swiglu dup"


@check("layers", "layers.rope_build_cache", "layers.rope_apply_qk")
def rope_norm_and_relative_position():
    cache = layers.rope_build_cache(128, 8)
    _close(cache.cos ** 2 + cache.sin ** 2, 1.0, 1e-12, "cos^2+sin^2")
    rng = np.random.default_rng(4)
    q, k = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    for _ in range(20):
        m, n = rng.integers(0, 64, size=2)
        qm, _ = layers.rope_apply_qk(q, q, [m], cache)
        _, kn = layers.rope_apply_qk(k, k, [n], cache)
        _close(np.linalg.norm(qm), np.linalg.norm(q), 1e-12, "rope norm")
        if n >= m:
            rel = layers.rope_apply(k, [n - m], cache)
            _close(qm @ kn.T, q @ rel.T, 1e-10, "relative position")


@check("layers", "layers.dropout_fwd")
def dropout_deterministic_and_unbiased():
    x = np.ones(10**5)
    a = layers.dropout_fwd(x, 0.1, seed=7)
    assert np.array_equal(a, layers.dropout_fwd(x, 0.1, seed=7)), "not deterministic"
    keep = np.mean(a != 0)
    assert abs(keep - 0.9) < 0.005, f"keep rate {keep}"
    assert np.array_equal(layers.dropout_fwd(x, 0.0, 1), x)


@check("layers", "layers.attention_naive", "layers.attention_tiled")
def tiled_attention_matches_naive():
    rng = np.random.default_rng(5)
    for _ in range(30):
        n, d = int(rng.integers(1, 65)), int(rng.choice([2, 4, 8]))
        cfg = layers.AttentionConfig(1, d, bool(rng.integers(2)),
                                     int(rng.integers(1, 20)), int(rng.integers(1, 20)))
        q, k, v = (rng.normal(size=(n, d)) for _ in range(3))
        seg = np.sort(rng.integers(0, 3, size=n))
        _close(layers.attention_tiled(q, k, v, cfg, segment_ids=seg),
               layers.attention_naive(q, k, v, cfg, segment_ids=seg), 1e-10, "tiled vs naive")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@check("losses", "losses.ce_naive", "losses.cce_fwd", "losses.cce_bwd")
def chunked_ce_matches_naive():
    rng = np.random.default_rng(6)
    for _ in range(40):
        rows, h, V = int(rng.integers(1, 9)), int(rng.integers(1, 17)), int(rng.integers(2, 300))
        C = int(rng.choice([1, 7, 64, V, V + 5]))
        cfg = losses.CceConfig(C, float(rng.choice([0.0, 0.1])), float(rng.choice([0.0, 1e-3])))
        hid, W = rng.normal(size=(rows, h)), rng.normal(size=(V, h))
        t = rng.integers(0, V, size=rows)
        t[rng.random(rows) < 0.2] = losses.IGNORE_INDEX
        res = losses.cce_fwd(hid, W, t, cfg)
        ref = losses.ce_naive(hid @ W.T, t, cfg)
        _close(res.loss, ref.loss, 1e-9, "cce loss")
        dh, dw = losses.cce_bwd(hid, W, t, res, cfg)
        gz = losses.ce_naive_grad(hid @ W.T, t, cfg)
        _close(dh, gz @ W, 1e-9, "cce dhidden")
        _close(dw, gz.T @ hid, 1e-9, "cce dweight")


@check("losses", "losses.select_chunk_size")
def chunk_size_tiers():
    assert losses.select_chunk_size(32000) == 4096
    assert losses.select_chunk_size(151936) == 16384
    assert losses.select_chunk_size(100) == 100
    assert round(losses.reduction_factor(151936, 4096)) == 37


# ---------------------------------------------------------------------------
# optim
# ---------------------------------------------------------------------------

@check("optim", "optim.clip_coefficient")
def clip_coefficient_values():
    _close(optim.clip_coefficient([np.array([3.0, 0.0]), np.array([0.0, 4.0])], 1.0), 0.2, 1e-6, "3-4-5")
    assert optim.clip_coefficient([np.array([0.5])], 1.0) == 1.0


@check("optim", "optim.adamw_step")
def fused_adamw_matches_unfused():
    rng = np.random.default_rng(7)
    hp = optim.AdamWHyper(lr=1e-2, weight_decay=0.01)
    p = rng.normal(size=50)
    st = optim.AdamWState.zeros_like(p, hp)
    rp, rm, rv = p.copy(), np.zeros(50), np.zeros(50)
    for t in range(1, 101):
        g = rng.normal(size=50)
        coef = float(rng.uniform(0.5, 1.0))
        optim.adamw_step(p, g, st, coef)
        rp, rm, rv = optim.adamw_reference(rp, g, rm, rv, t, hp, coef)
    _close(p, rp, 1e-14, "fused vs unfused")
    p1 = np.array([1.0])
    optim.adamw_step(p1, np.array([1.0]), optim.AdamWState.zeros_like(p1, optim.AdamWHyper(lr=0.1, weight_decay=0.0)))
    _close(p1, [0.9], 1e-8, "hand example")


@check("optim", "optim.quantize_state")
def block_quantization_roundtrip():
    q = optim.quantize_state(np.array([0.5, -0.25]), 2048)
    assert q.codes[:2].tolist() == [127, -64]
    rng = np.random.default_rng(8)
    x = rng.normal(size=5000)
    q = optim.quantize_state(x, 128)
    err = np.abs(optim.dequantize_state(q) - x).reshape(-1)
    scales = np.repeat(q.scales, 128)[: x.size]
    assert np.all(err <= scales / 127 + 1e-15), "round-trip error above scale/127"


@check("optim", "optim.schedulefree_step")
def schedulefree_limits():
    th, z = optim.schedulefree_step(1.0, 2.0, 0.5, 0.1, 1.0, 3)
    assert (th, z) == (1.0, 2.0)
    th, z = optim.schedulefree_step(1.0, 2.0, 0.5, 0.1, 0.0, 3)
    _close([th, z], [0.95, 0.95], 1e-15, "beta=0 is SGD")


@check("optim", "optim.newton_schulz", "optim.muon_step")
def newton_schulz_orthogonalises():
    rng = np.random.default_rng(9)
    u, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    w, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    G = u @ np.diag(np.linspace(1, 5, 8)) @ w.T
    x = optim.newton_schulz(G, 10)
    assert optim.orthogonality_error(x) <= 1e-3, "not orthogonal after 10 steps"
    p = np.zeros((8, 8))
    optim.muon_step(p, 3.0 * u, lr=1.0, steps=10)
    _close(-p, u, 1e-6, "muon direction")


@check("optim", "optim.adam_atan2_step")
def atan2_bounded():
    rng = np.random.default_rng(10)
    m, v = rng.normal(0, 10, 1000), np.abs(rng.normal(size=1000)) * rng.integers(0, 2, 1000)
    upd = optim.adam_atan2_step(np.zeros(1000), m, v, 1.0)
    assert np.all(np.abs(upd) <= math.pi / 2), "update above pi/2"
    _close(optim.adam_atan2_step(0.0, 1.0, 0.0, 1.0), -math.pi / 2, 1e-15, "v=0")


@check("optim", "optim.build_lora_plus_groups")
def lora_plus_groups():
    names = ["layers.0.q.lora_A.weight", "layers.0.q.lora_B.weight", "embed_tokens.weight"]
    groups = {g.label: g for g in optim.build_lora_plus_groups(names, 1e-4, 16, 0.01)}
    assert groups["lora_A"].names == [names[0]] and groups["lora_A"].lr == 1e-4
    assert groups["lora_B"].names == [names[1]]
    _close(groups["lora_B"].lr, 1.6e-3, 1e-18, "lora_B lr")
    _close(groups["lora_B"].weight_decay, 0.16, 1e-15, "lora_B wd")
    assert groups["other"].names == [names[2]]


# ---------------------------------------------------------------------------
# adapters
# ---------------------------------------------------------------------------

@check("adapters", "adapters.lora_fwd", "adapters.lora_bwd")
def lora_paths_and_gradients():
    rng = np.random.default_rng(11)
    W0, x = rng.normal(size=(12, 10)), rng.normal(size=(5, 10))
    ad = adapters.LoraAdapter.init(12, 10, 4, 8, rng)
    dy = rng.normal(size=(5, 12))
    _, dA, _ = adapters.lora_bwd(dy, x, W0, ad)
    assert np.all(dA == 0.0), "dA must vanish at B = 0"
    ad.B[...] = rng.normal(size=ad.B.shape)
    _close(adapters.lora_fwd(x, W0, ad, fused=True), adapters.lora_fwd(x, W0, ad), 1e-12, "fused")
    dx, dA, dB = adapters.lora_bwd(dy, x, W0, ad)
    loss = lambda: float(np.sum(adapters.lora_fwd(x, W0, ad) * dy))
    assert _rel_fd(loss, ad.A, dA) <= 1e-5 and _rel_fd(loss, ad.B, dB) <= 1e-5
    assert _rel_fd(loss, x, dx) <= 1e-5


@check("adapters", "adapters.dora_fwd")
def dora_identity_and_norms():
    rng = np.random.default_rng(12)
    W0, x = rng.normal(size=(6, 5)), rng.normal(size=(3, 5))
    dora = adapters.DoraAdapter.from_base(W0, adapters.LoraAdapter.init(6, 5, 2, 4, rng))
    _close(adapters.dora_fwd(x, W0, dora), x @ W0.T, 1e-12, "init identity")
    dora.lora.B[...] = rng.normal(size=dora.lora.B.shape)
    dora.m[...] = rng.uniform(0.5, 2, 6)
    _close(np.linalg.norm(adapters.dora_weight(W0, dora), axis=1), dora.m, 1e-12, "norms")


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------

@check("packing", "packing.pack_bfd")
def bfd_within_bound():
    assert len(packing.pack_bfd([3, 3, 2, 2], 5).bins) == 2
    rng = np.random.default_rng(13)
    for _ in range(200):
        C = int(rng.integers(1, 21))
        lens = rng.integers(1, C + 1, size=int(rng.integers(1, 11)))
        b = len(packing.pack_bfd(lens, C).bins)
        assert b <= packing.bfd_bound(packing.optimal_bins(lens, C)) + 1e-12


@check("packing", "packing.cu_seqlens", "packing.position_ids")
def boundaries_and_positions():
    assert packing.cu_seqlens([3, 2, 4]).tolist() == [0, 3, 5, 9]
    assert packing.cu_seqlens([]).tolist() == [0]
    assert packing.position_ids([3, 2]).tolist() == [0, 1, 2, 0, 1]


@check("packing", "packing.token_batches", "packing.waste_stats")
def batching_and_waste():
    assert len(packing.token_batches([600, 600], 1024)[0]) == 2
    assert len(packing.token_batches([100] * 10, 1024)[0]) == 1
    _close(packing.waste_stats([512], 2048)["pad_waste"], 0.75, 1e-15, "pad waste")
    assert packing.waste_stats([8, 8], 8)["packed_waste"] == 0.0


# ---------------------------------------------------------------------------
# fp8
# ---------------------------------------------------------------------------

@check("fp8", "fp8.fp8_codec")
def codec_roundtrip():
    for fmt, top in ((fp8.E4M3, 448.0), (fp8.E5M2, 57344.0)):
        codes, vals = fp8.code_table(fmt)
        assert np.nanmax(vals) == top
        assert np.array_equal(fp8.fp8_decode(fp8.fp8_encode(vals, fmt), fmt), vals)
    assert fp8.fp8_decode(fp8.fp8_encode(500.0)) == 448.0


@check("fp8", "fp8.quantize_block_e4m3")
def block_error_bound():
    rng = np.random.default_rng(14)
    x = rng.normal(size=128 * 200)
    q = fp8.quantize_block_e4m3(x)
    err = np.abs(fp8.dequantize_block(q) - x).reshape(-1, 128)
    xb = x.reshape(-1, 128)
    for b in range(xb.shape[0]):
        s = q.scales[b]
        bound = fp8.element_error_bound(xb[b], s)
        assert np.all(err[b] <= bound + 1e-15), "per-element half-ulp bound"
        small = np.abs(xb[b]) < 2 * s
        assert np.all(err[b][small] <= fp8.coarse_error_bound(s * 448) + 1e-15)


@check("fp8", "fp8.delayed_scale_update")
def delayed_scaling_window():
    h = fp8.AmaxHistory()
    for a in (1.0, 2.0, 4.0):
        _, s, h = fp8.delayed_scale_update(h, np.array([a]))
    _close(s, 4 / 448, 1e-15, "scale")
    h = fp8.AmaxHistory()
    fp8.delayed_scale_update(h, np.array([100.0]))
    kept = 0
    for _ in range(40):
        _, s, _ = fp8.delayed_scale_update(h, np.array([1.0]))
        kept += s == 100.0 / 448
    assert kept == 31, f"spike kept for {kept} further pushes"


@check("fp8", "fp8.snr_accum")
def snr_and_accumulation():
    _close(fp8.snr_db("E4M3"), 19.82, 1e-9, "E4M3 SNR")
    _close(fp8.snr_db("E5M2"), 13.80, 1e-9, "E5M2 SNR")
    _close(fp8.accum_error(8, 0.01), 0.0282842712, 1e-9, "sqrt(n) eps")


# ---------------------------------------------------------------------------
# analysis
# ---------------------------------------------------------------------------

@check("analysis", "analysis.ridge_point", "analysis.arithmetic_intensity")
def roofline_numbers():
    assert analysis.ridge_point() == 156.0
    assert analysis.arithmetic_intensity("rmsnorm") == 0.5
    assert analysis.arithmetic_intensity("ce") == 0.375
    assert analysis.bound_verdict(0.375) == "memory-bound"


@check("analysis", "analysis.mfu")
def mfu_numbers():
    assert round(analysis.mfu(5e8, 41184), 1) == 39.6
    assert round(analysis.mfu(5e8, 11736), 1) == 11.3


@check("analysis", "analysis.memory_budget", "analysis.checkpoint_plan")
def memory_and_checkpointing():
    mb = analysis.memory_budget(494e6)
    assert round(mb["parameters"] / 1e9, 2) == 0.99
    _close(mb["optimizer"], 2 * 494e6 * 4, 0, "optimizer bytes")
    plan = analysis.checkpoint_plan(25)
    assert plan["k_int"] == 5 and plan["compute_overhead"] == 1.2


@check("analysis", "analysis.ratios")
def ratio_calculators():
    _close(analysis.cce_reduction(151936, 4096), 37.09375, 1e-12, "cce reduction")
    _close(analysis.kv_ratio("mqa", 32), 1 / 32, 0, "mqa")
    io = analysis.flash_io(1024, 64, 98304)
    assert io["tiled"] < io["standard"]


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

def _tiny_model(mode="full", seed=0):
    from .trainer import ModelConfig, ToyModel
    cfg = ModelConfig(n_layers=1, hidden=8, n_heads=2, head_dim=4, ffn_dim=16, vocab=23,
                      max_seq=8, adapter=mode, lora_r=2, lora_alpha=4, init_std=0.3,
                      chunk_size=7, block_q=3, block_kv=3, seed=seed)
    return ToyModel(cfg)


@check("trainer", "trainer.forward_loss")
def packed_equals_unpacked():
    from .trainer import make_batch
    m = _tiny_model()
    seqs = [[1, 5, 7, 2], [3, 9, 22], [4, 4]]
    packed = m.loss(make_batch(seqs))
    w = [len(s) - 1 for s in seqs]
    sep = sum(m.loss(make_batch([s])) * n for s, n in zip(seqs, w)) / sum(w)
    _close(packed, sep, 1e-10, "packed vs unpacked")


@check("trainer", "trainer.backward")
def model_gradients_match_fd():
    from .trainer import gradient_check, gradient_check_failures, make_batch
    rng = np.random.default_rng(15)
    for mode in ("full", "lora", "dora"):
        m = _tiny_model(mode)
        for n in m.params:
            if n.endswith("lora_B"):
                m.params[n] += rng.normal(0, 0.3, m.params[n].shape)
        rep = gradient_check(m, make_batch([[1, 5, 7, 2], [3, 9]]), max_entries=12)
        bad = gradient_check_failures(rep)
        assert not bad, f"{mode}: finite-difference mismatch in {bad}"


@check("trainer", "trainer.train")
def short_training_reduces_loss():
    from .trainer import ModelConfig, ToyModel, copy_task_batches, train
    m = ToyModel(ModelConfig())
    log = train(m, copy_task_batches(8, 16, 97, 0), "adamw", steps=120)
    first = np.mean([r["loss"] for r in log[:10]])
    last = np.mean([r["loss"] for r in log[-10:]])
    assert last < 0.75 * first, f"loss {first:.3f} -> {last:.3f}"


@check("trainer", "trainer.verify")
def verify_detects_pathologies():
    from .trainer import make_batch, verify
    b = make_batch([[1, 5, 7, 2]])
    m = _tiny_model()
    assert verify(m, b).passed
    zero = verify(m, b, grad_transform=lambda g: {k: 0 * v for k, v in g.items()})
    assert "gradient norm is zero" in zero.failures
    lm = _tiny_model("lora")
    lm.freeze_all()
    assert any("trainable fraction" in f for f in verify(lm, b).failures)
    m.params["lm_head.weight"] *= 1e308  # logits overflow to inf
    assert "non-finite loss" in verify(m, b).failures


# ---------------------------------------------------------------------------
# cli
# ---------------------------------------------------------------------------

@check("cli", "cli.cmd_verify")
def registry_covers_every_operation():
    missing = missing_coverage()
    assert not missing, f"operations without a check: {missing}"


@check("cli", "cli.cmd_pack_train_analyze")
def cli_commands_run():
    from . import cli
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        src = tmp / "data.jsonl"
        src.write_text("".join(json.dumps({"id": f"s{i}", "length": n}) + "\n"
                               for i, n in enumerate([3, 3, 2, 2])))
        with contextlib.redirect_stdout(open(tmp / "out.txt", "w")):
            assert cli.main(["pack", str(src), "--capacity", "5", "--out", str(tmp / "m.json")]) == 0
            assert cli.main(["analyze", "--out", str(tmp / "a.json")]) == 0
            assert cli.main(["train", "--steps", "5", "--out", str(tmp / "run")]) == 0
        man = json.loads((tmp / "m.json").read_text())
        assert man["stats"]["n_bins"] == 2


# ---------------------------------------------------------------------------
# runner and fault injection
# ---------------------------------------------------------------------------

def _flipped_swiglu_bwd(orig):
    def bwd(dout, gate, up):
        dg, du = orig(dout, gate, up)
        return -dg, du
    return bwd


FAULTS = {"swiglu_bwd_sign": (layers, "swiglu_bwd", _flipped_swiglu_bwd)}


@contextlib.contextmanager
def injected(faults):
    saved = []
    try:
        for name in faults or ():
            if name not in FAULTS:
                raise ValueError(f"unknown fault {name!r}; known: {sorted(FAULTS)}")
            mod, attr, wrap = FAULTS[name]
            saved.append((mod, attr, getattr(mod, attr)))
            setattr(mod, attr, wrap(getattr(mod, attr)))
        yield
    finally:
        for mod, attr, orig in reversed(saved):
            setattr(mod, attr, orig)


def run_suites(suites=None, faults=None, keep_going: bool = False) -> dict:
    """Run registered checks; returns a JSON-serialisable report."""
    report = {"suites": {}, "failed": [], "operations_total": len(OPERATIONS),
              "operations_covered": len(OPERATIONS) - len(missing_coverage())}
    with injected(faults):
        for c in REGISTRY:
            if suites and c.suite not in suites:
                continue
            entry = report["suites"].setdefault(c.suite, {"passed": 0, "failed": 0, "checks": []})
            try:
                with np.errstate(over="ignore"):
                    c.fn()
                ok, msg = True, ""
            except Exception as exc:  # noqa: BLE001 - every failure is reported
                ok = False
                msg = f"{type(exc).__name__}: {exc}" if str(exc) else \
                    traceback.format_exc(limit=1).strip().splitlines()[-1]
            entry["passed" if ok else "failed"] += 1
            entry["checks"].append({"name": c.name, "covers": list(c.covers), "pass": ok,
                                    "message": msg})
            if not ok:
                report["failed"].append(f"{c.suite}.{c.name}")
                if not keep_going:
                    break
    report["pass"] = not report["failed"]
    return report
