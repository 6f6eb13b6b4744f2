"""Command-line entry point: verify, train, pack, analyze, bench.

Exit codes: 0 success, 1 verification/test failure, 2 bad configuration.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    steps: int = 300
    optimizer: str = "adamw"
    adapter: str = "full"
    batch_size: int = 8
    seq_len: int = 16
    n_layers: int = 2
    hidden: int = 32
    n_heads: int = 4
    ffn_dim: int = 64
    vocab: int = 97
    lora_r: int = 4
    lora_alpha: float = 8.0
    use_loraplus: bool = False
    lr_ratio: float = 16.0
    lr: float | None = None
    weight_decay: float = 0.01
    warmup_ratio: float = 0.03
    max_grad_norm: float = 1.0
    verify_every: int = 50
    verify_gradients: bool = False
    seed: int = 0

    @classmethod
    def from_sources(cls, path=None, overrides=None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        if path:
            try:
                values = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            if not isinstance(values, dict):
                raise ConfigError("config file must hold a JSON object")
            unknown = sorted(set(values) - known)
            if unknown:
                raise ConfigError(f"unknown config keys: {unknown}")
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        try:
            cfg = cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def validate(self):
        from .trainer import OPTIMIZERS
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.steps < 1 or self.batch_size < 1 or self.seq_len < 2:
            raise ConfigError("steps >= 1, batch_size >= 1 and seq_len >= 2 are required")
        if self.hidden % self.n_heads or (self.hidden // self.n_heads) % 2:
            raise ConfigError("hidden must split into an even head_dim per head")

    def model_config(self):
        from .trainer import ModelConfig
        adapter = self.adapter
        if self.use_loraplus:
            if adapter == "full":
                adapter = "lora"
            adapter = "lora+" if adapter == "lora" else adapter
        try:
            return ModelConfig(n_layers=self.n_layers, hidden=self.hidden, n_heads=self.n_heads,
                               head_dim=self.hidden // self.n_heads, ffn_dim=self.ffn_dim,
                               vocab=self.vocab, max_seq=self.seq_len, adapter=adapter,
                               lora_r=self.lora_r, lora_alpha=self.lora_alpha,
                               lora_ratio=self.lr_ratio, seed=self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    return text


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_verify(args) -> int:
    from . import suites
    try:
        report = suites.run_suites(args.suite or None, args.inject_fault, args.keep_going)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(_emit(report, args.report))
    if not report["pass"]:
        print(f"FAILED: {', '.join(report['failed'])}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import (ToyModel, VerificationError, copy_task_batches, gradient_check,
                          gradient_check_failures, make_batch, train, verify)
    overrides = {k: getattr(args, k) for k in (
        "steps", "optimizer", "adapter", "batch_size", "seq_len", "lora_r", "lora_alpha",
        "lr_ratio", "lr", "seed")}
    overrides["use_loraplus"] = True if args.use_loraplus else None
    overrides["verify_gradients"] = True if args.verify_gradients else None
    cfg = RunConfig.from_sources(args.config, overrides)
    model = ToyModel(cfg.model_config())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    probe = make_batch([[1 + (i % (cfg.vocab - 1)) for i in range(cfg.seq_len)]])
    result = {"config": cfg.to_dict()}
    if cfg.verify_gradients:
        rep = gradient_check(model, probe, max_entries=4)
        bad = gradient_check_failures(rep)
        result["gradient_check"] = {"checked": len(rep), "failed": bad}
        if bad:
            _emit(result, out / "report.json")
            print(f"gradient check failed for {bad}", file=sys.stderr)
            return EXIT_FAIL
    batches = copy_task_batches(cfg.batch_size, cfg.seq_len, cfg.vocab, cfg.seed)
    try:
        log = train(model, batches, cfg.optimizer, cfg.steps, cfg.lr, cfg.warmup_ratio,
                    cfg.max_grad_norm, cfg.weight_decay, cfg.verify_every,
                    metrics_path=out / "metrics.jsonl")
    except VerificationError as exc:
        result["error"] = str(exc)
        _emit(result, out / "report.json")
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    final = verify(model, next(batches))
    head = float(np.mean([r["loss"] for r in log[:10]]))
    tail = float(np.mean([r["loss"] for r in log[-10:]]))
    result.update(initial_loss=head, final_loss=tail, verification=final.to_dict())
    print(_emit(result, out / "report.json"))
    return EXIT_OK if final.passed else EXIT_FAIL


def cmd_pack(args) -> int:
    from .packing import pack_bfd, read_lengths_jsonl, waste_stats
    if args.capacity < 1:
        raise ConfigError("--capacity must be >= 1")
    try:
        ids, lengths = read_lengths_jsonl(args.input)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {args.input}: {exc}") from None
    packed = pack_bfd(lengths, args.capacity, ids)
    manifest = packed.manifest()
    if lengths:
        manifest["stats"].update(
            {k: v for k, v in waste_stats(lengths, max(lengths), args.capacity).items()
             if k in ("pad_waste", "mean_length", "lower_bound_bins")})
    text = _emit(manifest, args.out)
    if not args.out:
        print(text)
    else:
        print(f"{len(packed.bins)} bins, packed waste {packed.waste():.4f}, "
              f"{len(packed.skipped)} skipped -> {args.out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from . import analysis
    hw = analysis.PRESETS.get(args.hardware)
    if hw is None:
        raise ConfigError(f"unknown hardware preset {args.hardware!r}")
    rows = analysis.headline_numbers(hw)
    print("\n".join(f"{label}={text}" for label, _, text in rows))
    if args.out:
        _emit({"hardware": hw.name, "rows": [{"label": l, "value": v, "text": t}
                                             for l, v, t in rows]}, args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    """Peak scratch memory and wall time of chunked vs full-logit cross-entropy."""
    from . import losses
    rng = np.random.default_rng(args.seed)
    h = rng.normal(size=(args.rows, args.hidden))
    W = rng.normal(size=(args.vocab, args.hidden))
    t = rng.integers(0, args.vocab, size=args.rows)
    chunk = args.chunk or losses.select_chunk_size(args.vocab)
    cfg = losses.CceConfig(chunk)
    t0 = time.perf_counter()
    _, peak_cce = losses.peak_allocation(losses.cce_fwd, h, W, t, cfg)
    t1 = time.perf_counter()
    _, peak_naive = losses.peak_allocation(lambda: losses.ce_naive(h @ W.T, t, cfg))
    t2 = time.perf_counter()
    report = {
        "rows": args.rows, "hidden": args.hidden, "vocab": args.vocab, "chunk": chunk,
        "peak_bytes": {"chunked": peak_cce, "naive": peak_naive},
        "timing": {"chunked_s": t1 - t0, "naive_s": t2 - t1},
    }
    print(_emit(report, args.out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chronicle-kernels", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run the oracle/property self-check suites")
    v.add_argument("--suite", action="append", help="restrict to a suite (repeatable)")
    v.add_argument("--inject-fault", action="append", default=None,
                   help="deliberately break an operation (e.g. swiglu_bwd_sign)")
    v.add_argument("--keep-going", action="store_true", help="do not stop at the first failure")
    v.add_argument("--report", help="also write the JSON report here")
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train", help="train the toy model on the copy task")
    t.add_argument("--config", help="JSON file with RunConfig keys")
    t.add_argument("--steps", type=int)
    t.add_argument("--optimizer", choices=["adamw", "schedulefree", "muon", "atan2"])
    t.add_argument("--adapter", choices=["full", "lora", "lora+", "dora"])
    t.add_argument("--batch_size", type=int)
    t.add_argument("--seq_len", type=int)
    t.add_argument("--lora_r", type=int)
    t.add_argument("--lora_alpha", type=float)
    t.add_argument("--use_loraplus", action="store_true")
    t.add_argument("--lr_ratio", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--verify_gradients", action="store_true")
    t.add_argument("--out", default="run", help="output directory")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("pack", help="BFD-pack sequences from a JSONL file")
    p.add_argument("input", help='JSONL with {"id", "length"} or {"id", "tokens"} records')
    p.add_argument("--capacity", type=int, required=True)
    p.add_argument("--out", help="manifest path (default: print)")
    p.set_defaults(func=cmd_pack)

    a = sub.add_parser("analyze", help="print the closed-form calculator table")
    a.add_argument("--hardware", default="A100")
    a.add_argument("--out", help="also write JSON here")
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("bench", help="memory/time of chunked vs naive cross-entropy")
    b.add_argument("--rows", type=int, default=64)
    b.add_argument("--hidden", type=int, default=64)
    b.add_argument("--vocab", type=int, default=32000)
    b.add_argument("--chunk", type=int, default=0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
