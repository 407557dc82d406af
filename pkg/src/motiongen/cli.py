"""Command-line pipeline driver.

Subcommands: prepare-data, train-vqvae, train-lm, generate, evaluate, render.
Each command writes its artifacts atomically plus a manifest (config hash,
seed, version). Errors exit nonzero with a machine-readable JSON object on
stderr. MGPT_CACHE overrides the default checkpoint cache directory.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import data as data_mod
from . import generator as gen_mod
from . import instructions as instr_mod
from . import lm as lm_mod
from . import metrics as metrics_mod
from . import plots as plots_mod
from . import vqvae as vq_mod
from .errors import ConfigError, DomainError, MotionGenError
from .io_utils import write_manifest


def cache_dir() -> Path:
    return Path(os.environ.get("MGPT_CACHE", Path.home() / ".cache" / "motiongen"))


def _load_config(path: str | None, section: str) -> dict:
    if not path:
        return {}
    cfg_path = Path(path)
    if not cfg_path.exists():
        raise ConfigError(f"config file not found: {cfg_path}")
    blob = yaml.safe_load(cfg_path.read_text()) or {}
    if not isinstance(blob, dict):
        raise ConfigError(f"config file {cfg_path} must hold a mapping")
    section_blob = blob.get(section, {})
    if not isinstance(section_blob, dict):
        raise ConfigError(f"config section '{section}' must be a mapping")
    return section_blob


def _merged(args_value, config: dict, key: str, default):
    """Flags override file values, file values override defaults."""
    if args_value is not None:
        return args_value
    return config.get(key, default)


def _require_artifact(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"missing upstream artifact: {what} at {p}")
    return p


# --- subcommands ------------------------------------------------------------

def cmd_prepare_data(args) -> None:
    out = Path(args.out)
    effective = {}
    if args.synth:
        corpus = data_mod.synth_corpus(
            seed=args.seed,
            n_clips=args.n,
            feature_dim=args.dim,
            length_range=(args.min_len, args.max_len),
        )
        data_mod.export_corpus(corpus, out)
        effective.update(
            synth=True, seed=args.seed, n=args.n, dim=args.dim,
            min_len=args.min_len, max_len=args.max_len,
        )
        print(f"wrote {len(corpus.motions)} clips to {out}")
    elif args.data:
        corpus = data_mod.load_dataset(args.data)
        effective.update(data=str(args.data))
        if not args.vqvae:
            raise ConfigError("instruction export from an existing dataset needs --vqvae")
    else:
        raise ConfigError("prepare-data needs either --synth or --data")

    if args.vqvae:
        model = vq_mod.load_vqvae(_require_artifact(args.vqvae, "VQ-VAE checkpoint"))
        records = instr_mod.build_instruction_corpus(
            corpus, model,
            variant=instr_mod.PromptVariant(args.variant),
            seed=args.seed,
            split=args.split,
        )
        jsonl = out / f"instructions_{args.split}.jsonl"
        instr_mod.save_instruction_corpus(records, jsonl)
        effective.update(vqvae=str(args.vqvae), split=args.split, variant=args.variant)
        print(f"wrote {len(records)} instruction records to {jsonl}")
    write_manifest(out, "prepare-data", effective, args.seed)


def cmd_train_vqvae(args) -> None:
    cfg = _load_config(args.config, "vqvae")
    corpus = data_mod.load_dataset(_require_artifact(args.data, "dataset directory"))
    model_cfg = vq_mod.VqVaeConfig(
        feature_dim=corpus.feature_dim,
        codebook_size=_merged(args.codebook_size, cfg, "codebook_size", 64),
        latent_dim=_merged(args.latent_dim, cfg, "latent_dim", 32),
        downsample=_merged(args.downsample, cfg, "downsample", 4),
        beta=_merged(args.beta, cfg, "beta", 0.25),
        hidden_dim=_merged(None, cfg, "hidden_dim", 64),
    )
    steps = _merged(args.steps, cfg, "steps", 2000)
    seed = _merged(args.seed, cfg, "seed", 0)
    lr = _merged(args.lr, cfg, "lr", 2e-3)
    result = vq_mod.train_vqvae(corpus, model_cfg, steps=steps, lr=lr, seed=seed)
    out = Path(args.out)
    vq_mod.save_vqvae(result.model, out, stats=corpus.stats)
    effective = {"vqvae": {**model_cfg.__dict__, "steps": steps, "lr": lr, "seed": seed}}
    write_manifest(out.parent, "train-vqvae", effective, seed)
    final = result.log[-1]
    print(
        f"trained {steps} steps: recon {final.recon:.4f}, total {final.total:.4f}, "
        f"codebook usage {result.usage_fraction:.0%} -> {out}"
    )


def cmd_train_lm(args) -> None:
    cfg = _load_config(args.config, "lm")
    records = instr_mod.load_instruction_corpus(_require_artifact(args.data, "instruction corpus"))
    vq_model = vq_mod.load_vqvae(_require_artifact(args.vqvae, "VQ-VAE checkpoint"))
    motion_vocab = vq_model.config.codebook_size
    vocab = lm_mod.build_vocab(records, motion_vocab)

    lm_cfg = lm_mod.LmConfig(
        n_layers=_merged(args.layers, cfg, "n_layers", 4),
        n_heads=_merged(None, cfg, "n_heads", 4),
        model_dim=_merged(args.dim, cfg, "model_dim", 256),
        ffn_dim=_merged(None, cfg, "ffn_dim", 512),
        max_seq_len=_merged(None, cfg, "max_seq_len", 256),
    )
    seed = _merged(args.seed, cfg, "seed", 0)
    base_path = Path(args.base)
    if args.init_base:
        base = lm_mod.pretrain_base(
            records, vocab, lm_cfg,
            steps=_merged(args.pretrain_steps, cfg, "pretrain_steps", 200),
            seed=seed,
        )
        lm_mod.save_base(base, vocab, base_path)
    else:
        base, vocab = lm_mod.load_base(_require_artifact(args.base, "base LM checkpoint"))

    lora = lm_mod.LoraConfig(
        r=_merged(args.lora_r, cfg, "lora_r", 8),
        alpha=_merged(args.lora_alpha, cfg, "lora_alpha", 16.0),
    )
    schedule = lm_mod.TrainSchedule(
        steps=_merged(args.steps, cfg, "steps", 500),
        lr=_merged(args.lr, cfg, "lr", 3e-3),
        weight_decay=_merged(None, cfg, "weight_decay", 0.01),
        batch_size=_merged(args.batch_size, cfg, "batch_size", 16),
        micro_batch=_merged(args.micro_batch, cfg, "micro_batch", 4),
        seed=seed,
    )
    result = lm_mod.train_lm(records, base, lora, schedule)
    out = Path(args.out)
    lm_mod.save_adapter(result.model, out)
    effective = {
        "lm": lm_cfg.__dict__,
        "lora": {"r": lora.r, "alpha": lora.alpha, "targets": list(lora.targets)},
        "schedule": {k: v for k, v in schedule.__dict__.items()},
    }
    write_manifest(out.parent, "train-lm", effective, seed)
    print(f"final loss {result.final_loss:.4f} -> {out}")


def _load_bundle(args) -> gen_mod.ModelBundle:
    vq_model = vq_mod.load_vqvae(_require_artifact(args.vqvae, "VQ-VAE checkpoint"))
    if vq_model.stats is None:
        raise ConfigError(f"{args.vqvae} carries no normalization stats; re-train with train-vqvae")
    base, vocab = lm_mod.load_base(_require_artifact(args.base, "base LM checkpoint"))
    lm_mod.load_adapter(base, _require_artifact(args.adapter, "adapter checkpoint"))
    return gen_mod.ModelBundle(vqvae=vq_model, lm=base, vocab=vocab, stats=vq_model.stats)


def cmd_generate(args) -> None:
    bundle = _load_bundle(args)
    sampling = gen_mod.SamplingConfig(
        mode=args.mode, k=args.top_k, temperature=args.temperature,
        max_new_tokens=args.max_new_tokens, seed=args.seed,
    )
    if args.batch:
        records = instr_mod.load_instruction_corpus(_require_artifact(args.batch, "instruction corpus"))
        out_dir = Path(args.out_dir or "results")
        out_dir.mkdir(parents=True, exist_ok=True)
        output = gen_mod.batch_generate(records, bundle, sampling)
        rows = []
        for i, item in enumerate(output.items):
            row = item.record.to_json()
            if item.result is not None:
                gen_file = f"gen_{i:05d}.mfa"
                data_mod.write_mfa(out_dir / gen_file, item.result.motion.frames)
                row.update(gen_file=gen_file, stop_reason=item.result.stop_reason)
            else:
                row.update(gen_file=None, error=item.error)
            rows.append(row)
        (out_dir / "index.jsonl").write_text("\n".join(json.dumps(r, sort_keys=True) for r in rows) + "\n")
        write_manifest(out_dir, "generate", {"sampling": sampling.__dict__}, args.seed)
        print(f"{len(output.items) - output.failures}/{len(output.items)} generated, "
              f"{output.failures} parse failures -> {out_dir}")
        return

    task = instr_mod.TaskKind(args.task)
    if not args.out:
        raise ConfigError("single-sample generation requires --out <mfa file>")
    if task != instr_mod.TaskKind.TEXT_ONLY and not args.cond:
        raise ConfigError(f"task '{args.task}' requires --cond <mfa file>")
    if task == instr_mod.TaskKind.TEXT_ONLY and args.cond:
        raise ConfigError("--cond is only valid for pose-conditioned tasks")
    cond = data_mod.read_mfa(args.cond) if args.cond else None
    result = gen_mod.generate_motion(task, args.text, cond, bundle, sampling)
    out = Path(args.out)
    data_mod.write_mfa(out, result.motion.frames)
    if args.dump_prompt:
        ids = result.prompt_ids
        sys.stdout.write(f"prompt ids: {ids}\nraw answer: {result.raw_answer}\n")
    write_manifest(out.parent, "generate", {"sampling": sampling.__dict__, "task": args.task}, args.seed)
    print(f"{len(result.tokens)} tokens, stop={result.stop_reason} -> {out}")


def cmd_evaluate(args) -> None:
    gt = data_mod.load_dataset(_require_artifact(args.gt, "ground-truth dataset"))
    extractor_path = Path(args.extractor)
    if args.fit_extractor:
        extractor = metrics_mod.train_bi_encoder(gt, seed=args.seed)
        metrics_mod.save_bi_encoder(extractor, extractor_path)
    else:
        extractor = metrics_mod.load_bi_encoder(_require_artifact(args.extractor, "feature extractor"))

    results_dir = _require_artifact(args.results, "results directory")
    index = results_dir / "index.jsonl"
    if not index.exists():
        raise ConfigError(f"missing upstream artifact: results index at {index}")
    items = []
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        record = instr_mod.InstructionRecord.from_json(row)
        if row.get("gen_file"):
            frames = data_mod.read_mfa(results_dir / row["gen_file"])
            result = gen_mod.GenerationResult(
                tokens=[0],
                motion=data_mod.MotionSequence(frames, source_id=record.motion_id),
                raw_answer="",
                stop_reason=row.get("stop_reason", "eos"),
            )
            items.append(gen_mod.BatchItem(record=record, result=result))
        else:
            items.append(gen_mod.BatchItem(record=record, result=None, error=row.get("error")))

    config = metrics_mod.EvalConfig(
        pool_size=args.pool_size,
        diversity_subset=args.diversity_subset,
        r_precision_seed=args.seed,
        diversity_seed=args.seed,
        global_seed=args.seed,
    )
    report = metrics_mod.evaluate(gen_mod.BatchOutput(items=items), gt, extractor, config)
    out = Path(args.out)
    report.save(out)
    plots_mod.render_metrics(report.metrics, out.parent, stem=out.stem + "_metrics")
    write_manifest(out.parent, "evaluate", report.config, args.seed)
    print(report.to_json())


def cmd_render(args) -> None:
    frames = data_mod.read_mfa(_require_artifact(args.input, "motion file"))
    motion = data_mod.MotionSequence(frames, source_id=Path(args.input).stem)
    dims = [int(d) for d in args.dims.split(",")] if args.dims else list(range(min(4, frames.shape[1])))
    png, csv_path = plots_mod.render_trajectories(motion, dims, args.out_dir, stem=motion.source_id)
    print(f"wrote {png} and {csv_path}")


# --- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motiongen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="build or export datasets and instruction corpora")
    p.add_argument("--synth", action="store_true")
    p.add_argument("--data", help="existing dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--min-len", type=int, default=32)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--vqvae", help="checkpoint for instruction-corpus export")
    p.add_argument("--split", default="train")
    p.add_argument("--variant", default="v0", choices=["v0", "v1", "v2"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train-vqvae", help="train the motion tokenizer")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--codebook-size", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--downsample", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_vqvae)

    p = sub.add_parser("train-lm", help="pretrain/freeze the base LM and fit adapters")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="instruction corpus jsonl")
    p.add_argument("--vqvae", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--init-base", action="store_true", help="pretrain and save the base first")
    p.add_argument("--pretrain-steps", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--lora-r", type=int)
    p.add_argument("--lora-alpha", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--micro-batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("generate", help="generate motion from text (+ optional pose condition)")
    p.add_argument("--task", choices=["text", "init", "last", "key"], default="text")
    p.add_argument("--text", default="")
    p.add_argument("--cond", help="mfa file with condition frames")
    p.add_argument("--vqvae", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--mode", choices=["greedy", "top-k", "temperature"], default="greedy")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-new-tokens", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-prompt", action="store_true")
    p.add_argument("--batch", help="instruction corpus jsonl for batch generation")
    p.add_argument("--out", help="output mfa file (single mode)")
    p.add_argument("--out-dir", help="output directory (batch mode)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generated results against ground truth")
    p.add_argument("--results", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--extractor", required=True)
    p.add_argument("--fit-extractor", action="store_true")
    p.add_argument("--pool-size", type=int, default=32)
    p.add_argument("--diversity-subset", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="plot per-frame feature trajectories")
    p.add_argument("--input", required=True)
    p.add_argument("--dims", help="comma-separated feature dims, default first 4")
    p.add_argument("--out-dir", default="plots")
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except MotionGenError as exc:
        payload = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(payload), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
