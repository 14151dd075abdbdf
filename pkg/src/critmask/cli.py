"""Command-line entry point wiring corpora, backends, and pipelines.

Every run writes its primary outputs plus a manifest (resolved config, seed,
version) into the output directory, so reruns are reproducible byte-for-byte
apart from the manifest timestamp.

Exit codes: 0 success, 2 usage, 3 backend/capability, 4 data validation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .annotate import CriticalityPolicy, annotate_dataset, policy_from_config
from .core import (
    BackendError,
    CapabilityError,
    DataError,
    RunConfig,
    config_as_dict,
    default_prompt,
    load_samples,
    make_config,
    prompt_from_question,
    parse_config_file,
    read_masked_dataset,
    write_masked_dataset,
    write_samples,
)
from .evalx import collect_pass_data, pass_at_n, token_stats
from .generator import ToyBackend, greedy_decode
from .select import mask_to_example, top_fraction_mask, transfer_scores
from .tinylm import (
    AdamConfig,
    ModelConfig,
    ModelParams,
    SequenceExample,
    ToyTokenizer,
    TrainBatch,
    build_batch,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    synth_corpus,
    train,
)

log = logging.getLogger("critmask")

EXIT_USAGE = 2
EXIT_BACKEND = 3
EXIT_DATA = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="critmask",
        description="Critical-token annotation, masked-dataset tooling, and toy-model experiments.",
    )
    parser.add_argument("--version", action="version", version=f"critmask {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p: argparse.ArgumentParser, *, needs_output: bool = True) -> None:
        p.add_argument("--config", type=Path, help="key-value config file")
        p.add_argument("--input", type=Path, help="input corpus or dataset (jsonl)")
        if needs_output:
            p.add_argument("--output", type=Path, required=True, help="output directory")
        p.add_argument("--backend", choices=("toy", "remote"), default="toy")
        p.add_argument("--endpoint", help="remote backend base URL")
        p.add_argument("--model", default="toy", help="remote model tag")
        p.add_argument("--checkpoint", type=Path, help="toy model checkpoint (.npz)")
        p.add_argument("--policy", choices=("strict2", "strict3", "union3", "graded3"))
        p.add_argument("--k", type=int)
        p.add_argument("--fraction", type=float, help="override transfer_fraction")
        p.add_argument("--n", type=int, help="samples per question for eval-pass")
        p.add_argument("--temperature", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--parallelism", type=int)
        p.add_argument("--max-new-tokens", type=int, default=None)
        p.add_argument(
            "--sequential", action="store_true",
            help="force the unbatched reference annotator (timing/oracle comparison)",
        )

    p = sub.add_parser("annotate", help="counterfactual criticality annotation")
    common(p)
    p.add_argument("--include-sampled", action="store_true",
                   help="also sample-until-correct for greedy failures")

    p = sub.add_parser("train-toy", help="train the toy model")
    common(p)
    p.add_argument("--objective", choices=("sft", "cft", "dft"), default="sft")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--refs", type=Path, help="reference solutions jsonl (id, solution)")
    p.add_argument("--masks", type=Path, help="masked dataset to train from")
    p.add_argument("--init", type=Path, help="starting checkpoint (default: fresh init)")
    p.add_argument("--arch", default="32x2x2x96",
                   help="embed_dim x heads x layers x ffn for fresh models")
    p.add_argument("--context-len", type=int, default=256)

    p = sub.add_parser("eval-pass", help="Pass@N evaluation")
    common(p)

    p = sub.add_parser("transfer-score", help="probability-gap scores and top-fraction masks")
    common(p)
    p.add_argument("--tuned-checkpoint", type=Path, required=True)
    p.add_argument("--refs", type=Path, required=True,
                   help="responses to score: jsonl records {id, solution}")

    p = sub.add_parser("stats", help="token statistics split by mask positivity")
    common(p)
    p.add_argument("--masks", type=Path, required=True)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    common(p)
    p.add_argument("--objective", choices=("sft", "cft", "dft"), default="cft")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--size", type=int, default=100)
    p.add_argument("--min-steps", type=int, default=2)
    p.add_argument("--max-steps", type=int, default=4)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {
        "k": args.k,
        "policy": args.policy,
        "parallelism": args.parallelism,
        "sampling_temperature": args.temperature,
        "transfer_fraction": args.fraction,
        "seed": args.seed,
        "max_continuation_tokens": args.max_new_tokens,
    }
    return make_config(file_values, overrides)


def make_backend(args: argparse.Namespace):
    if args.backend == "remote":
        if not args.endpoint:
            raise DataError("--endpoint is required for the remote backend")
        from .remote import RemoteBackend

        return RemoteBackend(args.endpoint, args.model)
    if not args.checkpoint:
        raise DataError("--checkpoint is required for the toy backend")
    model, vocab = load_checkpoint(args.checkpoint)
    return ToyBackend(model, ToyTokenizer(vocab), tag=f"toy:{args.checkpoint.name}")


def write_manifest(outdir: Path, args: argparse.Namespace, config: RunConfig | None) -> None:
    manifest = {
        "command": args.subcommand,
        "argv": sys.argv[1:],
        "config": config_as_dict(config) if config else None,
        "seed": config.seed if config else None,
        "version": __version__,
        "timestamp": time.time(),
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _load_refs(path: Path) -> dict[str, str]:
    refs = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                refs[str(rec["id"])] = str(rec["solution"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: malformed reference record: {exc}")
    return refs


def cmd_annotate(args: argparse.Namespace, outdir: Path) -> None:
    config = resolve_config(args)
    backend = make_backend(args)
    samples = load_samples(args.input)
    policy = policy_from_config(config)
    records, stats, failures = annotate_dataset(
        samples, backend, policy, config,
        sequential=args.sequential,
        include_sampled=args.include_sampled,
        max_new_tokens=args.max_new_tokens,
    )
    write_masked_dataset(records, outdir / "masked.jsonl")
    (outdir / "stats.json").write_text(json.dumps(stats.as_dict(), indent=2) + "\n")
    if failures:
        (outdir / "failures.json").write_text(
            json.dumps([f.__dict__ for f in failures], indent=2) + "\n"
        )
    write_manifest(outdir, args, config)
    log.info("annotated %d/%d samples, critical ratio %.4f",
             stats.num_greedy_correct, stats.num_samples, stats.critical_ratio)


def _parse_arch(spec: str) -> tuple[int, int, int, int]:
    try:
        d, h, l, f = (int(x) for x in spec.split("x"))
        return d, h, l, f
    except ValueError as exc:
        raise DataError(f"bad --arch {spec!r}, expected DxHxLxF") from exc


def cmd_train_toy(args: argparse.Namespace, outdir: Path) -> None:
    config = resolve_config(args)
    if args.init:
        model, vocab = load_checkpoint(args.init)
        tok = ToyTokenizer(vocab)
    else:
        tok = ToyTokenizer()
        d, h, l, f = _parse_arch(args.arch)
        model = ModelParams.init(
            ModelConfig(
                vocab_size=tok.vocab_size, context_len=args.context_len,
                embed_dim=d, n_heads=h, n_layers=l, ffn_dim=f, seed=config.seed,
            )
        )
    if args.masks:
        records = read_masked_dataset(args.masks)
        weighted = args.objective == "cft"
        examples = [
            SequenceExample(
                tuple(tok.encode(prompt_from_question(rec.question))),
                rec.token_ids,
                rec.weights if weighted else tuple(1.0 for _ in rec.weights),
            )
            for rec in records
        ]
        eos_weight = 0.0 if weighted else 1.0
    elif args.input and args.refs:
        samples = load_samples(args.input)
        refs = _load_refs(args.refs)
        missing = [s.id for s in samples if s.id not in refs]
        if missing:
            raise DataError(f"missing reference solutions for ids {missing[:5]}")
        examples = [
            SequenceExample(
                tuple(tok.encode(default_prompt(s))),
                tuple(tok.encode(refs[s.id])),
                tuple(1.0 for _ in tok.encode(refs[s.id])),
            )
            for s in samples
        ]
        eos_weight = 1.0
    else:
        raise DataError("train-toy needs either --masks or --input with --refs")
    curve = train(
        model, examples, args.objective, steps=args.steps, batch_size=args.batch_size,
        pad_id=tok.eos_id, eos_id=tok.eos_id, seed=config.seed,
        adam=AdamConfig(lr=args.lr, total_steps=args.steps), eos_weight=eos_weight,
    )
    save_checkpoint(model, tok.vocab, outdir / "model.npz")
    with open(outdir / "loss_curve.jsonl", "w") as fh:
        for step, loss in enumerate(curve):
            fh.write(json.dumps({"step": step, "loss": loss}) + "\n")
    write_manifest(outdir, args, config)
    log.info("trained %d steps, final loss %.4f", len(curve), curve[-1] if curve else float("nan"))


def cmd_eval_pass(args: argparse.Namespace, outdir: Path) -> None:
    config = resolve_config(args)
    backend = make_backend(args)
    samples = load_samples(args.input)
    n = args.n or 10
    matrix = collect_pass_data(
        samples, backend, n, seed=config.seed,
        temperature=config.sampling_temperature,
        max_new_tokens=args.max_new_tokens,
        parallelism=config.parallelism,
    )
    report = pass_at_n(matrix)
    (outdir / "pass_report.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    write_manifest(outdir, args, config)
    log.info("Pass@%d = %.4f over %d questions", n, report.pass_at[n], len(matrix))


def cmd_transfer_score(args: argparse.Namespace, outdir: Path) -> None:
    config = resolve_config(args)
    base_backend = make_backend(args)
    tuned_model, tuned_vocab = load_checkpoint(args.tuned_checkpoint)
    tuned_backend = ToyBackend(
        tuned_model, ToyTokenizer(tuned_vocab), tag=f"toy:{args.tuned_checkpoint.name}"
    )
    samples = load_samples(args.input)
    refs = _load_refs(args.refs)
    records = []
    for sample in samples:
        if sample.id not in refs:
            continue
        prompt = default_prompt(sample)
        scores = transfer_scores(
            prompt, refs[sample.id], tuned_backend, base_backend, sample_id=sample.id
        )
        mask = top_fraction_mask(scores, config.transfer_fraction)
        texts, ids, _, _ = base_backend.force_score(prompt, refs[sample.id])
        traj_like = _scored_trajectory(sample.id, prompt, texts, ids, base_backend)
        rec = mask_to_example(
            sample, traj_like, mask,
            policy=f"transfer@{config.transfer_fraction:g}",
            backend_tag=base_backend.descriptor().tag,
        )
        if rec is not None:
            records.append(rec)
    write_masked_dataset(records, outdir / "masked.jsonl")
    write_manifest(outdir, args, config)
    log.info("scored %d responses", len(records))


def _scored_trajectory(sample_id, prompt, texts, ids, backend):
    from .generator import Trajectory

    _, _, lps, topk = backend.force_score(prompt, "".join(texts))
    return Trajectory(
        sample_id=sample_id, prompt=prompt, token_texts=texts, token_ids=ids,
        chosen_logprob=lps, topk=topk, decode_mode="sampled", finished=True,
    )


def cmd_stats(args: argparse.Namespace, outdir: Path) -> None:
    config = resolve_config(args)
    backend = make_backend(args)
    records = read_masked_dataset(args.masks)
    trajectories = []
    masks = []
    for rec in records:
        prompt = prompt_from_question(rec.question)
        traj = _scored_trajectory(
            rec.sample_id, prompt, rec.token_texts, rec.token_ids, backend
        )
        trajectories.append(traj)
        masks.append(list(rec.weights))
    report = token_stats(trajectories, masks, backend)
    (outdir / "token_stats.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    (outdir / "token_stats.txt").write_text(report.render_table() + "\n")
    write_manifest(outdir, args, config)
    print(report.render_table())


def cmd_grad_check(args: argparse.Namespace, outdir: Path) -> None:
    config = resolve_config(args)
    if args.checkpoint:
        model, vocab = load_checkpoint(args.checkpoint)
    else:
        tok = ToyTokenizer()
        model = ModelParams.init(
            ModelConfig(
                vocab_size=tok.vocab_size, context_len=24, embed_dim=8, n_heads=2,
                n_layers=2, ffn_dim=16, seed=config.seed,
            )
        )
    rng = np.random.default_rng(config.seed)
    b, t = 2, 8
    v = model.cfg.vocab_size
    ids = rng.integers(0, v, size=(b, t))
    gold = rng.integers(0, v, size=(b, t))
    mask = np.ones((b, t), dtype=bool)
    mask[-1, t - 2:] = False
    weights = rng.random((b, t)) * mask
    batch = TrainBatch(token_ids=ids, gold=gold, weights=weights, padding_mask=mask)
    report = grad_check(model, batch, args.objective, seed=config.seed)
    (outdir / "grad_report.json").write_text(
        json.dumps(
            {
                "max_relative_error": report.max_relative_error,
                "worst_parameter_name": report.worst_parameter_name,
                "num_checked": report.num_checked,
                "objective": args.objective,
            },
            indent=2,
        )
        + "\n"
    )
    write_manifest(outdir, args, config)
    print(f"max_relative_error={report.max_relative_error:.3e} "
          f"worst={report.worst_parameter_name} checked={report.num_checked}")


def cmd_synth(args: argparse.Namespace, outdir: Path) -> None:
    config = resolve_config(args)
    samples, solutions = synth_corpus(
        config.seed, args.size, min_steps=args.min_steps, max_steps=args.max_steps
    )
    write_samples(samples, outdir / "corpus.jsonl")
    with open(outdir / "refs.jsonl", "w") as fh:
        for s, sol in zip(samples, solutions):
            fh.write(json.dumps({"id": s.id, "solution": sol}) + "\n")
    write_manifest(outdir, args, config)
    log.info("wrote %d samples", len(samples))


COMMANDS = {
    "annotate": cmd_annotate,
    "train-toy": cmd_train_toy,
    "eval-pass": cmd_eval_pass,
    "transfer-score": cmd_transfer_score,
    "stats": cmd_stats,
    "grad-check": cmd_grad_check,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    outdir: Path = args.output
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.subcommand](args, outdir)
        return 0
    except (CapabilityError, BackendError) as exc:
        _write_error(outdir, args, exc, EXIT_BACKEND)
        return EXIT_BACKEND
    except (DataError, FileNotFoundError) as exc:
        _write_error(outdir, args, exc, EXIT_DATA)
        return EXIT_DATA


def _write_error(outdir: Path, args: argparse.Namespace, exc: Exception, code: int) -> None:
    record = {"error": str(exc), "type": type(exc).__name__, "exit_code": code,
              "command": args.subcommand}
    print(json.dumps(record), file=sys.stderr)
    try:
        (outdir / "error.json").write_text(json.dumps(record, indent=2) + "\n")
    except OSError:
        pass


if __name__ == "__main__":
    sys.exit(main())
