"""Command-line pipeline: model init, data synthesis, embedding, training, eval.

Exit codes: 0 success, 1 usage/config error, 2 data or file-format error,
3 numeric abort. Every run writes its fully resolved configuration next to its
outputs so results are reproducible from the logged config plus seeds.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import align, config, evaluation, facets, lm, prompts, store, synth
from .errors import (
    CapacityError,
    ConfigError,
    FacetClipError,
    FormatError,
    NotFoundError,
    NumericError,
)
from .image import preprocess_file
from .vit import ViTConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # map argparse's exit(2) onto exit code 1
        raise UsageError(message)


def _prompt_set(cfg: dict) -> prompts.PromptSet:
    kind = cfg["prompts"]["set"]
    if kind == "default":
        return prompts.default_prompts()
    if kind == "builtin":
        return prompts.builtin_prompts()
    if kind == "file":
        if not cfg["prompts"]["file"]:
            raise ConfigError("prompts.set is 'file' but prompts.file is not set")
        return prompts.load_prompts(cfg["prompts"]["file"])
    raise ConfigError(f"unknown prompts.set {kind!r}")


def _vit_config(cfg: dict) -> ViTConfig:
    v = cfg["vit"]
    return ViTConfig(image_size=v["image_size"], patch_size=v["patch_size"], d_v=v["d_v"],
                     n_layers=v["n_layers"], n_heads=v["n_heads"], global_pool=v["global_pool"])


def _log_config(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run-config.json").write_text(config.dump(resolved), encoding="utf-8")
    print(f"resolved config -> {out_dir / 'run-config.json'}")


def _load_images(corpus: store.Corpus, image_size: int) -> list[np.ndarray]:
    ordered = sorted(corpus, key=lambda r: r.sample_id)
    return [preprocess_file(r.image_path, image_size) for r in ordered]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_init_lm(args) -> int:
    cfg = config.resolve(args.config, {"lm": {"preset": args.preset, "seed": args.seed}})
    out = Path(args.out)
    model = lm.init_lm(lm.PRESETS[cfg["lm"]["preset"]], seed=cfg["lm"]["seed"])
    out.parent.mkdir(parents=True, exist_ok=True)
    lm.save_weights(model, out)
    _log_config(out.parent, cfg)
    print(f"wrote {out} ({cfg['lm']['preset']}, seed {cfg['lm']['seed']})")
    return 0


def cmd_synth_data(args) -> int:
    cfg = config.resolve(args.config, None)
    out = Path(args.out)
    long_c, raw_c = synth.generate_dataset(args.n, args.seed, out)
    _log_config(out, cfg)
    print(f"wrote {len(long_c)} samples under {out} (corpus.jsonl, corpus_raw.jsonl, meta.jsonl)")
    return 0


def cmd_embed(args) -> int:
    cfg = config.resolve(args.config, {"store": {"shard_size": args.shard_size}}
                         if args.shard_size else None)
    model = lm.load_weights(args.lm)
    corpus = store.load_corpus(args.corpus)
    ps = _prompt_set(cfg)
    out = Path(args.out)
    paths = store.precompute(corpus, model, ps, cfg["store"]["shard_size"], out)
    _log_config(out, cfg)
    print(f"wrote {len(paths)} shard(s) for {len(corpus)} samples, K={len(ps)} -> {out}")
    return 0


def cmd_train(args) -> int:
    overrides: dict = {"train": {}}
    for field in ("batch_size", "steps", "warmup", "seed"):
        value = getattr(args, field)
        if value is not None:
            overrides["train"][field] = value
    for field in ("lr", "weight_decay", "tau_init"):
        value = getattr(args, field)
        if value is not None:
            overrides["train"][field] = value
    cfg = config.resolve(args.config, overrides)
    t = cfg["train"]
    train_config = align.TrainConfig(
        batch_size=t["batch_size"], steps=t["steps"], lr=t["lr"],
        weight_decay=t["weight_decay"], beta1=t["beta1"], beta2=t["beta2"],
        eps=t["eps"], warmup=t["warmup"], schedule=t["schedule"], seed=t["seed"],
        tau_init=t["tau_init"],
    )
    corpus = store.load_corpus(args.corpus)
    sources = [store.open_store_dir(d) for d in args.store]
    source = sources[0] if len(sources) == 1 else align.CombinedTextSource(sources)
    model = align.AlignModel(_vit_config(cfg), d_t=source.d_t, seed=cfg["vit"]["seed"],
                             tau_init=t["tau_init"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = align.train(
        train_config, corpus, source, model,
        log_path=out / "metrics.jsonl",
        resume_from=args.resume_from,
        stop_after_step=args.stop_after_step,
        checkpoint_path=out / "checkpoint.flmw",
    )
    _log_config(out, cfg)
    last = result.metrics[-1] if result.metrics else None
    print(f"trained to step {result.final_step}"
          + (f", final loss {last.loss:.4f}, tau {last.tau:.4f}" if last else ""))
    print(f"checkpoint -> {out / 'checkpoint.flmw'}")
    return 0


def cmd_eval_retrieval(args) -> int:
    cfg = config.resolve(args.config, {"eval": {"text_mode": args.text_mode}}
                         if args.text_mode else None)
    model, _ = align.load_model(args.checkpoint)
    corpus = store.load_corpus(args.corpus)
    table = store.open_store_dir(args.store)
    ps = _prompt_set(cfg)
    ordered = sorted(corpus, key=lambda r: r.sample_id)
    ids = [r.sample_id for r in ordered]
    if cfg["eval"]["text_mode"] == "mean":
        text = np.stack([table.lookup_all(i).mean(axis=0) for i in ids])
    else:
        short_idx = list(ps.ids).index(ps.short_prompt().id)
        text = np.stack([table.lookup_all(i)[short_idx] for i in ids])
    images = _load_images(corpus, model.vit.config.image_size)
    feats = evaluation.project_images(model, images)
    gold = np.arange(len(ids))
    ks = tuple(cfg["eval"]["ks"])
    i2t = evaluation.recall_at_k(feats, text, gold, ks, direction="I2T")
    t2i = evaluation.recall_at_k(text, feats, gold, ks, direction="T2I")
    print(i2t.to_text())
    print(t2i.to_text())
    if args.json_out:
        Path(args.json_out).write_text(i2t.to_json() + "\n" + t2i.to_json() + "\n")
    return 0


def cmd_eval_classify(args) -> int:
    overrides = {"eval": {}}
    if args.template:
        overrides["eval"]["template"] = args.template
    cfg = config.resolve(args.config, overrides if overrides["eval"] else None)
    model, _ = align.load_model(args.checkpoint)
    frozen = lm.load_weights(args.lm)
    corpus = store.load_corpus(args.corpus)
    meta = synth.load_meta(args.meta)
    ordered = sorted(corpus, key=lambda r: r.sample_id)
    values = [meta[r.sample_id][args.label_key] for r in ordered]
    labels = args.labels.split(",") if args.labels else sorted(set(values))
    gold = [labels.index(v) for v in values]
    images = _load_images(corpus, model.vit.config.image_size)
    acc = evaluation.zero_shot_classify(
        model, frozen, prompts.builtin_prompts(), images, gold, labels,
        cfg["eval"]["template"],
    )
    print(f"zero-shot {args.label_key} accuracy over {labels}: {acc:.4f}")
    return 0


def cmd_vocabmap(args) -> int:
    model, _ = align.load_model(args.checkpoint)
    frozen = lm.load_weights(args.lm)
    image = preprocess_file(args.image, model.vit.config.image_size)
    vmap = evaluation.vocab_map(model, frozen, image, pool_window=args.pool)
    print(vmap.to_text())
    if args.json_out:
        Path(args.json_out).write_text(vmap.to_json() + "\n")
    if args.overlay_out:
        from .image import decode_ppm

        raw01 = decode_ppm(Path(args.image).read_bytes())
        from .image import bilinear_resize

        raw01 = bilinear_resize(raw01, model.vit.config.image_size, model.vit.config.image_size)
        Path(args.overlay_out).write_bytes(evaluation.render_overlay(raw01, vmap))
    return 0


def _bench_prompts(k: int, suffix_tokens: int) -> prompts.PromptSet:
    """K synthetic facet prompts with ~suffix_tokens byte suffixes."""
    items = []
    for i in range(k):
        body = f"f{i:02d} "
        pad = max(0, suffix_tokens - 1 - len(body) - 2)
        items.append(prompts.FacetPrompt(i + 1, "scene", body + "x" * pad + ':"'))
    return prompts.PromptSet(tuple(items))


def cmd_bench_fda(args) -> int:
    frozen = lm.load_weights(args.lm)
    ps = _bench_prompts(args.k, args.suffix_tokens)
    scaffold = len(prompts.PREFIX_HEAD.encode()) + len(prompts.PREFIX_TAIL.encode()) + 1
    cap_len = max(0, args.prefix_tokens - scaffold)
    captions = [("c" * cap_len) for _ in range(args.captions)]
    report = facets.bench_fda(frozen, captions, ps, reps=args.reps)
    print(report.to_text())
    if args.json_out:
        Path(args.json_out).write_text(report.to_json_lines())
    else:
        sys.stdout.write(report.to_json_lines())
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="facetclip", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-lm", help="write seeded frozen LM weights")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--preset", choices=sorted(lm.PRESETS), default="small")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_init_lm)

    p = sub.add_parser("synth-data", help="generate synthetic images + captions")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("embed", help="precompute per-facet text embeddings")
    p.add_argument("--lm", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shard-size", type=int, dest="shard_size")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("train", help="contrastive training against stored embeddings")
    p.add_argument("--corpus", required=True)
    p.add_argument("--store", action="append", required=True,
                   help="embedding store directory; repeat to concatenate facet blocks")
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--warmup", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tau-init", type=float, dest="tau_init")
    p.add_argument("--resume-from", dest="resume_from")
    p.add_argument("--stop-after-step", type=int, dest="stop_after_step")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-retrieval", help="recall@k over a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--text-mode", choices=("short", "mean"), dest="text_mode")
    p.add_argument("--json-out", dest="json_out")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_eval_retrieval)

    p = sub.add_parser("eval-classify", help="zero-shot classification accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--label-key", required=True, dest="label_key")
    p.add_argument("--labels", help="comma-separated label inventory (default: sorted meta values)")
    p.add_argument("--template")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_eval_classify)

    p = sub.add_parser("vocabmap", help="patch-to-word vocabulary map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--pool", type=int, default=1)
    p.add_argument("--json-out", dest="json_out")
    p.add_argument("--overlay-out", dest="overlay_out")
    p.set_defaults(fn=cmd_vocabmap)

    p = sub.add_parser("bench-fda", help="naive K-pass vs single-pass wall-clock")
    p.add_argument("--lm", required=True)
    p.add_argument("--k", type=int, default=7)
    p.add_argument("--prefix-tokens", type=int, default=256, dest="prefix_tokens")
    p.add_argument("--suffix-tokens", type=int, default=16, dest="suffix_tokens")
    p.add_argument("--captions", type=int, default=4)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--json-out", dest="json_out")
    p.set_defaults(fn=cmd_bench_fda)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 3
    except (FormatError, NotFoundError, CapacityError, FacetClipError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
