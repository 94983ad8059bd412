"""Command-line entry point: config-driven training stages, evaluation,
trade-off sweeps, the architecture ablation harness, and synthetic data
generation.

Heavy imports happen inside the handlers so ``--threads`` can pin BLAS
thread counts before numpy loads. Exit codes: 0 success, 2 config/argument
validation failure, 1 runtime abort.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m3enc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, resume=True, steps=True):
        sp.add_argument("--config", required=True, help="run config JSON")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--output", default=None, help="override config output dir")
        sp.add_argument("--threads", type=int, default=None,
                        help="BLAS thread count (1 = deterministic verification mode)")
        if resume:
            sp.add_argument("--resume", default=None, metavar="CKPT",
                            help="start from this checkpoint")
        if steps:
            sp.add_argument("--steps", type=int, default=None,
                            help="override the step count of every selected stage")

    common(sub.add_parser("pretrain", help="run the pretraining stages"))
    common(sub.add_parser("sft", help="run the supervised fine-tuning stages"))
    common(sub.add_parser("distill", help="run the distillation continuation stages"))

    ev = sub.add_parser("eval", help="exact-search retrieval evaluation")
    ev.add_argument("ckpt", help="checkpoint file")
    ev.add_argument("data", help="pair corpus (query<TAB>doc)")
    ev.add_argument("--layer", type=int, required=True)
    ev.add_argument("--dim", type=int, required=True)
    ev.add_argument("--k", default="1,10,100", help="comma-separated cutoffs")
    ev.add_argument("--output", default="eval-out")
    ev.add_argument("--threads", type=int, default=None)

    sw = sub.add_parser("sweep", help="dimension/layer trade-off sweep")
    sw.add_argument("ckpt")
    sw.add_argument("data")
    sw.add_argument("--axis", choices=("dim", "layer"), required=True)
    sw.add_argument("--values", required=True, help="comma-separated axis values")
    sw.add_argument("--layer", type=int, default=None, help="fixed layer for a dim sweep")
    sw.add_argument("--dim", type=int, default=None, help="fixed dim for a layer sweep")
    sw.add_argument("--k", default="10")
    sw.add_argument("--output", default="sweep-out")
    sw.add_argument("--threads", type=int, default=None)

    ab = sub.add_parser("ablate", help="architecture ablation harness")
    common(ab, resume=False, steps=True)

    gd = sub.add_parser("gen-data", help="write a seeded synthetic corpus")
    gd.add_argument("--kind", choices=("mono", "multi", "pairs"), required=True)
    gd.add_argument("--out", required=True)
    gd.add_argument("--seed", type=int, default=0)
    gd.add_argument("--n", type=int, default=2000, help="documents or pairs to generate")
    return p


def _setup_runtime(args) -> None:
    if getattr(args, "threads", None) is not None:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
        if "numpy" in sys.modules:
            logging.getLogger("m3enc").debug(
                "numpy already imported; --threads applies to new pools only")
    level = os.environ.get("M3_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise SystemExit(f"M3_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level],
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _parse_int_list(text: str, flag: str) -> list[int]:
    from .errors import ConfigError
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"{flag} must be a comma-separated integer list, got {text!r}") from e
    if not values:
        raise ConfigError(f"{flag} must not be empty")
    return values


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _build_source(spec, vocab):
    from . import data as D
    if spec.data.kind == "mono":
        docs = D.read_text_corpus(spec.data.path)
        return D.MlmSource(vocab, docs, seq_len=spec.seq_len,
                           mask_rate=spec.stage.mask_rate, policy=spec.stage.mask_policy)
    if spec.data.kind == "multi":
        groups = D.read_multilingual_corpus(spec.data.path)
        return D.MultilingualMlmSource(vocab, groups, seq_len=spec.seq_len,
                                       mask_rate=spec.stage.mask_rate,
                                       smoothing=spec.smoothing,
                                       policy=spec.stage.mask_policy)
    store = D.cap_per_query(D.dedup_pairs(D.ingest_pairs(spec.data.path)), cap=64)
    return D.PairSource(vocab, store.records, query_len=spec.query_len,
                        doc_len=spec.doc_len)


def _vocab_text_source(run, specs):
    from . import data as D
    if run.vocab_corpus is not None:
        return D.read_text_corpus(run.vocab_corpus)
    for spec in specs:
        if spec.data.kind == "mono":
            return D.read_text_corpus(spec.data.path)
        if spec.data.kind == "pairs":
            store = D.ingest_pairs(spec.data.path)
            return [f"{r.query} {r.doc}" for r in store.records]
    from .errors import ConfigError
    raise ConfigError("cannot build a vocabulary: set vocab_corpus or include a "
                      "mono/pairs stage")


def _initial_state(run, specs, resume):
    import dataclasses

    import numpy as np

    from . import data as D
    from . import encoder as enc
    from . import trainer as tr
    from .errors import ConfigError

    if resume is not None:
        state = tr.load_checkpoint(resume)
        state.base_seed = run.seed
        return state
    texts = _vocab_text_source(run, specs)
    vocab = D.build_vocab(texts, max_size=run.model.vocab)
    model = dataclasses.replace(run.model, vocab=vocab.size)
    dtype = np.float32 if run.precision == "float32" else np.float64
    params = enc.init_parameters(model, seed=run.seed, dtype=dtype)
    return tr.TrainState(config=model, params=params, opt=None, step=0, stage="",
                         base_seed=run.seed, vocab=vocab)


def _load_eval_pairs(path):
    from . import data as D
    store = D.dedup_pairs(D.ingest_pairs(path))
    doc_ids: dict[str, str] = {}
    docs: list[str] = []
    for rec in store.records:
        if rec.doc not in doc_ids:
            doc_ids[rec.doc] = f"d{len(docs):06d}"
            docs.append(rec.doc)
    queries = [rec.query for rec in store.records]
    truth = [doc_ids[rec.doc] for rec in store.records]
    return queries, docs, truth, list(doc_ids.values())


def _run_training(args, kinds: tuple[str, ...]) -> int:
    from . import trainer as tr
    from .config import load_run_config
    from .errors import ConfigError

    run = load_run_config(args.config)
    if args.seed is not None:
        run.seed = args.seed
    if args.output is not None:
        run.output_dir = Path(args.output)
    specs = [s for s in run.stages if s.stage.stage in kinds]
    if not specs:
        raise ConfigError(f"config has no stage of kind {kinds}")
    if args.steps is not None:
        for spec in specs:
            spec.stage.steps = args.steps
    state = _initial_state(run, specs, args.resume)
    run.output_dir.mkdir(parents=True, exist_ok=True)
    sink = tr.JsonlSink(run.output_dir / "metrics.jsonl")
    try:
        pairs = [(spec.stage, _build_source(spec, state.vocab)) for spec in specs]
        state = tr.run_stages(pairs, state, sink, output_dir=run.output_dir)
        final = run.output_dir / "final.m3ck"
        tr.save_checkpoint(state, final)
        print(f"done: {len(specs)} stage(s); final checkpoint {final}")
    finally:
        sink.close()
    return 0


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    return _run_training(args, ("pretrain_mlm", "pretrain_contrastive"))


def cmd_sft(args) -> int:
    return _run_training(args, ("sft", "sft_mrl"))


def cmd_distill(args) -> int:
    return _run_training(args, ("distill",))


def cmd_eval(args) -> int:
    from . import evalkit as ek
    from . import trainer as tr
    from .errors import ConfigError

    state = tr.load_checkpoint(args.ckpt)
    if state.vocab is None:
        raise ConfigError(f"checkpoint {args.ckpt} carries no vocabulary")
    if not (1 <= args.dim <= state.config.hidden):
        raise ConfigError(f"--dim {args.dim} outside [1, {state.config.hidden}]")
    if not (1 <= args.layer <= state.config.n_layers):
        raise ConfigError(f"--layer {args.layer} outside [1, {state.config.n_layers}]")
    ks = _parse_int_list(args.k, "--k")
    queries, docs, truth, doc_ids = _load_eval_pairs(args.data)
    report = ek.evaluate(state.params, state.config, state.vocab, queries, docs, truth,
                         layer=args.layer, dim=args.dim, ks=ks, doc_ids=doc_ids)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    ek.write_report_files(report, out / "report.json", out / "report.csv")
    for k in sorted(report.recalls):
        print(f"recall@{k} = {report.recalls[k]:.4f} (layer={args.layer}, dim={args.dim})")
    print(f"wrote {out / 'report.json'}")
    return 0


def cmd_sweep(args) -> int:
    from . import evalkit as ek
    from . import trainer as tr
    from .errors import ConfigError

    state = tr.load_checkpoint(args.ckpt)
    if state.vocab is None:
        raise ConfigError(f"checkpoint {args.ckpt} carries no vocabulary")
    values = _parse_int_list(args.values, "--values")
    ks = _parse_int_list(args.k, "--k")
    queries, docs, truth, doc_ids = _load_eval_pairs(args.data)
    curves, _ = ek.tradeoff_sweep(state.params, state.config, state.vocab, queries,
                                  docs, truth, axis=args.axis, values=values, ks=ks,
                                  layer=args.layer, dim=args.dim)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    ek.write_curve_files(curves, out / f"sweep-{args.axis}.json",
                         out / f"sweep-{args.axis}.csv")
    print(f"wrote {out / f'sweep-{args.axis}.csv'} ({len(values)} points per K)")
    return 0


def _arm_config(model, arm: str):
    import dataclasses
    if arm == "base":
        return model
    if arm == "-SwiGLU":
        return dataclasses.replace(model, activation="gelu", ffn_mult=4.0)
    if arm == "-Pre-norm":
        return dataclasses.replace(model, norm_placement="post")
    if arm == "-RMSNorm":
        return dataclasses.replace(model, norm="layernorm")
    if arm == "+Dropout":
        return dataclasses.replace(model, hidden_dropout=0.1)
    if arm == "+Bias":
        return dataclasses.replace(model, use_bias=True)
    raise ValueError(arm)


def cmd_ablate(args) -> int:
    import dataclasses

    import numpy as np

    from . import data as D
    from . import encoder as enc
    from . import evalkit as ek
    from . import trainer as tr
    from .config import ABLATION_ARMS, load_run_config
    from .errors import ConfigError

    run = load_run_config(args.config)
    if args.seed is not None:
        run.seed = args.seed
    if args.output is not None:
        run.output_dir = Path(args.output)
    if run.ablate is None:
        raise ConfigError("config has no 'ablate' block")
    base = run.model
    if (base.activation, base.norm, base.norm_placement, base.use_bias,
            base.hidden_dropout) != ("swiglu", "rmsnorm", "pre", False, 0.0):
        raise ConfigError("ablation requires the modernized base config: swiglu, "
                          "rmsnorm, pre-norm, no bias, no dropout")
    if args.steps is not None:
        run.ablate.train.stage.steps = args.steps

    texts = _vocab_text_source(run, [run.ablate.train])
    vocab = D.build_vocab(texts, max_size=base.vocab)
    run.output_dir.mkdir(parents=True, exist_ok=True)
    sink = tr.JsonlSink(run.output_dir / "metrics.jsonl")
    queries, docs, truth, doc_ids = _load_eval_pairs(run.ablate.eval.path)
    dtype = np.float32 if run.precision == "float32" else np.float64

    rows = []
    try:
        for arm in ABLATION_ARMS:
            model = dataclasses.replace(_arm_config(base, arm), vocab=vocab.size)
            params = enc.init_parameters(model, seed=run.seed, dtype=dtype)
            state = tr.TrainState(config=model, params=params, opt=None, step=0,
                                  stage="", base_seed=run.seed, vocab=vocab)
            stage = dataclasses.replace(run.ablate.train.stage)
            source = _build_source(run.ablate.train, vocab)
            tr.run_stage(stage, state, source, sink)
            ev = run.ablate.eval
            report = ek.evaluate(state.params, model, vocab, queries, docs, truth,
                                 layer=ev.layer, dim=ev.dim, ks=list(ev.ks),
                                 doc_ids=doc_ids)
            row = {"arm": arm, "param_count": params.count()}
            row.update({f"recall@{k}": report.recalls[k] for k in sorted(report.recalls)})
            rows.append(row)
            tr.save_checkpoint(state, run.output_dir / f"ablate-{arm}.m3ck")
            print(f"{arm}: params={row['param_count']} " +
                  " ".join(f"recall@{k}={report.recalls[k]:.4f}"
                           for k in sorted(report.recalls)))
    finally:
        sink.close()

    header = ["arm", "param_count"] + [f"recall@{k}" for k in sorted(run.ablate.eval.ks)]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(row[h]) for h in header))
    csv_path = run.output_dir / "ablation.csv"
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {csv_path}")
    return 0


def cmd_gen_data(args) -> int:
    from . import synth
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "mono":
        synth.write_text_corpus(out, synth.generate_mlm_corpus(args.n, seed=args.seed))
    elif args.kind == "multi":
        proportions = {"en": 0.55, "de": 0.20, "fr": 0.15, "lo": 0.10}
        synth.write_multilingual_corpus(
            out, synth.generate_multilingual_corpus(proportions, args.n, seed=args.seed))
    else:
        synth.write_pair_corpus(out, synth.generate_pair_corpus(args.n, seed=args.seed))
    print(f"wrote {out}")
    return 0


_HANDLERS = {
    "pretrain": cmd_pretrain,
    "sft": cmd_sft,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "gen-data": cmd_gen_data,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _setup_runtime(args)
    from .errors import ConfigError, M3Error
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except M3Error as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
