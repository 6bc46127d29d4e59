"""``motelab`` command line: corpus generation, training, evaluation, analysis and ablation presets.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import analysis, evaluation
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (TASKS, CorpusSpec, Vocabulary, corpus_vocabulary, detokenize, export_jsonl, generate_corpus,
                   generate_eval_split, generate_probes, load_jsonl, spec_to_text, tokenize)
from .metrics import read_run_file, score_run, write_report
from .model import (EncoderConfig, ModelCheckpoint, encode_many, expert_average, init_model, load_all,
                    residency_state, set_residency, upcycle)
from .routing import TaskRegistry, default_registry
from .training import Schedule, train

ARCHS = ("dense", "ic", "mote", "tlr")
BATCHINGS = ("static", "tacl")
PROBE_TASKS = ("search_query", "search_document", "classification", "clustering")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# experiment config


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a training run; serialized as ``key = value`` lines."""

    arch: str = "mote"
    placement: str = "eb"
    batching: str = "tacl"
    num_experts: int = 4
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.1
    aux_weight: float = 0.01
    seed: int = 0
    hidden_dim: int = 64
    num_heads: int = 4
    num_layers: int = 4
    mlp_hidden_dim: int = 256
    max_seq_len: int = 64
    vocab_size: int = 1024
    corpus_path: str = ""
    corpus_seed: int = 7
    corpus_topics: int = 16
    corpus_entities: int = 256
    corpus_pairs_per_dataset: int = 400
    corpus_datasets_per_task: int = 4
    corpus_noise_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise UsageError(f"arch must be one of {', '.join(ARCHS)}")
        if self.batching not in BATCHINGS:
            raise UsageError(f"batching must be one of {', '.join(BATCHINGS)}")
        if self.placement not in ("eb", "eob"):
            raise UsageError("placement must be eb or eob")

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def parse(cls, items: dict[str, str], base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for k, v in items.items():
            if k not in types:
                raise UsageError(f"unknown config key {k!r}")
            try:
                values[k] = {"int": int, "float": float}.get(types[k], str)(v)
            except ValueError:
                raise UsageError(f"config key {k}: cannot parse {v!r}") from None
        return replace(base or cls(), **values)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.parse(read_config_file(path))

    def corpus_spec(self) -> CorpusSpec:
        return CorpusSpec(num_topics=self.corpus_topics, num_entities=self.corpus_entities,
                          pairs_per_dataset=self.corpus_pairs_per_dataset,
                          datasets_per_task=self.corpus_datasets_per_task,
                          noise_rate=self.corpus_noise_rate, seed=self.corpus_seed)

    def registry(self) -> TaskRegistry:
        reg = default_registry()
        if self.arch == "dense":
            reg = reg.with_prefixes("")
        return reg.static() if self.batching == "static" else reg

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(vocab_size=self.vocab_size, max_seq_len=self.max_seq_len, hidden_dim=self.hidden_dim,
                             num_heads=self.num_heads, num_layers=self.num_layers,
                             mlp_hidden_dim=self.mlp_hidden_dim, seed=self.seed)

    def schedule(self) -> Schedule:
        return Schedule(steps=self.steps, batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
                        seed=self.seed, aux_weight=self.aux_weight)


def read_config_file(path: str | Path) -> dict[str, str]:
    items = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        items[k.strip()] = v.strip()
    return items


def parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# runs


def build_model(cfg: ExperimentConfig, vocab: Vocabulary) -> ModelCheckpoint:
    reg = cfg.registry()
    dense = init_model(cfg.encoder_config(), reg, vocab)
    if cfg.arch in ("dense", "ic"):
        return dense
    kind = "mote" if cfg.arch == "mote" else "token_moe"
    return upcycle(dense, cfg.num_experts, cfg.placement, kind)


def load_corpus(cfg: ExperimentConfig):
    if cfg.corpus_path:
        store = load_jsonl(cfg.corpus_path, cfg.registry())
        return store, store.vocab
    return generate_corpus(cfg.corpus_spec(), cfg.registry())


def run_training(cfg: ExperimentConfig, out: str | Path, log=print) -> ModelCheckpoint:
    """Train into a run directory holding config.txt, checkpoint/ and loss_log.csv.

    An INCOMPLETE marker exists until every artifact has been written.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "INCOMPLETE"
    marker.write_text("run in progress\n", encoding="utf-8")
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    try:
        store, vocab = load_corpus(cfg)
        model = build_model(cfg, vocab.extend_for(cfg.registry()))
        model, loss_log = train(model, store, model.registry, cfg.schedule())
        save_checkpoint(model, out / "checkpoint")
        loss_log.to_csv(out / "loss_log.csv")
    except BaseException as exc:
        marker.write_text(f"run failed: {type(exc).__name__}: {exc}\n", encoding="utf-8")
        raise
    marker.unlink()
    log(f"trained {cfg.arch} for {cfg.steps} steps -> {out}")
    return model


def _retokenize(split, src_vocab: Vocabulary, dst_vocab: Vocabulary):
    """Map held-out sequences from the generator's vocabulary onto a model's vocabulary."""
    if src_vocab == dst_vocab:
        return split
    conv = lambda seqs: [tuple(tokenize(dst_vocab, detokenize(src_vocab, s))) for s in seqs]
    split.retrieval = {k: (conv(q), conv(d)) for k, (q, d) in split.retrieval.items()}
    tr_x, tr_y, te_x, te_y = split.classification
    split.classification = (conv(tr_x), tr_y, conv(te_x), te_y)
    split.clustering = (conv(split.clustering[0]), split.clustering[1])
    return split


def evaluate_checkpoint(model: ModelCheckpoint, spec: CorpusSpec, out: str | Path) -> list:
    split = _retokenize(generate_eval_split(spec), corpus_vocabulary(spec), model.vocab)
    rows = evaluation.evaluate_all(model, split)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for task in TASKS:
        evaluation.write_eval_csv([r for r in rows if r[0] == task], out / f"{task}.csv")
    return rows


def run_analysis(a: ModelCheckpoint, b: ModelCheckpoint, spec: CorpusSpec, out: str | Path,
                 probes: int = 128, probe_seed: int = 2024, label_a: str = "mote", label_b: str = "ic"):
    seqs = generate_probes(spec, probes, probe_seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    samples = {}
    for label, model in ((label_a, a), (label_b, b)):
        mapped = _retokenize_probes(seqs, corpus_vocabulary(spec), model.vocab)
        samples[label] = analysis.inter_task_similarity(model, PROBE_TASKS, mapped)
        analysis.emit_report(samples[label], out / f"similarity_{label}.csv")
    comparisons = analysis.compare_similarity(samples[label_a], samples[label_b], label_a, label_b)
    analysis.emit_report(comparisons, out / "welch.csv")
    return comparisons


def _retokenize_probes(seqs, src: Vocabulary, dst: Vocabulary):
    if src == dst:
        return seqs
    return [tuple(tokenize(dst, detokenize(src, s))) for s in seqs]


# ---------------------------------------------------------------------------
# presets

PRESETS = {
    "static-vs-tacl": {"static": {"batching": "static"}, "tacl": {"batching": "tacl"}},
    "slr-vs-tlr": {"slr": {"arch": "mote"}, "tlr": {"arch": "tlr"}},
    "eb-vs-eob": {"eb": {"placement": "eb"}, "eob": {"placement": "eob"}},
    "ic-vs-mote": {"ic": {"arch": "ic"}, "mote": {"arch": "mote"}},
}


def run_preset(name: str, base: ExperimentConfig, out: str | Path, log=print) -> dict[str, list]:
    """Train both variants of an ablation, evaluate each, and write summary.csv."""
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    out = Path(out)
    results, models = {}, {}
    for variant, overrides in PRESETS[name].items():
        cfg = ExperimentConfig.parse({k: str(v) for k, v in overrides.items()}, base)
        models[variant] = run_training(cfg, out / variant, log)
        results[variant] = evaluate_checkpoint(models[variant], cfg.corpus_spec(), out / variant / "eval")
    with open(out / "summary.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("variant,task,dataset,metric,value\n")
        for variant, rows in results.items():
            for task, ds, metric, value in rows:
                fh.write(f"{variant},{task},{ds},{metric},{format(value, '.17g')}\n")
    if name == "ic-vs-mote":
        run_analysis(models["mote"], models["ic"], base.corpus_spec(), out / "analysis")
    log(f"preset {name} -> {out}")
    return results


# ---------------------------------------------------------------------------
# commands


def _experiment_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    flags = {k: getattr(args, k) for k in ("arch", "placement", "batching", "steps", "seed", "batch_size")
             if getattr(args, k, None) is not None}
    flags.update(parse_overrides(args.set or []))
    return ExperimentConfig.parse({k: str(v) for k, v in flags.items()}, cfg)


def cmd_generate_data(args) -> int:
    spec = CorpusSpec(num_topics=args.num_topics, num_entities=args.num_entities,
                      pairs_per_dataset=args.pairs_per_dataset, datasets_per_task=args.datasets_per_task,
                      noise_rate=args.noise_rate, seed=args.seed)
    store, vocab = generate_corpus(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_jsonl(store, vocab, out / "corpus.jsonl")
    vocab.save(out / "vocab.txt")
    (out / "spec.txt").write_text(spec_to_text(spec), encoding="utf-8")
    for task, datasets in store.tasks.items():
        (out / task).mkdir(exist_ok=True)
        for ds, pairs in datasets.items():
            export_jsonl(type(store)({task: {ds: pairs}}), vocab, out / task / f"{ds}.jsonl")
    print(f"wrote {len(store)} pairs, {len(vocab)} tokens -> {out}")
    return 0


def cmd_init(args) -> int:
    cfg = _experiment_config(args)
    _, vocab = load_corpus(cfg)
    model = init_model(cfg.encoder_config(), cfg.registry(), vocab.extend_for(cfg.registry()))
    save_checkpoint(model, args.out)
    print(f"initialized dense encoder ({model.num_parameters()} parameters) -> {args.out}")
    return 0


def cmd_upcycle(args) -> int:
    dense = load_checkpoint(args.checkpoint)
    kind = "token_moe" if args.kind == "tlr" else "mote"
    model = upcycle(dense, args.experts, args.placement, kind)
    save_checkpoint(model, args.out)
    print(f"upcycled into {args.experts} experts on blocks {model.config.routed_blocks()} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    run_training(_experiment_config(args), args.out)
    return 0


def cmd_eval(args) -> int:
    if args.run_file:
        rows = score_run(read_run_file(args.run_file), k=10)
        write_report(rows, args.out)
        print(f"scored {len(rows)} queries -> {args.out}")
        return 0
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint or --run-file")
    model = load_checkpoint(args.checkpoint)
    spec = _spec_from_args(args)
    for task, ds, metric, value in evaluate_checkpoint(model, spec, args.out):
        print(f"{task}\t{ds}\t{metric}\t{value:.6f}")
    return 0


def _spec_from_args(args) -> CorpusSpec:
    if getattr(args, "config", None):
        return ExperimentConfig.from_file(args.config).corpus_spec()
    return CorpusSpec(seed=args.corpus_seed)


def cmd_analyze(args) -> int:
    a, b = load_checkpoint(args.a), load_checkpoint(args.b)
    rows = run_analysis(a, b, _spec_from_args(args), args.out, args.probes, args.probe_seed,
                        args.label_a, args.label_b)
    for c in rows:
        r = c.result
        print(f"{c.pair[0]}/{c.pair[1]}\tt={r.t_statistic:.4f}\tdf={r.degrees_of_freedom:.2f}\tp={r.p_value:.4g}")
    return 0


def cmd_compress(args) -> int:
    model = expert_average(load_checkpoint(args.checkpoint))
    save_checkpoint(model, args.out)
    print(f"averaged experts into a dense checkpoint -> {args.out}")
    return 0


def cmd_offload_demo(args) -> int:
    model = load_checkpoint(args.checkpoint)
    seqs = _retokenize_probes(generate_probes(CorpusSpec(seed=args.corpus_seed), args.probes, 2024),
                              corpus_vocabulary(CorpusSpec(seed=args.corpus_seed)), model.vocab)
    reference = {t: encode_many(model, t, seqs) for t in model.registry}
    total = residency_state(model).resident_bytes
    ok = True
    for active in model.registry:
        state = set_residency(model, active, args.spill_dir)
        print(f"active={active}\tresident_experts={len(state.resident_experts)}\t"
              f"resident_bytes={state.resident_bytes}\tevicted_bytes={state.evicted_bytes}\t"
              f"fraction={state.resident_bytes / total if total else 1.0:.4f}")
        same = np.array_equal(encode_many(model, active, seqs), reference[active])
        ok &= same
        print(f"  embeddings bit-identical: {same}")
    load_all(model)
    return 0 if ok else 1


def cmd_preset(args) -> int:
    run_preset(args.name, _experiment_config(args), args.out)
    return 0


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="plain-text key = value file; flags override it")
    p.add_argument("--arch", choices=ARCHS)
    p.add_argument("--placement", choices=("eb", "eob"))
    p.add_argument("--batching", choices=BATCHINGS)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motelab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write the synthetic corpus as JSONL")
    p.add_argument("--out", required=True)
    defaults = CorpusSpec()
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--num-topics", type=int, default=defaults.num_topics)
    p.add_argument("--num-entities", type=int, default=defaults.num_entities)
    p.add_argument("--pairs-per-dataset", type=int, default=defaults.pairs_per_dataset)
    p.add_argument("--datasets-per-task", type=int, default=defaults.datasets_per_task)
    p.add_argument("--noise-rate", type=float, default=defaults.noise_rate)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("init", help="write a freshly initialized dense checkpoint")
    p.add_argument("--out", required=True)
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("upcycle", help="turn a dense checkpoint into a routed one")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--experts", type=int, default=4)
    p.add_argument("--placement", choices=("eb", "eob"), default="eb")
    p.add_argument("--kind", choices=("mote", "tlr"), default="mote")
    p.set_defaults(func=cmd_upcycle)

    p = sub.add_parser("train", help="train one configuration into a run directory")
    p.add_argument("--out", required=True)
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out metrics for a checkpoint, or score a run file")
    p.add_argument("--checkpoint")
    p.add_argument("--run-file")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="run config whose corpus settings define the held-out split")
    p.add_argument("--corpus-seed", type=int, default=7)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="inter-task similarity of two checkpoints with Welch tests")
    p.add_argument("--a", required=True, help="checkpoint tested for lower similarity (x)")
    p.add_argument("--b", required=True, help="reference checkpoint (y)")
    p.add_argument("--label-a", default="mote")
    p.add_argument("--label-b", default="ic")
    p.add_argument("--out", required=True)
    p.add_argument("--probes", type=int, default=128)
    p.add_argument("--probe-seed", type=int, default=2024)
    p.add_argument("--config")
    p.add_argument("--corpus-seed", type=int, default=7)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compress", help="average experts into a dense checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("offload-demo", help="show residency accounting and check embeddings stay identical")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--spill-dir")
    p.add_argument("--probes", type=int, default=16)
    p.add_argument("--corpus-seed", type=int, default=7)
    p.set_defaults(func=cmd_offload_demo)

    p = sub.add_parser("preset", help="run a named ablation")
    p.add_argument("name", choices=sorted(PRESETS))
    p.add_argument("--out", required=True)
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_preset)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"motelab: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, CheckpointError, ValueError, KeyError, RuntimeError, ArithmeticError) as exc:
        print(f"motelab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
