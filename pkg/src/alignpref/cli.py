"""Command-line pipeline: one subcommand per stage with JSONL/TSV file handoff.

Every stage reads the documented artifacts of earlier stages and writes its
own with a header embedding the config hash and seed, so re-running a stage
with identical inputs reproduces identical bytes. `--mock` swaps all remote
providers for deterministic offline mocks.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import aligner as aligner_mod
from . import corpus as corpus_mod
from . import dpo as dpo_mod
from . import evalkit
from . import metrics
from . import preference as preference_mod
from . import providers as providers_mod
from .errors import AlignprefError, ConfigError, RemoteError
from .io_utils import config_hash, write_tsv


class MissingArtifact(AlignprefError):
    def __init__(self, stage: str, path: Path) -> None:
        super().__init__(f"missing artifact from stage {stage!r}: {path} (run it first)")
        self.stage = stage
        self.path = path


@dataclass
class RunConfig:
    """Resolved run-level configuration; hashed into every artifact header."""

    direction: dict[str, str] = field(default_factory=lambda: {"src": "zh", "tgt": "en"})
    corpus: str | None = None
    providers: list[dict[str, Any]] = field(
        default_factory=lambda: [
            {"id": "chat-mt", "priority": 1, "model_name": "mock-map"},
            {"id": "generic-mt", "priority": 2, "model_name": "mock-map-lossy"},
            {"id": "reference", "priority": 3},
        ]
    )
    sidecar: str | None = None
    aligner: dict[str, Any] = field(
        default_factory=lambda: {
            "backend": "builtin",
            "threshold": 0.5,
            "mode": "intersection",
            "lexicon": None,
            "em_iterations": 5,
            "endpoint": None,
        }
    )
    filters: dict[str, float] = field(
        default_factory=lambda: {"coverage_delta": 5.0, "similarity": 0.9, "copy_bleu": 20.0}
    )
    dpo: dict[str, Any] = field(
        default_factory=lambda: {"beta": 0.1, "lr": 0.5, "epochs": 200}
    )
    eval: dict[str, Any] = field(
        default_factory=lambda: {"n_list": [100, 200, 500], "iterations": 100_000, "re_asks": 2}
    )
    evaluator: dict[str, Any] | None = None
    templates: dict[str, Any] = field(
        default_factory=lambda: {"translate": None, "coverage": None}
    )
    seed: int = 42

    def template_text(self, kind: str) -> str | None:
        path = self.templates.get(kind)
        return Path(path).read_text(encoding="utf-8") if path else None

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        config = cls()
        if path is None:
            return config
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for key, value in raw.items():
            if not hasattr(config, key):
                raise ConfigError(f"unknown config key: {key!r}")
            if isinstance(getattr(config, key), dict) and isinstance(value, dict):
                getattr(config, key).update(value)
            else:
                setattr(config, key, value)
        config.validate()
        return config

    def validate(self) -> None:
        if not 0 <= self.aligner["threshold"] <= 1:
            raise ConfigError(f"aligner threshold {self.aligner['threshold']} not in [0, 1]")
        for name, value in self.filters.items():
            if value < 0:
                raise ConfigError(f"filter threshold {name}={value} must be non-negative")
        if self.dpo["beta"] <= 0:
            raise ConfigError(f"beta must be positive, got {self.dpo['beta']}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "direction": self.direction,
            "corpus": self.corpus,
            "providers": self.providers,
            "sidecar": self.sidecar,
            "aligner": self.aligner,
            "filters": self.filters,
            "dpo": self.dpo,
            "eval": self.eval,
            "evaluator": self.evaluator,
            "templates": self.templates,
            "seed": self.seed,
        }

    def header(self, stage: str) -> dict[str, Any]:
        return {"stage": stage, "config_hash": config_hash(self.to_dict()), "seed": self.seed}

    @property
    def lang_direction(self) -> corpus_mod.LangDirection:
        return corpus_mod.LangDirection(self.direction["src"], self.direction["tgt"])


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(stage, path)
    return path


def _build_backend(
    config: RunConfig,
    segments: Sequence[corpus_mod.SourceSegment],
    candidates: Sequence[corpus_mod.TranslationCandidate],
) -> aligner_mod.AlignerBackend:
    settings = config.aligner
    if settings["backend"] == "remote":
        if not settings.get("endpoint"):
            raise ConfigError("remote aligner backend needs aligner.endpoint")
        return aligner_mod.RemoteAligner(settings["endpoint"])
    lexicon = aligner_mod.load_lexicon(settings["lexicon"]) if settings.get("lexicon") else None
    backend = aligner_mod.LexicalAligner(lexicon=lexicon, mode=settings.get("mode", "intersection"))
    if lexicon is None:
        # No lexicon: fit co-occurrence tables on the corpus being scored.
        sources = {seg.id: seg for seg in segments}
        pairs = []
        for cand in candidates:
            segment = sources.get(cand.segment_id)
            if segment is None or not cand.text.strip():
                continue
            pairs.append(
                (
                    aligner_mod.tokenize(segment.source, segment.direction.src),
                    aligner_mod.tokenize(cand.text, segment.direction.tgt),
                )
            )
        if pairs:
            backend.fit_cooccurrence(pairs, iterations=settings.get("em_iterations", 5))
    return backend


# ---------------------------------------------------------------------------
# Stage implementations


def cmd_ingest(config: RunConfig, out: Path, args: argparse.Namespace) -> int:
    corpus_path = args.corpus or config.corpus
    if corpus_path is None:
        raise ConfigError("ingest needs --corpus or config.corpus")
    segments = corpus_mod.load_corpus(corpus_path, config.lang_direction)
    count = corpus_mod.save_corpus(out / "corpus.jsonl", segments, header=config.header("ingest"))
    print(f"ingest: {count} segments -> {out / 'corpus.jsonl'}")
    return 0


def cmd_translate(config: RunConfig, out: Path, args: argparse.Namespace) -> int:
    segments = corpus_mod.load_corpus(_require(out / "corpus.jsonl", "ingest"), config.lang_direction)
    specs = providers_mod.load_provider_specs(config.providers)
    translators = [
        (
            spec,
            providers_mod.build_translator(
                spec,
                mock=args.mock,
                sidecar_path=config.sidecar,
                template=config.template_text("translate"),
            ),
        )
        for spec in specs
    ]
    candidates, errors = providers_mod.translate_all(segments, translators)
    corpus_mod.save_candidate_rows(
        out / "candidates.jsonl", candidates, header=config.header("translate")
    )
    for segment_id, provider, message in errors:
        print(f"translate: error {segment_id}/{provider}: {message}", file=sys.stderr)
    report = corpus_mod.validate_candidates(segments, candidates)
    if report.under_populated:
        print(
            f"translate: {len(report.under_populated)} segments have K<2 candidates",
            file=sys.stderr,
        )
    print(f"translate: {len(candidates)} candidates -> {out / 'candidates.jsonl'}")
    return 0


def cmd_score_coverage(config: RunConfig, out: Path, args: argparse.Namespace) -> int:
    segments = corpus_mod.load_corpus(_require(out / "corpus.jsonl", "ingest"), config.lang_direction)
    candidates = corpus_mod.load_candidate_rows(_require(out / "candidates.jsonl", "translate"))
    backend = _build_backend(config, segments, candidates)
    threshold = config.aligner["threshold"]
    by_id = {seg.id: seg for seg in segments}
    reports = []
    for cand in candidates:
        segment = by_id.get(cand.segment_id)
        if segment is None:
            print(f"score-coverage: orphan candidate {cand.segment_id}", file=sys.stderr)
            continue
        try:
            reports.append(
                aligner_mod.coverage(segment, cand, backend, threshold, keep_links=args.links)
            )
        except RemoteError:
            raise  # remote failures abort the stage (exit 2)
        except AlignprefError as exc:
            print(
                f"score-coverage: skipped {cand.segment_id}/{cand.provider}: {exc}",
                file=sys.stderr,
            )
    rows = []
    for report in reports:
        row: dict[str, Any] = {
            "segment_id": report.segment_id,
            "provider": report.provider,
            "covered_src_tokens": report.covered_src_tokens,
            "total_src_tokens": report.total_src_tokens,
            "coverage": report.coverage,
        }
        if args.links:
            row["links"] = [
                {"s": l.src_index, "t": l.tgt_index, "p": l.confidence} for l in report.links
            ]
        rows.append(row)
    from .io_utils import write_jsonl

    write_jsonl(out / "coverage.jsonl", rows, header=config.header("score-coverage"))
    print(f"score-coverage: {len(rows)} reports -> {out / 'coverage.jsonl'}")
    return 0


def cmd_build_prefs(config: RunConfig, out: Path, args: argparse.Namespace) -> int:
    from .io_utils import read_jsonl

    segments = corpus_mod.load_corpus(_require(out / "corpus.jsonl", "ingest"), config.lang_direction)
    candidates = corpus_mod.load_candidate_rows(_require(out / "candidates.jsonl", "translate"))
    coverage_path = _require(out / "coverage.jsonl", "score-coverage")
    scores = {
        (str(r["segment_id"]), str(r["provider"])): float(r["coverage"])
        for r in read_jsonl(coverage_path)
    }
    # candidates without a coverage report were skipped at scoring (and
    # logged there); a segment keeps its triplet if K >= 2 scored remain
    scored = [
        corpus_mod.TranslationCandidate(
            c.segment_id, c.provider, c.text, scores[(c.segment_id, c.provider)]
        )
        for c in candidates
        if (c.segment_id, c.provider) in scores
    ]
    priorities = {p["id"]: int(p["priority"]) for p in config.providers}
    filter_config = preference_mod.FilterConfig(**config.filters)
    triplets, stats = preference_mod.build_dataset(
        segments,
        scored,
        provider_priorities=priorities,
        embedder=providers_mod.HashEmbedder(),
        filter_config=filter_config,
    )
    preference_mod.save_triplets(out / "triplets.jsonl", triplets, header=config.header("build-prefs"))
    stats_doc = {"_artifact": config.header("build-prefs"), **stats.to_dict()}
    (out / "prefs_stats.json").write_text(
        json.dumps(stats_doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    print(
        f"build-prefs: kept {stats.kept}/{stats.scored} scored segments -> {out / 'triplets.jsonl'}"
    )
    return 0


def cmd_train_toy(config: RunConfig, out: Path, args: argparse.Namespace) -> int:
    triplets = preference_mod.load_triplets(_require(out / "triplets.jsonl", "build-prefs"))
    train_config = dpo_mod.TrainConfig(
        lr=float(config.dpo["lr"]),
        epochs=int(config.dpo["epochs"]),
        seed=config.seed,
        beta=float(config.dpo["beta"]),
        length_normalize=bool(config.dpo.get("length_normalize", False)),
    )
    policy, trace = dpo_mod.train_toy(triplets, train_config)
    dpo_mod.save_trace(out / "loss_trace.tsv", trace, header=config.header("train-toy"))
    dpo_mod.save_policy(out / "policy.txt", policy, header=config.header("train-toy"))
    print(
        f"train-toy: {len(triplets)} triplets, final loss {trace[-1].mean_loss:.6f}, "
        f"reward accuracy {trace[-1].reward_accuracy:.3f}"
    )
    return 0


def cmd_eval_coverage(config: RunConfig, out: Path, args: argparse.Namespace) -> int:
    segments = corpus_mod.load_corpus(_require(out / "corpus.jsonl", "ingest"), config.lang_direction)
    if args.translations:
        rows = corpus_mod.load_candidate_rows(args.translations)
    else:
        rows = corpus_mod.load_candidate_rows(_require(out / "candidates.jsonl", "translate"))
    if args.provider:
        rows = [c for c in rows if c.provider == args.provider]
    if not rows:
        raise ConfigError("eval-coverage: no translations selected")
    if args.mock:
        client: providers_mod.ChatClient = providers_mod.MockEvaluatorClient()
    elif config.evaluator and config.evaluator.get("endpoint"):
        import os

        env = config.evaluator.get("credentials_env")
        client = providers_mod.HttpChatClient(
            config.evaluator["endpoint"],
            model_name=config.evaluator.get("model_name"),
            api_key=os.environ.get(env) if env else None,
        )
    else:
        raise ConfigError("eval-coverage needs --mock or config.evaluator.endpoint")
    quality = metrics.load_scores(args.quality) if args.quality else {}
    by_id = {seg.id: seg for seg in segments}
    records = []
    for cand in sorted(rows, key=lambda c: c.segment_id):
        segment = by_id.get(cand.segment_id)
        if segment is None:
            print(f"eval-coverage: orphan translation {cand.segment_id}", file=sys.stderr)
            continue
        score = evalkit.coverage_eval(
            segment,
            cand,
            client,
            template=config.template_text("coverage"),
            re_asks=int(config.eval.get("re_asks", 2)),
        )
        records.append(
            evalkit.EvalRecord(
                segment_id=segment.id,
                direction=segment.direction,
                coverage_score=score,
                quality_score=quality.get(segment.id),
            )
        )
    label = args.label or args.provider or "records"
    path = out / f"eval_{label}.jsonl"
    evalkit.save_eval_records(path, records, header=config.header("eval-coverage"))
    print(f"eval-coverage: {len(records)} records -> {path}")
    return 0


def _n_list(config: RunConfig) -> list[int]:
    return [int(n) for n in config.eval["n_list"]]


def cmd_hard_split(config: RunConfig, out: Path, args: argparse.Namespace) -> int:
    records = evalkit.load_eval_records(_require(Path(args.records), "eval-coverage"))
    for n in _n_list(config):
        split = evalkit.hard_split(records, n)
        rows = [(seg_id, "hard") for seg_id in sorted(split.hard_ids)]
        rows += [(seg_id, "easy") for seg_id in sorted(split.easy_ids)]
        header = config.header("hard-split")
        header["n"] = n
        write_tsv(out / f"hard_split_n{n}.tsv", ["segment_id", "subset"], rows, header=header)
        print(f"hard-split: n={n} -> {len(split.hard_ids)} hard / {len(split.easy_ids)} easy")
    return 0


def cmd_compare(config: RunConfig, out: Path, args: argparse.Namespace) -> int:
    records_a = evalkit.load_eval_records(_require(Path(args.a), "eval-coverage"))
    records_b = evalkit.load_eval_records(_require(Path(args.b), "eval-coverage"))
    iterations = int(config.eval["iterations"])
    for n in _n_list(config):
        split = evalkit.hard_split(records_a, n)
        comparisons = evalkit.compare_models(
            records_a, records_b, split, iterations=iterations, seed=config.seed
        )
        header = config.header("compare")
        header["n"] = n
        evalkit.write_comparison_tsv(out / f"compare_n{n}.tsv", comparisons, header=header)
        print(f"compare: n={n} -> {out / f'compare_n{n}.tsv'}")
    return 0


def cmd_analyze(config: RunConfig, out: Path, args: argparse.Namespace) -> int:
    wrote_any = False
    if args.records:
        records = evalkit.load_eval_records(Path(args.records))
        correlation_rows = []
        for axis in ("hallucination", "omission"):
            stats = evalkit.bucket_stats(records, axis, merge_small_partial=args.merge_small_partial)
            if stats:
                evalkit.write_bucket_stats_tsv(
                    out / f"bucket_stats_{axis}.tsv", stats, axis, header=config.header("analyze")
                )
                histogram = evalkit.coverage_histogram(
                    records, axis, bin_width=args.bin_width,
                    merge_small_partial=args.merge_small_partial,
                )
                evalkit.write_histogram_tsv(
                    out / f"histogram_{axis}.tsv",
                    histogram,
                    axis,
                    args.bin_width,
                    header=config.header("analyze"),
                )
                wrote_any = True
            try:
                value = evalkit.severity_correlation(records, axis)
                count = sum(
                    1
                    for r in records
                    if r.severity(axis) is not None and r.coverage_score is not None
                )
                correlation_rows.append((axis, value, count))
            except AlignprefError:
                pass
        if correlation_rows:
            write_tsv(
                out / "severity_correlation.tsv",
                ["axis", "pearson", "n"],
                correlation_rows,
                header=config.header("analyze"),
            )
            wrote_any = True
    if args.triplets:
        triplets = preference_mod.load_triplets(Path(args.triplets))
        directions = None
        corpus_artifact = out / "corpus.jsonl"
        if corpus_artifact.exists():
            segments = corpus_mod.load_corpus(corpus_artifact, config.lang_direction)
            directions = {seg.id: str(seg.direction) for seg in segments}
        report = evalkit.provenance_stats(triplets, directions)
        evalkit.write_provenance_tsv(
            out / "provenance.tsv", report, header=config.header("analyze")
        )
        wrote_any = True
    if not wrote_any:
        raise ConfigError("analyze needs --records and/or --triplets")
    print(f"analyze: reports -> {out}")
    return 0


def cmd_bootstrap(config: RunConfig, out: Path, args: argparse.Namespace) -> int:
    scores_a = metrics.load_scores(Path(args.a))
    scores_b = metrics.load_scores(Path(args.b))
    common = sorted(set(scores_a) & set(scores_b))
    if len(common) < 2:
        raise ConfigError(f"need at least 2 shared segment ids, got {len(common)}")
    iterations = int(config.eval["iterations"])
    result = metrics.paired_bootstrap(
        [scores_a[i] for i in common],
        [scores_b[i] for i in common],
        iterations=iterations,
        seed=config.seed,
    )
    write_tsv(
        out / "bootstrap.tsv",
        ["n", "mean_diff", "p_value", "iterations", "seed"],
        [(len(common), result.mean_diff, result.p_value, result.iterations, result.seed)],
        header=config.header("bootstrap"),
    )
    print(
        f"bootstrap: n={len(common)} mean_diff={result.mean_diff:.6f} p={result.p_value:.6f}"
    )
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to run-config JSON")
    common.add_argument("--out", default="out", help="artifact directory (default: out)")
    common.add_argument("--mock", action="store_true", help="use deterministic offline mocks")
    common.add_argument("--seed", type=int, help="override config seed")

    parser = argparse.ArgumentParser(
        prog="alignpref",
        description="Build and evaluate word-alignment preference data for MT.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate and normalize a corpus")
    p.add_argument("--corpus", help="input corpus JSONL")

    sub.add_parser("translate", parents=[common], help="gather candidate translations")

    p = sub.add_parser("score-coverage", parents=[common], help="score source coverage")
    p.add_argument("--threshold", type=float, help="alignment confidence threshold")
    p.add_argument("--links", action="store_true", help="include links in coverage.jsonl")

    sub.add_parser("build-prefs", parents=[common], help="select and filter preference triplets")
    sub.add_parser("train-toy", parents=[common], help="train the toy policy on triplets")

    p = sub.add_parser("eval-coverage", parents=[common], help="judge coverage with a chat model")
    p.add_argument("--provider", help="restrict to one provider's candidates")
    p.add_argument("--translations", help="candidate-row JSONL to evaluate instead")
    p.add_argument("--quality", help="quality score TSV to merge into records")
    p.add_argument("--label", help="output label (eval_<label>.jsonl)")

    p = sub.add_parser("hard-split", parents=[common], help="split records by quality score")
    p.add_argument("--records", required=True, help="EvalRecord JSONL with quality scores")
    p.add_argument("--n", nargs="+", help="hard-instance counts")

    p = sub.add_parser("compare", parents=[common], help="compare two systems on hard/easy subsets")
    p.add_argument("--a", required=True, help="baseline EvalRecord JSONL")
    p.add_argument("--b", required=True, help="candidate EvalRecord JSONL")
    p.add_argument("--n", nargs="+", help="hard-instance counts")
    p.add_argument("--iterations", type=int, help="bootstrap iterations")

    p = sub.add_parser("analyze", parents=[common], help="bucket/correlation/provenance reports")
    p.add_argument("--records", help="EvalRecord JSONL with severity labels")
    p.add_argument("--triplets", help="triplet JSONL for provenance proportions")
    p.add_argument("--bin-width", type=int, default=10)
    p.add_argument("--merge-small-partial", action="store_true")

    p = sub.add_parser("bootstrap", parents=[common], help="paired bootstrap on two score files")
    p.add_argument("--a", required=True, help="baseline score TSV")
    p.add_argument("--b", required=True, help="candidate score TSV")
    p.add_argument("--iterations", type=int)

    return parser


COMMANDS = {
    "ingest": cmd_ingest,
    "translate": cmd_translate,
    "score-coverage": cmd_score_coverage,
    "build-prefs": cmd_build_prefs,
    "train-toy": cmd_train_toy,
    "eval-coverage": cmd_eval_coverage,
    "hard-split": cmd_hard_split,
    "compare": cmd_compare,
    "analyze": cmd_analyze,
    "bootstrap": cmd_bootstrap,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = RunConfig.load(args.config)
        # fold flag overrides into the config so artifact headers hash them
        if args.seed is not None:
            config.seed = args.seed
        if getattr(args, "threshold", None) is not None:
            config.aligner["threshold"] = args.threshold
        if getattr(args, "iterations", None) is not None:
            config.eval["iterations"] = args.iterations
        if getattr(args, "n", None):
            config.eval["n_list"] = [int(n) for n in args.n]
        config.validate()
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](config, out, args)
    except RemoteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (AlignprefError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
