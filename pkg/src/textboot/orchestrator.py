"""Bootstrap loop: baseline, annotate the pool, retrain, evaluate, repeat.

Round 0 trains only on the small pixel-annotated set.  Each later round
re-annotates the whole pool with the current model (earlier pseudo labels
are superseded, not accumulated), retrains on the pixel-annotated set
plus the fresh pseudo labels, and scores the result on a held-out test
split.  The best round is the one with the highest F-measure, earliest
on ties.  FULLY is the upper-bound setting: one model trained as if the
entire pool had pixel annotations; it performs no pseudo-labeling.

Every run writes a self-describing directory: per-round model files,
pseudo-label manifests and metrics, plus run-level metrics and an
F-versus-round table.  All artifacts are byte-deterministic for a fixed
(datasets, config, seed); wall-clock timings are reported in memory only.
"""

from __future__ import annotations

import enum
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from .data import AnnotationTier, Dataset, read_pgm, save_dataset
from .detector import (
    DetectorModel,
    ExampleSource,
    TrainConfig,
    TrainExample,
    load_model,
    save_model,
    train,
)
from .errors import (
    DimensionMismatchError,
    DisjointnessError,
    EmptyDatasetError,
    TextBootError,
    WrongTierError,
)
from .evaluation import EvalConfig, EvalReport, evaluate
from .geometry import rasterize
from .strategies import (
    Provenance,
    PseudoSet,
    StrategyConfig,
    annotate_pool,
    pseudo_to_dataset,
)


class Strategy(enum.Enum):
    NAIVE = "NAIVE"
    FILTER = "FILTER"
    LOCAL = "LOCAL"
    FULLY = "FULLY"


class RetrainOrigin(enum.Enum):
    FROM_BASELINE = "FROM_BASELINE"
    FROM_PREVIOUS = "FROM_PREVIOUS"


class AnnotateWith(enum.Enum):
    LATEST = "LATEST"
    BEST = "BEST"


@dataclass(frozen=True)
class PipelineConfig:
    strategy: Strategy
    rounds: int = 3
    strategy_cfg: StrategyConfig = StrategyConfig()
    train_cfg: TrainConfig = TrainConfig()
    eval_cfg: EvalConfig = EvalConfig()
    retrain_origin: RetrainOrigin = RetrainOrigin.FROM_BASELINE
    annotate_with: AnnotateWith = AnnotateWith.LATEST
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")


@dataclass(frozen=True)
class RoundReport:
    round_index: int
    precision: float
    recall: float
    f_measure: float
    pseudo_count: int
    model_path: str
    wall_time: float


@dataclass(frozen=True)
class RunResult:
    reports: tuple[RoundReport, ...]
    best_round: int
    incomplete: bool = False
    failure: str | None = None


def best_round_index(reports) -> int:
    """Index of the highest F-measure; earliest wins ties."""
    if not reports:
        return -1
    return max(range(len(reports)), key=lambda i: reports[i].f_measure)


def dataset_examples(
    dataset: Dataset, source: ExampleSource, image_root: Path | str | None = None
) -> list[TrainExample]:
    """Load a pixel-annotated dataset into trainable examples."""
    root = Path(image_root) if image_root is not None else None
    out = []
    for rec in dataset.records:
        if rec.tier is not AnnotationTier.STRONG:
            raise WrongTierError(
                f"{rec.image_id}: training needs pixel annotations, got {rec.tier.name}"
            )
        path = Path(rec.image_path)
        if root is not None and not path.is_absolute():
            path = root / path
        image = read_pgm(path)
        masks = tuple(
            rasterize(p, dataset.image_width, dataset.image_height) for p in rec.polygons
        )
        out.append(TrainExample(image=image, masks=masks, source=source))
    return out


def _check_disjoint(strong: Dataset, pool: Dataset, test: Dataset) -> None:
    sets = {
        "strong": {r.image_id for r in strong.records},
        "pool": {r.image_id for r in pool.records},
        "test": {r.image_id for r in test.records},
    }
    names = list(sets)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            overlap = sorted(sets[a] & sets[b])
            if overlap:
                raise DisjointnessError(
                    f"{a} and {b} share image ids: {', '.join(overlap[:5])}"
                    + ("..." if len(overlap) > 5 else "")
                )


def _check_dims(*datasets: Dataset) -> None:
    dims = {(d.image_width, d.image_height) for d in datasets}
    if len(dims) > 1:
        raise DimensionMismatchError(f"datasets disagree on image dimensions: {sorted(dims)}")


def _evaluate_model(
    model: DetectorModel,
    test: Dataset,
    eval_cfg: EvalConfig,
    image_root: Path | str | None,
    jobs: int,
) -> EvalReport:
    root = Path(image_root) if image_root is not None else None

    def detect_one(rec):
        path = Path(rec.image_path)
        if root is not None and not path.is_absolute():
            path = root / path
        return rec.image_id, model.detect(read_pgm(path))

    if jobs > 1 and len(test.records) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            pairs = list(ex.map(detect_one, test.records))
    else:
        pairs = [detect_one(rec) for rec in test.records]
    return evaluate(dict(pairs), test, eval_cfg)


def _round_dir(run_dir: Path, index: int) -> Path:
    d = run_dir / f"round_{index:03d}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_round_metrics(path: Path, index: int, pseudo_count: int, report: EvalReport) -> None:
    text = f"round={index}\npseudo_count={pseudo_count}\n" + report.to_text()
    path.write_text(text, encoding="utf-8")


def _write_run_metrics(run_dir: Path, reports, best: int) -> None:
    lines = [
        f"round={r.round_index} precision={r.precision!r} recall={r.recall!r} "
        f"f_measure={r.f_measure!r} pseudo_count={r.pseudo_count}"
        for r in reports
    ]
    lines.append(f"best_round={best}")
    (run_dir / "metrics.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    tsv = ["round\tf_measure"] + [f"{r.round_index}\t{r.f_measure!r}" for r in reports]
    (run_dir / "f_vs_round.tsv").write_text("\n".join(tsv) + "\n", encoding="utf-8")


_STRATEGY_TO_PROVENANCE = {
    Strategy.NAIVE: Provenance.NAIVE,
    Strategy.FILTER: Provenance.FILTER,
    Strategy.LOCAL: Provenance.LOCAL,
}


def run_pipeline(
    strong: Dataset,
    pool: Dataset,
    test: Dataset,
    cfg: PipelineConfig,
    run_dir: Path | str,
    image_root: Path | str | None = None,
    jobs: int = 1,
) -> RunResult:
    """Execute one full bootstrap run, writing artifacts under run_dir.

    A domain error mid-round (bad data, diverged training, tier misuse)
    stops the run and returns the rounds finished so far with
    ``incomplete=True``; programming errors propagate.  ``best_round``
    is -1 when not even the baseline round finished.
    """
    if not strong.records:
        raise EmptyDatasetError("the pixel-annotated training split is empty")
    _check_dims(strong, pool, test)
    _check_disjoint(strong, pool, test)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    reports: list[RoundReport] = []
    models: list[DetectorModel] = []
    incomplete = False
    failure = None
    try:
        strong_examples = dataset_examples(strong, ExampleSource.ORIGINAL, image_root)

        if cfg.strategy is Strategy.FULLY:
            for rec in pool.records:
                if rec.tier is not AnnotationTier.STRONG:
                    raise WrongTierError(
                        f"{rec.image_id}: the upper-bound setting needs a pixel-annotated "
                        f"pool, got {rec.tier.name}"
                    )
            rounds_plan = [0]
        else:
            rounds_plan = list(range(cfg.rounds + 1))

        for r in rounds_plan:
            started = time.perf_counter()
            rdir = _round_dir(run_dir, r)
            pseudo_count = 0

            if cfg.strategy is Strategy.FULLY:
                examples = strong_examples + dataset_examples(
                    pool, ExampleSource.ORIGINAL, image_root
                )
                base = None
            elif r == 0:
                examples = strong_examples
                base = None
            else:
                if cfg.annotate_with is AnnotateWith.LATEST:
                    annotator = models[-1]
                else:
                    annotator = models[best_round_index(reports)]
                pseudo = annotate_pool(
                    annotator,
                    pool,
                    _STRATEGY_TO_PROVENANCE[cfg.strategy],
                    cfg.strategy_cfg,
                    round_index=r,
                    image_root=image_root,
                    jobs=jobs,
                )
                pseudo_ds = pseudo_to_dataset(pool, pseudo)
                save_dataset(pseudo_ds, rdir / "pseudo.manifest")
                pseudo_count = pseudo.count
                examples = strong_examples + dataset_examples(
                    pseudo_ds, ExampleSource.PSEUDO, image_root
                )
                base = models[0] if cfg.retrain_origin is RetrainOrigin.FROM_BASELINE else models[-1]

            train_cfg = replace(cfg.train_cfg, seed=cfg.seed + r)
            model = train(base, examples, train_cfg)
            model_path = rdir / "model.bin"
            save_model(model, model_path)
            report = _evaluate_model(model, test, cfg.eval_cfg, image_root, jobs)
            _write_round_metrics(rdir / "metrics.txt", r, pseudo_count, report)

            models.append(model)
            reports.append(
                RoundReport(
                    round_index=r,
                    precision=report.precision,
                    recall=report.recall,
                    f_measure=report.f_measure,
                    pseudo_count=pseudo_count,
                    model_path=str(model_path),
                    wall_time=time.perf_counter() - started,
                )
            )
    except TextBootError as exc:
        incomplete = True
        failure = f"{type(exc).__name__}: {exc}"

    best = best_round_index(reports)
    _write_run_metrics(run_dir, reports, best)
    return RunResult(
        reports=tuple(reports), best_round=best, incomplete=incomplete, failure=failure
    )


def cross_domain_annotate(
    model_path: Path | str,
    target_pool: Dataset,
    out: Path | str,
    strategy_cfg: StrategyConfig | None = None,
    image_root: Path | str | None = None,
    jobs: int = 1,
) -> PseudoSet:
    """Annotate a new domain's weak pool with an already-trained model.

    Applies the one-annotation-per-rectangle strategy and writes the
    result as a pixel-annotated manifest at ``out``, ready to train on.
    """
    model = load_model(model_path)
    pseudo = annotate_pool(
        model,
        target_pool,
        Provenance.LOCAL,
        strategy_cfg or StrategyConfig(),
        round_index=0,
        image_root=image_root,
        jobs=jobs,
    )
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(pseudo_to_dataset(target_pool, pseudo), out)
    return pseudo
