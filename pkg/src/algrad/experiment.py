"""The active-learning loop: training phase, query phase, evaluation and outputs."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import acquisition as acq
from . import losses
from .acquisition import SelectionLog, Strategy
from .config import ConfigError, ExperimentConfig, resolve_path
from .layers import backward
from .models import AuxModel, MainModel, build_models, save_checkpoint
from .optim import sgd_step, zeros_like
from .pool import Dataset, PoolState, annotate_and_move, init_pool, load_csv, load_idx, make_blobs

log = logging.getLogger(__name__)

HIST_BINS = 20
RESULTS_HEADER = ("trial,round,labeled_count,test_accuracy,per_class_accuracy,mean_selected_score,"
                  "train_loss_main,train_loss_aux,wall_clock_train,wall_clock_query")

# Independent RNG streams per trial.
_INIT, _POOL, _TRAIN, _QUERY = range(4)


def stream(seed: int, which: int, round_: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, which, round_])


@dataclass
class TrainResult:
    loss_main: float
    loss_aux: float | None
    epoch_losses: list[tuple[float, float | None]]


@dataclass
class QueryResult:
    candidates: list[int]
    selected: list[int]
    scores: list[float | None]


@dataclass
class EvalResult:
    accuracy: float
    per_class: list[float | None]
    histogram: list[int]


@dataclass
class RoundRecord:
    trial: int
    round: int
    labeled_count: int
    test_accuracy: float
    per_class_accuracy: list[float | None]
    mean_selected_score: float | None
    train_loss_main: float
    train_loss_aux: float | None
    wall_clock_train: float | None
    wall_clock_query: float | None

    def csv_row(self) -> str:
        cells = [
            str(self.trial), str(self.round), str(self.labeled_count), _fmt(self.test_accuracy),
            ";".join("null" if a is None else _fmt(a) for a in self.per_class_accuracy),
            _fmt(self.mean_selected_score), _fmt(self.train_loss_main), _fmt(self.train_loss_aux),
            _fmt(self.wall_clock_train), _fmt(self.wall_clock_query),
        ]
        return ",".join(cells)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


@dataclass
class ExperimentResult:
    records: list[list[RoundRecord]]
    summary: list[dict] = field(default_factory=list)


# -- data --------------------------------------------------------------------

def load_dataset(cfg: ExperimentConfig) -> Dataset:
    spec = dict(cfg.dataset)
    kind = spec.pop("kind")
    normalize = spec.pop("normalize", None)
    num_classes = spec.pop("num_classes", None)
    if kind == "idx":
        train = load_idx(resolve_path(cfg, spec["train_images"]), resolve_path(cfg, spec["train_labels"]),
                         train=True, limit=spec.get("train_limit"), num_classes=num_classes)
        test = load_idx(resolve_path(cfg, spec["test_images"]), resolve_path(cfg, spec["test_labels"]),
                        train=False, limit=spec.get("test_limit"), num_classes=num_classes)
        ds = Dataset.combine(train, test)
    elif kind == "csv":
        train = load_csv(resolve_path(cfg, spec["train"]), train=True, num_classes=num_classes)
        test = load_csv(resolve_path(cfg, spec["test"]), train=False, num_classes=num_classes)
        ds = Dataset.combine(train, test)
        if spec.get("input_shape"):
            ds = ds.reshaped(spec["input_shape"])
    elif kind == "blobs":
        ds = make_blobs(spec.get("n_per_class", 100), num_classes or 3, spec.get("dim", 2),
                        spec.get("spread", 1.0), np.random.default_rng(spec.get("seed", 0)),
                        spec.get("class_ratios"))
    else:
        raise ConfigError("dataset", f"unknown dataset kind {kind!r}")
    if num_classes is not None and ds.num_classes < num_classes:
        ds.num_classes = num_classes
    if normalize:
        ds = ds.normalized(normalize["mean"], normalize["std"])
    return ds


# -- phases ------------------------------------------------------------------

def run_training_phase(main: MainModel, aux: AuxModel, pool: PoolState, dataset: Dataset,
                       cfg: ExperimentConfig, rng: np.random.Generator) -> TrainResult:
    """Train the classifier (and, unless disabled, the loss-prediction head) on L."""
    if not pool.labeled:
        raise ValueError("labeled pool is empty")
    use_aux = cfg.use_aux
    params = main.params.merged(aux.params) if use_aux else main.params
    velocity = zeros_like(params)
    labeled = np.array(pool.labeled, dtype=np.int64)
    labels = pool.labeled_labels()
    batch = min(cfg.minibatch, len(labeled))
    lr = cfg.lr
    epoch_losses = []
    for epoch in range(cfg.epochs_per_round):
        if epoch == cfg.lr_decay_epoch:
            lr *= cfg.lr_decay_factor
        order = rng.permutation(len(labeled))
        main_sum = aux_sum = 0.0
        seen = 0
        for start in range(0, len(order), batch):
            pick = order[start:start + batch]
            x = dataset.samples[labeled[pick]]
            y = labels[pick]
            out = main.forward(x)
            l_main, per_sample = losses.cross_entropy(out.logits, y)
            if use_aux:
                taps = [t.detach() for t in out.taps] if cfg.detach_taps else out.taps
                predicted = aux.forward(taps)
                pairs = losses.make_pairs(len(pick), cfg.pair_batch, rng)
                l_aux = losses.aux_margin_loss(predicted, per_sample.data, cfg.margin,
                                               cfg.aux_loss_mode, pairs)
                total = losses.total_loss(l_main, l_aux, cfg.aux_weight)
            else:
                l_aux = None
                total = l_main
            grads = backward(params, total)
            velocity = sgd_step(params, grads, lr, cfg.momentum, velocity)
            main_sum += l_main.item() * len(pick)
            if l_aux is not None:
                aux_sum += l_aux.item() * len(pick)
            seen += len(pick)
        epoch_losses.append((main_sum / seen, aux_sum / seen if use_aux else None))
    last_main, last_aux = epoch_losses[-1]
    return TrainResult(last_main, last_aux, epoch_losses)


def run_query_phase(main: MainModel, aux: AuxModel, pool: PoolState, dataset: Dataset,
                    cfg: ExperimentConfig, rng: np.random.Generator) -> QueryResult:
    """Pick up to B samples from a random candidate subset of U; models stay frozen."""
    if not pool.unlabeled:
        raise ValueError("unlabeled pool is empty")
    before = main.params.digest() + aux.params.digest()
    candidates = acq.subsample_candidates(pool.unlabeled, cfg.candidate_size, rng)
    x = dataset.samples[np.array(candidates, dtype=np.int64)]
    budget = cfg.query_budget
    strategy = cfg.strategy_enum
    scores: list[float | None]
    if strategy is Strategy.RANDOM:
        selected = acq.select_random(candidates, budget, rng)
        scores = [None] * len(selected)
    elif strategy is Strategy.CORESET:
        lab_x = dataset.samples[np.array(pool.labeled, dtype=np.int64)]
        selected, radii = acq.select_coreset(acq.embeddings(main, lab_x), acq.embeddings(main, x),
                                             budget, candidates)
        scores = list(radii)
    else:
        if strategy in (Strategy.LPLGRAD, Strategy.ENT_GRADNORM):
            ranked = acq.score_lplgrad(main, x, candidates, cfg.grad_last_layer_only)
        elif strategy is Strategy.ENTROPY:
            ranked = acq.score_entropy(main, x, candidates)
        else:
            ranked = acq.score_learning_loss(aux, main, x, candidates)
        selected = acq.select_top_b(ranked, budget)
        by_index = {s.sample_index: s.score for s in ranked}
        scores = [by_index[i] for i in selected]
    if main.params.digest() + aux.params.digest() != before:
        raise RuntimeError("model parameters changed during the query phase")
    return QueryResult(candidates, selected, scores)


def histogram_of_logits(logits: np.ndarray, bins: int = HIST_BINS) -> list[int]:
    """Counts of max-softmax confidence in equal-width bins over [0, 1]."""
    conf = losses.softmax(logits).data.max(axis=1) if len(logits) else np.zeros(0)
    return np.bincount(np.minimum((conf * bins).astype(np.int64), bins - 1), minlength=bins).tolist()


def confidence_histogram(model: MainModel, samples: np.ndarray, bins: int = HIST_BINS) -> list[int]:
    return histogram_of_logits(predict(model, samples), bins)


def predict(model: MainModel, samples: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [model.forward(samples[s:s + batch_size]).logits.data for s in range(0, len(samples), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def evaluate(model: MainModel, samples: np.ndarray, labels: np.ndarray,
             num_classes: int | None = None) -> EvalResult:
    """Accuracy, per-class accuracy (None for absent classes) and a confidence histogram."""
    num_classes = num_classes or model.num_classes
    labels = np.asarray(labels, dtype=np.int64)
    logits = predict(model, samples)
    pred = logits.argmax(axis=1)  # first maximum wins, i.e. lowest class index
    correct = pred == labels
    accuracy = float(correct.mean()) if len(labels) else float("nan")
    per_class: list[float | None] = []
    for c in range(num_classes):
        members = labels == c
        per_class.append(float(correct[members].mean()) if members.any() else None)
    return EvalResult(accuracy, per_class, histogram_of_logits(logits))


# -- experiment --------------------------------------------------------------

def aggregate(records: Sequence[Sequence[RoundRecord]]) -> list[dict]:
    """Mean and sample standard deviation of test accuracy per round across trials."""
    rounds = sorted({r.round for trial in records for r in trial})
    out = []
    for rnd in rounds:
        rows = [r for trial in records for r in trial if r.round == rnd]
        acc = np.array([r.test_accuracy for r in rows])
        std = float(np.std(acc, ddof=1)) if len(acc) > 1 else float("nan")
        out.append({"round": rnd, "labeled_count": rows[0].labeled_count,
                    "mean_accuracy": float(acc.mean()), "std_accuracy": std})
    return out


def write_summary(path, summary: list[dict]) -> None:
    lines = ["round,labeled_count,mean_accuracy,std_accuracy"]
    for row in summary:
        lines.append(f"{row['round']},{row['labeled_count']},{_fmt(row['mean_accuracy'])},"
                     f"{_fmt(row['std_accuracy'])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_trial(cfg: ExperimentConfig, dataset: Dataset, trial: int, out_dir: Path | None = None,
              observer=None) -> list[RoundRecord]:
    seed = cfg.base_seed + trial
    spec = cfg.model_spec
    main, aux = build_models(dataset.input_shape, dataset.num_classes, spec, stream(seed, _INIT))
    pool = init_pool(dataset, cfg.initial_labeled, stream(seed, _POOL))
    train_rng = stream(seed, _TRAIN)
    query_rng = stream(seed, _QUERY)
    test_x, test_y = dataset.test_split()
    sel_path = out_dir / f"selections_trial{trial}.part" if out_dir else None
    if sel_path is not None:
        sel_path.write_text("", encoding="utf-8")
    sel_log = SelectionLog(sel_path) if sel_path else None
    conf_path = out_dir / f"confidence_trial{trial}.jsonl" if out_dir else None
    if conf_path is not None:
        conf_path.write_text("", encoding="utf-8")
    records = []
    for rnd in range(cfg.rounds + 1):
        if cfg.cold_start and rnd > 0:
            main, aux = build_models(dataset.input_shape, dataset.num_classes, spec,
                                     stream(seed, _INIT, rnd))
        t0 = time.perf_counter()
        trained = run_training_phase(main, aux, pool, dataset, cfg, train_rng)
        t_train = time.perf_counter() - t0
        ev = evaluate(main, test_x, test_y, dataset.num_classes)
        labeled_count = len(pool.labeled)
        if observer is not None:
            observer("trained", trial=trial, round=rnd, main=main, aux=aux, pool=pool)
        if conf_path is not None:
            entry = {"round": rnd, "test": ev.histogram}
            if cfg.record_confidence:
                # A forward pass over the whole train split; off by default for speed.
                entry["labeled"] = confidence_histogram(main, dataset.samples[np.array(pool.labeled)])
                entry["unlabeled"] = confidence_histogram(
                    main, dataset.samples[np.array(pool.unlabeled, dtype=np.int64)])
            with open(conf_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")
        if out_dir is not None and cfg.export_embeddings:
            idx = np.arange(len(dataset))
            np.savez(out_dir / f"embeddings_trial{trial}_round{rnd}.npz",
                     embedding=acq.embeddings(main, dataset.samples), index=idx,
                     labeled=np.isin(idx, pool.labeled), is_train=dataset.is_train)
        mean_score = None
        t_query = None
        if rnd < cfg.rounds and pool.unlabeled and cfg.query_budget > 0:
            t0 = time.perf_counter()
            q = run_query_phase(main, aux, pool, dataset, cfg, query_rng)
            t_query = time.perf_counter() - t0
            if observer is not None:
                observer("queried", trial=trial, round=rnd, main=main, aux=aux, pool=pool, query=q)
            if sel_log is not None:
                sel_log.write(rnd, cfg.strategy, len(q.candidates), q.selected, q.scores, trial=trial)
            numeric = [s for s in q.scores if s is not None]
            mean_score = float(np.mean(numeric)) if numeric else None
            labeled_before = len(pool.labeled)
            annotate_and_move(pool, q.selected, dataset.oracle, round_=rnd + 1)
            pool.check()
            assert len(pool.labeled) == labeled_before + len(q.selected)
        records.append(RoundRecord(
            trial=trial, round=rnd, labeled_count=labeled_count,
            test_accuracy=ev.accuracy, per_class_accuracy=ev.per_class, mean_selected_score=mean_score,
            train_loss_main=trained.loss_main, train_loss_aux=trained.loss_aux,
            wall_clock_train=t_train if cfg.record_wall_clock else None,
            wall_clock_query=(t_query if cfg.record_wall_clock else None),
        ))
        log.info("trial %d round %d: |L|=%d acc=%.4f loss=%.4f", trial, rnd,
                 labeled_count, ev.accuracy, trained.loss_main)
    if out_dir is not None:
        save_checkpoint(out_dir / f"model_trial{trial}.algm", main.params.merged(aux.params))
    return records


def _single_threaded_worker() -> None:
    # Trials already saturate the cores; nested scoring threads would oversubscribe them.
    os.environ["ALGRAD_THREADS"] = "1"


def run_experiment(cfg: ExperimentConfig, out_dir=None, dataset: Dataset | None = None,
                   observer=None) -> ExperimentResult:
    """Run every trial, write per-trial CSVs, the merged selection log and the summary.

    With ALGRAD_THREADS > 1 and no observer, trials run in separate processes; outputs are
    written per trial and merged in trial order, so files are identical either way.
    """
    cfg.validate()
    if dataset is None:
        dataset = load_dataset(cfg)
    cfg.validate(train_size=len(dataset.train_indices))
    out = None
    if out_dir is not None or cfg.output_dir:
        out = Path(out_dir) if out_dir is not None else resolve_path(cfg, cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    workers = min(acq.worker_count(), cfg.trials)
    if workers > 1 and observer is None:
        with ProcessPoolExecutor(max_workers=workers, initializer=_single_threaded_worker) as ex:
            futures = [ex.submit(run_trial, cfg, dataset, t, out) for t in range(cfg.trials)]
            all_records = [f.result() for f in futures]
    else:
        all_records = [run_trial(cfg, dataset, t, out, observer) for t in range(cfg.trials)]
    if out is not None:
        with open(out / "selections.jsonl", "w", encoding="utf-8") as merged:
            for trial, records in enumerate(all_records):
                lines = [RESULTS_HEADER] + [r.csv_row() for r in records]
                (out / f"results_trial{trial}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
                part = out / f"selections_trial{trial}.part"
                merged.write(part.read_text(encoding="utf-8"))
                part.unlink()
    summary = aggregate(all_records)
    if out is not None:
        write_summary(out / "summary.csv", summary)
    return ExperimentResult(all_records, summary)
