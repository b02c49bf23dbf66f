"""
Experiment Orchestrator

Trains the MAP adapters for every seed and, at each evaluation checkpoint,
scores MAP, the enabled baselines and every configured Laplace method on the
in-distribution test set and each shifted copy of it.

Seeds run concurrently on a thread pool. Rows are gathered by a
lock-protected collector and sorted before anything is written, so the
output does not depend on completion order.
"""

import logging
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.special import softmax

from laplace_lora.baselines import ensemble_probs, mc_dropout_probs, temp_fit_dataset
from laplace_lora.config import (
    ExperimentConfig,
    FisherVariant,
    Predictor,
    Scope,
    TaskName,
    TuningMode,
)
from laplace_lora.core.curvature import fit_fisher
from laplace_lora.core.errors import NonPositiveAlpha
from laplace_lora.core.laplace import (
    LaplacePosterior,
    TuningResult,
    build_posterior,
    optimize_prior_evidence,
    optimize_prior_valnll,
    scope_sublayers,
)
from laplace_lora.core.lora_net import LoraNetwork, init_network, predict_logits
from laplace_lora.core.predict import predict_dataset
from laplace_lora.core.train import Checkpoint, map_finetune
from laplace_lora.data import (
    Dataset,
    Split,
    apply_shifts,
    gen_synthetic,
    load_csv,
    train_val_split,
)
from laplace_lora.metrics import EceConfig, EvalRecords, evaluate

logger = logging.getLogger("laplace-lora.orchestrator")

RESULT_COLUMNS = ["dataset", "shift", "method", "seed", "step", "acc", "ece", "nll"]
SORT_KEYS = ["dataset", "shift", "method", "seed", "step"]
ID_SHIFT = "none"
PARTIAL_NAME = "results.partial.csv"


def derived_seed(*parts: Union[int, str]) -> int:
    """Stable seed from ints and labels; labels hash with crc32, not hash()"""
    key = [p if isinstance(p, int) else zlib.crc32(p.encode()) for p in parts]
    return int(np.random.default_rng(key).integers(0, 2**31 - 1))


def method_name(scope: Scope, variant: FisherVariant, first_layers: int = 1) -> str:
    """
    LA, LLLA or FIRST<k> for KFAC, with a -diag or -full suffix for the
    other variants
    """
    scope = Scope(scope)
    variant = FisherVariant(variant)
    name = f"FIRST{first_layers}" if scope == Scope.FIRSTK else scope.value
    if variant == FisherVariant.KFAC:
        return name
    return f"{name}-{variant.value}"


@dataclass
class RunResult:
    """
    Evaluation rows of one experiment

    Attributes:
        rows: DataFrame with RESULT_COLUMNS, one row per
            (dataset, shift, method, seed, step)
    """

    rows: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=RESULT_COLUMNS))

    def __post_init__(self) -> None:
        missing = [c for c in RESULT_COLUMNS if c not in self.rows.columns]
        if missing:
            raise ValueError(f"Result rows lack columns {missing}")
        self.rows = canonical(self.rows)

    @property
    def empty(self) -> bool:
        return self.rows.empty

    @property
    def methods(self) -> List[str]:
        return sorted(self.rows["method"].unique().tolist())

    @property
    def steps(self) -> List[int]:
        return sorted(int(s) for s in self.rows["step"].unique())

    def select(self, methods: Optional[Sequence[str]] = None) -> "RunResult":
        if methods is None:
            return self
        return RunResult(self.rows[self.rows["method"].isin(list(methods))])

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "RunResult":
        frame = pd.read_csv(
            path,
            dtype={"dataset": str, "shift": str, "method": str},
            keep_default_na=False,
            float_precision="round_trip",
        )
        return cls(frame)


def canonical(rows: pd.DataFrame) -> pd.DataFrame:
    """Column order, dtypes and row order used everywhere results are written"""
    frame = rows.loc[:, RESULT_COLUMNS].copy()
    frame = frame.astype(
        {
            "dataset": str,
            "shift": str,
            "method": str,
            "seed": np.int64,
            "step": np.int64,
            "acc": np.float64,
            "ece": np.float64,
            "nll": np.float64,
        }
    )
    return frame.sort_values(SORT_KEYS, kind="mergesort").reset_index(drop=True)


class ResultCollector:
    """Thread-safe accumulator of result rows"""

    def __init__(self) -> None:
        self._rows: List[Dict[str, Any]] = []
        self._lock = threading.Lock()

    def add(self, rows: Sequence[Dict[str, Any]]) -> None:
        with self._lock:
            self._rows.extend(rows)

    def __len__(self) -> int:
        with self._lock:
            return len(self._rows)

    def result(self) -> RunResult:
        with self._lock:
            frame = pd.DataFrame(list(self._rows), columns=RESULT_COLUMNS)
        return RunResult(frame)


@dataclass(frozen=True)
class TaskData:
    """
    Splits for one run

    Attributes:
        fit: Rows the adapters are trained on (train minus the validation carve-out)
        val: Validation carve-out, when tuning or temperature scaling needs one
        test: In-distribution test set
        name: Dataset label used in result rows
    """

    fit: Dataset
    val: Optional[Dataset]
    test: Dataset
    name: str

    def eval_sets(self, shifts: Sequence[str], seed: int) -> Dict[str, Dataset]:
        sets = {ID_SHIFT: self.test}
        for spec in shifts:
            sets[spec] = apply_shifts(self.test, spec, derived_seed(seed, spec))
        return sets


def prepare_data(cfg: ExperimentConfig) -> TaskData:
    """Generate or load the train/test sets and carve validation when needed"""
    task = cfg.task
    if task.name == TaskName.CSV:
        assert task.train_csv is not None and task.test_csv is not None
        train = load_csv(task.train_csv, task.n_classes, Split.TRAIN)
        test = load_csv(task.test_csv, task.n_classes, Split.TEST)
        name = train.name
    else:
        train = gen_synthetic(
            task.name.value,
            task.n_per_class,
            n_classes=task.n_classes,
            noise=task.noise,
            seed=task.seed,
            input_dim=task.input_dim,
            split=Split.TRAIN,
        )
        test = gen_synthetic(
            task.name.value,
            task.n_test_per_class,
            n_classes=task.n_classes,
            noise=task.noise,
            seed=derived_seed(task.seed, "test"),
            input_dim=task.input_dim,
            split=Split.TEST,
        )
        name = task.name.value

    val = None
    if cfg.needs_validation_split:
        train, val = train_val_split(train, cfg.experiment.val_fraction, task.seed)
    logger.info(
        f"Data {name}: train={train.size} val={val.size if val else 0} test={test.size}"
    )
    return TaskData(fit=train, val=val, test=test, name=name)


def train_seed(cfg: ExperimentConfig, data: Dataset, seed: int) -> List[Checkpoint]:
    """MAP checkpoints at the evaluation cadence for one seed"""
    net = init_network(cfg.network, seed)
    train_cfg = cfg.train.model_copy(update={"seed": seed, "checkpoint_every": cfg.eval_every})
    return map_finetune(net, data, train_cfg)


def fit_laplace(
    cfg: ExperimentConfig,
    net: LoraNetwork,
    data: TaskData,
    scope: Scope,
    variant: FisherVariant,
    seed: int,
) -> TuningResult:
    """Curvature at net plus prior precision tuned by the configured mode"""
    la = cfg.laplace
    fisher = fit_fisher(
        net,
        data.fit,
        variant,
        scope_sublayers(net, scope, la.first_layers),
        n_kfac=la.n_kfac,
        fisher_mode=la.fisher_mode,
        seed=derived_seed(seed, "kfac"),
        batch=la.kfac_batch,
    )
    post = build_posterior(net, fisher, scope, la.prior_precision)
    if la.tuning == TuningMode.EVIDENCE:
        return optimize_prior_evidence(
            post,
            net,
            data.fit,
            eta=la.evidence_eta,
            steps=la.evidence_steps,
            per_sublayer=la.per_sublayer,
        )
    if la.tuning == TuningMode.VALNLL:
        assert data.val is not None
        return optimize_prior_valnll(
            post,
            net,
            data.val,
            eta=la.valnll_eta,
            steps=la.valnll_steps,
            batch=la.valnll_batch,
            mc_samples=la.valnll_mc_samples,
            seed=derived_seed(seed, "valnll"),
            eval_every=la.valnll_eval_every,
            eval_samples=la.valnll_eval_samples,
            per_sublayer=la.per_sublayer,
        )
    return TuningResult(prior_precision=post.prior_precision, posterior=post)


def laplace_probs(
    cfg: ExperimentConfig,
    net: LoraNetwork,
    post: LaplacePosterior,
    method: str,
    features: np.ndarray,
    seed: int,
) -> Dict[str, np.ndarray]:
    """
    Predictive probabilities under the configured predictor, and with
    predict.compare every other predictor as <method>/<predictor>

    A bridge that produces a non-positive Dirichlet parameter is skipped
    with a warning.
    """
    main = Predictor(cfg.predict.predictor)
    wanted = {method: main}
    if cfg.predict.compare:
        for predictor in Predictor:
            if predictor != main:
                wanted[f"{method}/{predictor.value}"] = predictor
    bridge = {k: v for k, v in wanted.items() if v == Predictor.BRIDGE}
    others = {k: v for k, v in wanted.items() if v != Predictor.BRIDGE}

    out: Dict[str, np.ndarray] = {}
    if others:
        out.update(
            predict_dataset(net, post, features, others, cfg.predict.n_samples, seed)
        )
    for name, predictor in bridge.items():
        try:
            out.update(predict_dataset(net, post, features, {name: predictor}, seed=seed))
        except NonPositiveAlpha as e:
            logger.warning(f"⚠️ Skipping {name}: {e}")
    return out


def check_predictor_ordering(rows: Sequence[Dict[str, Any]]) -> List[str]:
    """
    Soft check that NLL orders mc_joint <= mc_indep <= bridge per method

    Returns the violations; they are logged, never raised.
    """
    scores = {(r["shift"], r["method"]): r["nll"] for r in rows}
    violations = []
    for (shift, method), joint in scores.items():
        if "/" in method:
            continue
        chain = [
            joint,
            scores.get((shift, f"{method}/{Predictor.MC_INDEP.value}")),
            scores.get((shift, f"{method}/{Predictor.BRIDGE.value}")),
        ]
        values = [v for v in chain if v is not None]
        if any(a > b for a, b in zip(values, values[1:])):
            violations.append(f"{method} on {shift}: {values}")
    for v in violations:
        logger.warning(f"⚠️ Predictor NLL ordering not met for {v}")
    return violations


def evaluate_checkpoint(
    cfg: ExperimentConfig,
    data: TaskData,
    seed: int,
    history: Sequence[Checkpoint],
    members: Sequence[Sequence[Checkpoint]] = (),
) -> List[Dict[str, Any]]:
    """
    Rows for the last checkpoint in history

    Args:
        history: Checkpoints of the seed up to and including the one evaluated
        members: Checkpoint lists of the extra deep-ensemble members
    """
    ckpt = history[-1]
    net = ckpt.net
    step = ckpt.step
    sets = data.eval_sets(cfg.experiment.shifts, seed)
    ece_cfg = EceConfig(cfg.experiment.ece_bins)
    base = cfg.baselines
    probs: Dict[str, Dict[str, np.ndarray]] = {shift: {} for shift in sets}

    temperature = None
    if base.temperature:
        assert data.val is not None
        temperature = temp_fit_dataset(net, data.val)

    for shift, ds in sets.items():
        logits = predict_logits(net, ds.features)
        probs[shift]["MAP"] = softmax(logits, axis=1)
        if temperature is not None:
            probs[shift]["temperature"] = temperature.apply(logits)
        if base.mc_dropout:
            probs[shift]["mc_dropout"] = mc_dropout_probs(
                net,
                ds.features,
                rate=cfg.train.dropout_rate,
                n=base.mc_dropout_samples,
                seed=derived_seed(seed, step, "mc_dropout", shift),
            )
        if base.checkpoint_ensemble:
            recent = [c.net for c in history[-base.checkpoint_ensemble_size :]]
            probs[shift]["checkpoint_ensemble"] = ensemble_probs(recent, ds.features)
        if base.deep_ensemble:
            nets = [net] + [m[len(history) - 1].net for m in members]
            probs[shift]["deep_ensemble"] = ensemble_probs(nets, ds.features)

    for scope in cfg.laplace.scopes:
        for variant in cfg.laplace.variants:
            method = method_name(scope, variant, cfg.laplace.first_layers)
            tuned = fit_laplace(cfg, net, data, scope, variant, derived_seed(seed, step))
            logger.info(
                f"{method} seed={seed} step={step}: "
                f"lambda={np.round(tuned.prior_precision, 6).tolist()}"
            )
            for shift, ds in sets.items():
                probs[shift].update(
                    laplace_probs(
                        cfg,
                        net,
                        tuned.posterior,
                        method,
                        ds.features,
                        derived_seed(seed, step, method, shift),
                    )
                )

    rows = []
    for shift, by_method in probs.items():
        labels = sets[shift].labels
        for method, p in by_method.items():
            scores = evaluate(EvalRecords(p, labels), ece_cfg)
            rows.append(
                {
                    "dataset": data.name,
                    "shift": shift,
                    "method": method,
                    "seed": seed,
                    "step": step,
                    **scores,
                }
            )
    if cfg.predict.compare:
        check_predictor_ordering(rows)
    return rows


def run_seed(
    cfg: ExperimentConfig, data: TaskData, seed: int, collector: ResultCollector
) -> None:
    """Train one seed (plus its ensemble members) and evaluate every checkpoint"""
    checkpoints = train_seed(cfg, data.fit, seed)
    members: List[List[Checkpoint]] = []
    if cfg.baselines.deep_ensemble:
        for m in range(1, cfg.baselines.deep_ensemble_size):
            members.append(train_seed(cfg, data.fit, derived_seed(seed, "member", m)))

    for i in range(len(checkpoints)):
        rows = evaluate_checkpoint(cfg, data, seed, checkpoints[: i + 1], members)
        collector.add(rows)
        logger.info(f"✅ seed={seed} step={checkpoints[i].step}: {len(rows)} rows")


def run_experiment(
    cfg: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None
) -> RunResult:
    """
    Run every seed of an experiment

    Args:
        cfg: Validated configuration
        out_dir: Where results.partial.csv goes if a seed fails
            (defaults to experiment.output_dir)

    Returns:
        RunResult with rows sorted by (dataset, shift, method, seed, step)

    Raises:
        Whatever a seed raised, after the rows gathered so far are flushed
    """
    data = prepare_data(cfg)
    collector = ResultCollector()
    seeds = list(cfg.experiment.seeds)
    logger.info(
        f"Running {len(seeds)} seed(s), eval every {cfg.eval_every} steps, "
        f"{cfg.experiment.workers} worker(s)"
    )

    with ThreadPoolExecutor(max_workers=cfg.experiment.workers) as pool:
        futures = {pool.submit(run_seed, cfg, data, seed, collector): seed for seed in seeds}
        try:
            for future in as_completed(futures):
                future.result()
        except Exception:
            for pending in futures:
                pending.cancel()
            target = Path(out_dir or cfg.experiment.output_dir) / PARTIAL_NAME
            target.parent.mkdir(parents=True, exist_ok=True)
            collector.result().rows.to_csv(target, index=False, float_format="%.17g")
            logger.error(f"Run failed; {len(collector)} rows flushed to {target}")
            raise

    result = collector.result()
    logger.info(f"✅ Experiment finished with {len(result.rows)} rows")
    return result


def cadence_rows(steps: int, eval_every: int) -> int:
    """Evaluation rows per (method, seed, shift): floor(steps/eval_every), +1 off-cadence final"""
    return steps // eval_every + (1 if steps % eval_every else 0)


__all__ = [
    "RESULT_COLUMNS",
    "RunResult",
    "ResultCollector",
    "TaskData",
    "cadence_rows",
    "derived_seed",
    "evaluate_checkpoint",
    "fit_laplace",
    "method_name",
    "prepare_data",
    "run_experiment",
    "train_seed",
]
