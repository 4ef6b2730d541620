"""Training loop, ensembles and sweeps for the parity benchmark.

One run: seeded init, length-bucketed full-batch gradient steps with Adam on
mean cross-entropy plus lambda times the trajectory-length integral, accuracy
on the whole training set after every epoch, best-so-far tracking with wall
time. The reporting protocol aggregates a grid of learning rates x seeds,
drops the worst runs by accuracy and averages the rest; histograms bin run
accuracies with one catch-all bin up to 0.55 and 0.05-wide bins above.

A run whose forward pass diverges in the solver keeps going (the batch is
skipped); when more than 10% of its batches fail the run is marked invalid
and aggregates count it as accuracy zero.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tape, Tensor
from .data import ParityDataset, gen_dataset
from .model import EncodeError, ModelConfig, TransformerClassifier
from .odeint import SolverError

FAIL_FRACTION_LIMIT = 0.1

HISTOGRAM_EDGES = [0.55 + 0.05 * i for i in range(10)]  # 0.55, 0.60, ..., 1.00


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 400
    lam: float = 0.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be >= 0")
        if self.lam < 0.0:
            raise ValueError("lambda must be >= 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class RunRecord:
    best_accuracy: float
    time_to_best: float
    epoch_of_best: int
    mean_steps_per_block: float | None
    steps_std_per_block: list[float]
    final_reg_integral: float
    failed_batches: int
    total_batches: int
    valid: bool
    learning_rate: float
    seed: int
    lam: float
    model_config: dict
    wall_time: float

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, params: ParameterSet, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under column softmax."""
    n = logits.shape[1]
    if len(labels) != n:
        raise ad.ContractError(f"{len(labels)} labels for {n} logit columns")
    mask = np.zeros(logits.shape)
    mask[labels, np.arange(n)] = 1.0
    picked = ad.mul(ad.log_softmax_columns(logits), Tensor(mask))
    return ad.scale(ad.sum_all(picked), -1.0 / n)


class Trainer:
    """One seeded training run; keeps the model and best-epoch weights."""

    def __init__(self, mcfg: ModelConfig, tcfg: TrainConfig, data: ParityDataset):
        self.mcfg = mcfg
        self.tcfg = tcfg
        self.data = data
        self.model = TransformerClassifier(mcfg, seed=tcfg.seed)
        self.shuffle_rng = np.random.default_rng([tcfg.seed, 1])
        self.buckets = data.buckets()
        self.loss_trace: list[float] = []
        self.best_state: dict[str, np.ndarray] | None = None

    def _evaluate(self) -> float:
        correct = 0
        for _, (toks, labels) in sorted(self.buckets.items()):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    pred = self.model.predict(toks)
            except (SolverError, EncodeError, ad.NumericError):
                continue  # unsolvable inputs score as misclassified
            correct += int((pred == np.asarray(labels)).sum())
        return correct / len(self.data)

    def run(self) -> RunRecord:
        start = time.perf_counter()
        model, tcfg = self.model, self.tcfg
        opt = Adam(model.params, tcfg.learning_rate, tcfg.beta1, tcfg.beta2, tcfg.eps)
        lengths = sorted(self.buckets)
        use_density = tcfg.lam > 0.0
        best_acc = -1.0
        best_epoch = 0
        time_to_best = 0.0
        failed = 0
        total = 0
        # Once this many batches have failed, the >10% invalidity verdict is
        # already certain, so the run may stop early instead of grinding on.
        abort_at = FAIL_FRACTION_LIMIT * tcfg.max_epochs * len(lengths)

        for epoch in range(1, tcfg.max_epochs + 1):
            if failed > abort_at:
                break
            for idx in self.shuffle_rng.permutation(len(lengths)):
                toks, labels = self.buckets[lengths[idx]]
                labels_arr = np.asarray(labels)
                total += 1
                model.params.zero_grad()
                try:
                    # Overflow in a diverging batch is reported once as a
                    # NumericError; silence numpy's per-op warnings.
                    with np.errstate(over="ignore", invalid="ignore"), Tape():
                        x, reg, _ = model.encode_batch(toks, collect_density=use_density)
                        z = model.logits(x, len(toks[0]), len(toks))
                        loss = cross_entropy(z, labels_arr)
                        if use_density:
                            loss = ad.add(loss, ad.scale(reg, tcfg.lam))
                        ad.backward(loss)
                    opt.step()
                    self.loss_trace.append(loss.item())
                except (SolverError, EncodeError, ad.NumericError):
                    failed += 1
            acc = self._evaluate()
            if acc > best_acc:
                best_acc = acc
                best_epoch = epoch
                time_to_best = time.perf_counter() - start
                self.best_state = model.params.state_arrays()

        # Depth/trajectory telemetry describes the final trained state; the
        # kept weights (model + checkpoint) are the best-accuracy ones.
        mean_steps, steps_std, reg_integral = self._probe_final()
        if self.best_state is not None:
            model.params.load_state(self.best_state)
        wall = time.perf_counter() - start
        return RunRecord(
            best_accuracy=best_acc,
            time_to_best=time_to_best,
            epoch_of_best=best_epoch,
            mean_steps_per_block=mean_steps,
            steps_std_per_block=steps_std,
            final_reg_integral=reg_integral,
            failed_batches=failed,
            total_batches=total,
            valid=(failed <= FAIL_FRACTION_LIMIT * total),
            learning_rate=tcfg.learning_rate,
            seed=tcfg.seed,
            lam=tcfg.lam,
            model_config=self.mcfg.to_dict(),
            wall_time=wall,
        )

    def _probe_final(self) -> tuple[float | None, list[float], float]:
        """Per-input depth and trajectory integral of the trained model.

        Encodes every training string on its own so the adaptive solver's
        step count reflects that single input; returns the mean accepted
        steps per block, the across-inputs std per block, and the mean
        unweighted trajectory integral.
        """
        if self.mcfg.architecture != "node":
            return None, [], 0.0
        counts = [[] for _ in range(self.mcfg.n_blocks)]
        integrals = []
        with ad.no_grad(), np.errstate(over="ignore", invalid="ignore"):
            for tokens, _ in self.data.items:
                try:
                    _, reg, stats = self.model.encode(tokens)
                except (SolverError, EncodeError, ad.NumericError):
                    continue
                integrals.append(reg.item())
                for i, st in enumerate(stats):
                    counts[i].append(st.accepted_steps)
        if not integrals:
            return None, [], float("nan")
        mean_steps = float(np.mean([np.mean(c) for c in counts]))
        steps_std = [float(np.std(c)) for c in counts]
        return mean_steps, steps_std, float(np.mean(integrals))


def train_run(mcfg: ModelConfig, tcfg: TrainConfig, data: ParityDataset) -> RunRecord:
    return Trainer(mcfg, tcfg, data).run()


# ---- ensembles ------------------------------------------------------------


@dataclass
class EnsembleSummary:
    runs: list[RunRecord]
    drop_k: int
    avg_accuracy: float
    avg_time: float
    avg_steps: float | None
    avg_reg_integral: float
    histogram: list[int]
    bin_edges: list[float] = field(default_factory=lambda: list(HISTOGRAM_EDGES))

    def to_dict(self) -> dict:
        return {
            "drop_k": self.drop_k,
            "avg_accuracy": self.avg_accuracy,
            "avg_time": self.avg_time,
            "avg_steps": self.avg_steps,
            "avg_reg_integral": self.avg_reg_integral,
            "histogram": self.histogram,
            "bin_edges": self.bin_edges,
            "runs": [r.to_dict() for r in self.runs],
        }


def accuracy_histogram(accuracies) -> list[int]:
    """Counts per bin: (-inf, 0.55], then (0.55+0.05k, 0.60+0.05k] up to 1.0."""
    counts = [0] * len(HISTOGRAM_EDGES)
    for a in accuracies:
        if a <= HISTOGRAM_EDGES[0]:
            counts[0] += 1
            continue
        for i in range(1, len(HISTOGRAM_EDGES)):
            if a <= HISTOGRAM_EDGES[i] + 1e-12:
                counts[i] += 1
                break
    return counts


def effective_accuracy(record: RunRecord) -> float:
    return record.best_accuracy if record.valid else 0.0


def trimmed_records(records: list[RunRecord], drop_k: int) -> list[RunRecord]:
    """Drop the `drop_k` worst by accuracy (ties broken by list position)."""
    if drop_k < 0 or drop_k >= len(records):
        raise ValueError(f"drop_k must be in [0, {len(records) - 1}], got {drop_k}")
    order = sorted(range(len(records)), key=lambda i: (effective_accuracy(records[i]), i))
    kept = sorted(order[drop_k:])
    return [records[i] for i in kept]


def summarize_ensemble(records: list[RunRecord], drop_k: int) -> EnsembleSummary:
    kept = trimmed_records(records, drop_k)
    accs = [effective_accuracy(r) for r in kept]
    steps = [r.mean_steps_per_block for r in kept if r.mean_steps_per_block is not None]
    regs = [r.final_reg_integral for r in kept if math.isfinite(r.final_reg_integral)]
    return EnsembleSummary(
        runs=records,
        drop_k=drop_k,
        avg_accuracy=float(np.mean(accs)),
        avg_time=float(np.mean([r.time_to_best for r in kept])),
        avg_steps=float(np.mean(steps)) if steps else None,
        avg_reg_integral=float(np.mean(regs)) if regs else float("nan"),
        histogram=accuracy_histogram([effective_accuracy(r) for r in records]),
    )


def _run_one(args: tuple[ModelConfig, TrainConfig, int]) -> RunRecord:
    mcfg, tcfg, max_len = args
    return train_run(mcfg, tcfg, gen_dataset(max_len))


def run_ensemble(mcfg: ModelConfig, data: ParityDataset, lr_grid: list[float],
                 seeds_per_lr: int, *, lam: float = 0.0, drop_k: int = 0,
                 max_epochs: int = 400, seed_base: int = 0,
                 workers: int = 1) -> EnsembleSummary:
    """Independent runs over the (learning rate, seed) grid, then trim-average.

    Run i (enumerated learning-rate-major) gets seed seed_base + i, so every
    run has a distinct initialization and the aggregate is reproducible from
    (lr_grid, seeds_per_lr, seed_base) alone, regardless of worker count.
    """
    tasks = []
    for li, lr in enumerate(lr_grid):
        for s in range(seeds_per_lr):
            tcfg = TrainConfig(
                learning_rate=lr, max_epochs=max_epochs, lam=lam,
                seed=seed_base + li * seeds_per_lr + s,
            )
            tasks.append((mcfg, tcfg, data.max_len))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_one, tasks))
    else:
        records = [_run_one(t) for t in tasks]
    records.sort(key=lambda r: (r.learning_rate, r.seed))
    return summarize_ensemble(records, drop_k)


DEFAULT_LR_GRID = [3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4]


def default_lambda_grid() -> list[float]:
    """4^(2-i) for i = 1..15, i.e. 4 down to 4**-13, descending."""
    return [4.0 ** (2 - i) for i in range(1, 16)]


def lambda_sweep(mcfg: ModelConfig, data: ParityDataset, lambda_grid: list[float],
                 lr_grid: list[float], seeds_per_lr: int, *, drop_k: int = 0,
                 max_epochs: int = 400, seed_base: int = 0,
                 workers: int = 1) -> list[tuple[float, EnsembleSummary]]:
    """One trimmed ensemble per regularization coefficient."""
    out = []
    for lam in lambda_grid:
        summary = run_ensemble(
            mcfg, data, lr_grid, seeds_per_lr, lam=lam, drop_k=drop_k,
            max_epochs=max_epochs, seed_base=seed_base, workers=workers,
        )
        out.append((lam, summary))
    return out
