"""Iterative pruning loop: train, score, remove top-k, reinitialize.

Rounds repeat until the trainable-parameter budget is met, then the
surviving configuration is retrained from fresh adapter initialization.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import criteria as C
from . import supernet as S
from .supernet import MaskState, PeftModuleId, Supernet, trainable_param_count
from .strategy import ProbabilityVector
from .tasks import Batcher, Dataset
from .tensor import Adam, backward, softmax_cross_entropy


@dataclass
class PruneSchedule:
    budget: int
    rounds: int
    k: int
    steps_per_round: int
    fidelity: str = "full"  # "full" trains rounds on D, "low" on trimmed d
    reinit_survivors: bool = True

    def __post_init__(self):
        if self.fidelity not in ("full", "low"):
            raise ValueError(f"fidelity must be 'full' or 'low', got {self.fidelity!r}")
        if self.rounds >= 1 and (self.k < 1 or self.steps_per_round < 1):
            raise ValueError("k and steps_per_round must be positive")


@dataclass
class PruneRecord:
    round_index: int
    pruned: list
    probabilities: ProbabilityVector
    param_count_after: int
    criterion_by_module: dict = field(default_factory=dict)


@dataclass
class SearchLog:
    warmup_epochs: float = 0.0
    prune_epochs: float = 0.0
    retrain_epochs: float = 0.0
    wall_seconds: float = 0.0

    @property
    def search_epochs(self):
        return self.warmup_epochs + self.prune_epochs


def default_k(supernet: Supernet) -> int:
    return -(-supernet.mask.num_active() // 12)


def default_budget(supernet: Supernet) -> int:
    """Budget reached by removing the num_layers smallest modules.

    Keeps the worst-case round count at num_layers / k, matching the
    search-cost bound.
    """
    sizes = sorted(supernet.module_size(m) for m in supernet.mask.active_ids())
    return trainable_param_count(supernet) - sum(sizes[: supernet.config.num_layers])


def derive_schedule(budget: int, supernet: Supernet, k: int, steps_per_round: int,
                    fidelity: str = "full", reinit_survivors: bool = True) -> PruneSchedule:
    """Smallest round count guaranteed to reach the budget.

    Uses a pessimistic smallest-module-first simulation, so the actual
    probability-driven pruning can only reach the budget sooner.
    """
    head = supernet.config.head_param_count()
    if budget < head:
        raise ValueError(
            f"budget {budget} below classifier head size {head}; minimum achievable"
            f" trainable count is {head}")
    count = trainable_param_count(supernet)
    if budget >= count:
        return PruneSchedule(budget=budget, rounds=0, k=k,
                             steps_per_round=steps_per_round, fidelity=fidelity,
                             reinit_survivors=reinit_survivors)
    sizes = sorted(supernet.module_size(m) for m in supernet.mask.active_ids())
    rounds = 0
    i = 0
    while count > budget:
        if i >= len(sizes):
            raise ValueError(f"budget {budget} unreachable; minimum is {count}")
        rounds += 1
        for _ in range(k):
            if i >= len(sizes) or count <= budget:
                break
            count -= sizes[i]
            i += 1
    return PruneSchedule(budget=budget, rounds=rounds, k=k,
                         steps_per_round=steps_per_round, fidelity=fidelity,
                         reinit_survivors=reinit_survivors)


def select_top_k(pv: ProbabilityVector, k: int):
    """The k highest-probability modules, ties broken by (layer, kind)."""
    order = sorted(range(len(pv.ids)),
                   key=lambda i: (-pv.p[i], pv.ids[i].sort_key()))
    return [pv.ids[i] for i in order[: min(k, len(order))]]


def prune_round(supernet: Supernet, scorer, batches, k: int, steps: int,
                optimizer: Adam, rng, round_index: int) -> PruneRecord:
    """Train, score, deactivate the top-k. Reinitialization is the caller's
    job because terminality is only known after the round."""
    active_before = supernet.mask.num_active()
    if active_before == 0:
        raise ValueError("no active modules left to prune")
    stats, _ = C.collect_stats(supernet, batches, steps, optimizer)
    pv, crit_map = scorer(stats, rng)
    pruned = select_top_k(pv, min(k, active_before))
    for mid in pruned:
        supernet.mask.deactivate(mid)
    return PruneRecord(
        round_index=round_index,
        pruned=pruned,
        probabilities=pv,
        param_count_after=trainable_param_count(supernet),
        criterion_by_module={mid: crit_map.get(mid, "") for mid in pruned},
    )


def run_search(supernet: Supernet, full_data: Dataset, trimmed_data: Dataset,
               scorer, schedule: PruneSchedule, lr: float, batch_size: int,
               seed: int):
    """Execute the full pruning schedule.

    Returns (final MaskState, PruneRecords, SearchLog). Epochs in the log
    are measured in full-dataset equivalents.
    """
    ss = np.random.SeedSequence([int(seed), 0x5EA2])
    shuffle_rng, score_rng, reinit_rng = [np.random.default_rng(c) for c in ss.spawn(3)]
    data = trimmed_data if schedule.fidelity == "low" else full_data
    batcher = Batcher(data, batch_size, shuffle_rng)
    records = []
    log = SearchLog()
    start = time.perf_counter()
    optimizer = Adam(supernet.trainable_params(), lr=lr)
    for i in range(1, schedule.rounds + 1):
        if supernet.mask.num_active() == 0:
            break
        record = prune_round(supernet, scorer, batcher, schedule.k,
                             schedule.steps_per_round, optimizer, score_rng, i)
        records.append(record)
        log.prune_epochs += schedule.steps_per_round * batcher.batch_size / len(full_data)
        done = (i == schedule.rounds
                or record.param_count_after <= schedule.budget
                or supernet.mask.num_active() == 0)
        if done:
            break
        if schedule.reinit_survivors:
            for mid in supernet.mask.active_ids():
                S.reinitialize(supernet.modules[mid], reinit_rng)
        # surviving parameter set changed; restart optimizer state
        optimizer = Adam(supernet.trainable_params(), lr=lr)
    log.wall_seconds = time.perf_counter() - start
    final_count = trainable_param_count(supernet)
    if schedule.rounds > 0 and final_count > schedule.budget:
        raise RuntimeError(
            f"search ended above budget: {final_count} > {schedule.budget}")
    return supernet.mask.copy(), records, log


def evaluate(supernet: Supernet, dataset: Dataset, mask: MaskState | None = None,
             batch_size: int = 64) -> float:
    """Accuracy in percent."""
    correct = 0
    for lo in range(0, len(dataset), batch_size):
        tokens = dataset.tokens[lo: lo + batch_size]
        labels = dataset.labels[lo: lo + batch_size]
        correct += int((supernet.predict(tokens, mask=mask) == labels).sum())
    return 100.0 * correct / len(dataset)


def retrain(supernet: Supernet, mask: MaskState, train_data: Dataset, epochs: int,
            lr: float, batch_size: int, seed: int, eval_data: Dataset | None = None):
    """Fresh-start training of the final configuration; the mask is fixed."""
    supernet.apply_mask(mask)
    ss = np.random.SeedSequence([int(seed), 0x2E7A])
    reinit_rng, head_rng, shuffle_rng = [np.random.default_rng(c) for c in ss.spawn(3)]
    for mid in supernet.mask.active_ids():
        S.reinitialize(supernet.modules[mid], reinit_rng)
    S.init_head(supernet, head_rng)
    params = supernet.trainable_params()
    optimizer = Adam(params, lr=lr)
    batcher = Batcher(train_data, batch_size, shuffle_rng)
    steps = batcher.steps_per_epoch()
    loss_curve = []
    for _ in range(epochs):
        epoch_loss = 0.0
        for _ in range(steps):
            tokens, labels = next(batcher)
            loss = softmax_cross_entropy(supernet.forward(tokens), labels)
            backward(loss, params=params)
            optimizer.step()
            epoch_loss += float(loss.data)
        loss_curve.append(epoch_loss / steps)
    metrics = {
        "loss_curve": loss_curve,
        "train_accuracy": evaluate(supernet, train_data),
    }
    if eval_data is not None:
        metrics["accuracy"] = evaluate(supernet, eval_data)
    return metrics


def search_cost_bound(n_pa: int, n_sa: int, num_layers: int, k: int,
                      t_epoch: float) -> float:
    """Worst-case search overhead: (N_PA * N_SA) * (|H| / k) * t."""
    if min(n_pa, n_sa, num_layers, k) < 1 or t_epoch <= 0:
        raise ValueError("all cost-bound arguments must be positive")
    return (n_pa * n_sa) * (num_layers / k) * t_epoch
