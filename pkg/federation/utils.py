"""
Protocol core: device/server state, weighted averaging, the FedAvg baseline,
the Fork phase and the Merge-Consolidate phase.

Every phase runs rounds in the same shape: per-device work (training,
evaluation) on snapshots, possibly in worker threads, followed by a
single-threaded commit that averages, deploys, moves devices between groups,
writes the ledger and checks the structural invariants.
"""
import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from cost_ledger.utils import PHASE_FEDAVG, PHASE_FORK, PHASE_MERGE, CostLedger
from learner.exceptions import DimensionMismatchError, TrainingDivergenceError
from learner.utils import (
    ModelParams,
    average_fisher,
    compute_fisher_diag,
    ewc_sgd_epochs,
    forward_eval,
    sgd_epochs,
)

from .seeding import Purpose, SeedStream

logger = logging.getLogger(__name__)


class FederationError(Exception):
    """Protocol precondition or structural invariant violated"""


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class DeviceState:
    """
    One simulated device. It holds exactly one model at any time: receiving
    a model replaces the previous one.
    """
    device_id: int
    shard: object  # data_plane.utils.DeviceShard
    group_id: int
    current_model: ModelParams
    loss_history: list = field(default_factory=list)  # (round, validation loss)
    acc_history: list = field(default_factory=list)  # (round, validation accuracy %)

    def receive(self, model):
        if not isinstance(model, ModelParams):
            raise FederationError(f"device {self.device_id} was sent {type(model).__name__}, not ModelParams")
        self.current_model = model

    def record_eval(self, round_index, result):
        self.loss_history.append((round_index, result.mean_loss))
        self.acc_history.append((round_index, result.accuracy))

    @property
    def n_k(self):
        return self.shard.n_k


@dataclass(eq=False)
class Group:
    group_id: int
    members: list
    model: ModelParams
    created_round: int


class GroupTable:
    """
    Live groups keyed by id. Ids are handed out by a counter and never
    reused, even after a group is retired.
    """

    def __init__(self, next_id=0):
        self._groups = {}
        self.next_id = next_id

    @classmethod
    def single(cls, model, device_ids, created_round=0):
        table = cls()
        table.create(device_ids, model, created_round)
        return table

    def __len__(self):
        return len(self._groups)

    def __iter__(self):
        return iter(self._groups[gid] for gid in sorted(self._groups))

    def __contains__(self, group_id):
        return group_id in self._groups

    def ids(self):
        return sorted(self._groups)

    def get(self, group_id):
        try:
            return self._groups[group_id]
        except KeyError:
            raise FederationError(f"group {group_id} is not live")

    def create(self, members, model, created_round):
        group = Group(self.next_id, sorted(members), model, created_round)
        self._groups[group.group_id] = group
        self.next_id += 1
        return group

    def restore(self, group_id, members, model, created_round):
        """Re-insert a group under its original id (checkpoint restore)"""
        if group_id in self._groups:
            raise FederationError(f"group {group_id} restored twice")
        self._groups[group_id] = Group(group_id, sorted(members), model, created_round)
        self.next_id = max(self.next_id, group_id + 1)

    def retire(self, group_id):
        self._groups.pop(group_id)

    def retire_empty(self):
        retired = [gid for gid, group in self._groups.items() if not group.members]
        for gid in retired:
            del self._groups[gid]
        return sorted(retired)

    def membership(self):
        return {device_id: group.group_id for group in self for device_id in group.members}

    def assert_partition(self, device_ids):
        seen = {}
        for group in self:
            if not group.members:
                raise FederationError(f"group {group.group_id} is empty")
            for device_id in group.members:
                if device_id in seen:
                    raise FederationError(
                        f"device {device_id} is in groups {seen[device_id]} and {group.group_id}"
                    )
                seen[device_id] = group.group_id
        missing = set(device_ids) - set(seen)
        extra = set(seen) - set(device_ids)
        if missing or extra:
            raise FederationError(f"groups do not partition the devices (missing {sorted(missing)}, unknown {sorted(extra)})")

    def snapshot(self):
        return [(g.group_id, g.created_round, tuple(g.members), g.model) for g in self]


@dataclass(frozen=True)
class ForkPolicy:
    h_f: float = 1.5
    warmup_rounds: int = 5
    cooldown_from_end: int = 5
    min_gap: int = 4
    sigma_floor: float = 0.3  # nats; threshold is h_f * max(σ, sigma_floor)
    coalesce_new_groups: bool = False  # same-round forks out of one group share a new group

    def __post_init__(self):
        if not self.h_f > 0:
            raise ValueError(f"h_f must be > 0, got {self.h_f}")
        if self.warmup_rounds < 1:
            raise ValueError(f"warmup_rounds must be >= 1, got {self.warmup_rounds}")
        if self.cooldown_from_end < 0:
            raise ValueError(f"cooldown_from_end must be >= 0, got {self.cooldown_from_end}")
        if self.min_gap < 1:
            raise ValueError(f"min_gap must be >= 1, got {self.min_gap}")
        if self.sigma_floor < 0:
            raise ValueError(f"sigma_floor must be >= 0, got {self.sigma_floor}")

    @property
    def is_default_schedule(self):
        return (self.warmup_rounds, self.cooldown_from_end, self.min_gap) == (5, 5, 4)


@dataclass(frozen=True)
class MergePolicy:
    max_rounds_per_group: int = 20
    window: int = 5
    accuracy_gap: float = 1.0  # percentage points
    participation_fraction: float = 0.5
    ewc_enabled: bool = True
    lambda_scale: float = 1.0

    def __post_init__(self):
        if self.max_rounds_per_group < 1:
            raise ValueError(f"max_rounds_per_group must be >= 1, got {self.max_rounds_per_group}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if not self.accuracy_gap > 0:
            raise ValueError(f"accuracy_gap must be > 0, got {self.accuracy_gap}")
        if not 0 < self.participation_fraction <= 1:
            raise ValueError(f"participation_fraction must lie in (0, 1], got {self.participation_fraction}")
        if self.lambda_scale < 0:
            raise ValueError(f"lambda_scale must be >= 0, got {self.lambda_scale}")

    def ewc_lambda(self, merged_groups):
        """λ once `merged_groups` groups share the working model"""
        if not self.ewc_enabled:
            return 0.0
        return self.lambda_scale / merged_groups


@dataclass(frozen=True)
class DeviceRoundResult:
    device_id: int
    group_id: int
    val_loss: float
    val_acc: float


@dataclass(frozen=True)
class RoundRecord:
    """What one committed round looked like; handed to the on_round callback"""
    round: int
    phase: str
    group_count: int
    devices: tuple
    ledger_entry: object
    decisions: tuple = ()
    merged_groups: tuple = ()
    merge_accuracy: float = None
    working_model: ModelParams = None


class FederationState:
    """Devices, groups, round counter, ledger and seed stream of one run"""

    def __init__(self, devices, group_table, seeds, ledger=None, round_index=0, workers=1, on_round=None):
        self.devices = {device.device_id: device for device in devices}
        self.group_table = group_table
        self.seeds = seeds if isinstance(seeds, SeedStream) else SeedStream(seeds)
        self.ledger = ledger if ledger is not None else CostLedger()
        self.round = int(round_index)
        self.workers = max(1, int(workers))
        self.on_round = on_round
        self.check_invariants()

    @classmethod
    def initial(cls, shards, model, seeds, **kwargs):
        """Every device in group 0 holding `model`"""
        devices = [DeviceState(i, shard, 0, model) for i, shard in enumerate(shards)]
        table = GroupTable.single(model, [d.device_id for d in devices], created_round=0)
        return cls(devices, table, seeds, **kwargs)

    @classmethod
    def from_snapshot(cls, shards, groups, round_index, seeds, **kwargs):
        """
        Rebuild a state from (group_id, created_round, members, model) tuples;
        each device holds its group's model.
        """
        table = GroupTable()
        devices = []
        for group_id, created_round, members, model in groups:
            table.restore(group_id, members, model, created_round)
        membership = table.membership()
        for device_id, shard in enumerate(shards):
            if device_id not in membership:
                raise FederationError(f"device {device_id} is not in any restored group")
            group_id = membership[device_id]
            devices.append(DeviceState(device_id, shard, group_id, table.get(group_id).model))
        return cls(devices, table, seeds, round_index=round_index, **kwargs)

    @property
    def num_devices(self):
        return len(self.devices)

    def device_ids(self):
        return sorted(self.devices)

    def advance_round(self):
        self.round += 1
        return self.round

    def map(self, work, items):
        """Run `work` per item, in worker threads when configured; results keep item order"""
        items = list(items)
        if self.workers == 1 or len(items) < 2:
            return [work(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(work, items))

    def check_invariants(self):
        self.group_table.assert_partition(self.device_ids())
        membership = self.group_table.membership()
        for device_id, device in self.devices.items():
            if device.group_id != membership[device_id]:
                raise FederationError(
                    f"device {device_id} says group {device.group_id}, table says {membership[device_id]}"
                )
            if not isinstance(device.current_model, ModelParams):
                raise FederationError(f"device {device_id} does not hold exactly one model")

    def emit(self, record):
        if self.on_round is not None:
            self.on_round(self, record)


# ---------------------------------------------------------------------------
# Shared round helpers
# ---------------------------------------------------------------------------

def average_weights(models, sample_counts):
    """
    Σ (n_k / n) · w_k coordinate-wise.

    Computed as w_0 + Σ (n_k / n)(w_k - w_0) and clipped to the per-coordinate
    input range, so identical inputs come back exactly and the result stays in
    the convex hull despite rounding.
    """
    if not models:
        raise FederationError("cannot average an empty list of models")
    if len(models) != len(sample_counts):
        raise FederationError(f"{len(models)} models but {len(sample_counts)} sample counts")
    dims = models[0].layer_dims
    for model in models[1:]:
        if model.layer_dims != dims:
            raise DimensionMismatchError(f"cannot average layouts {dims} and {model.layer_dims}")
    counts = np.asarray(sample_counts, dtype=np.float64)
    if np.any(counts < 1):
        raise FederationError("sample counts must be >= 1")

    stacked = np.stack([model.values for model in models])
    weights = counts / counts.sum()
    base = stacked[0]
    averaged = base + weights @ (stacked - base)
    return ModelParams(dims, np.clip(averaged, stacked.min(axis=0), stacked.max(axis=0)))


def _sample(state, purpose, population, k):
    population = sorted(population)
    rng = state.seeds.rng(purpose, state.round)
    return sorted(int(d) for d in rng.choice(population, size=k, replace=False))


def _train(state, device_ids, cfg, purpose, phase, anchor=None, fisher=None):
    round_index = state.round

    def work(device_id):
        device = state.devices[device_id]
        seed = state.seeds.seed(purpose, round_index, device_id)
        try:
            if anchor is None:
                return sgd_epochs(device.current_model, device.shard.train, cfg, seed)
            return ewc_sgd_epochs(device.current_model, device.shard.train, anchor, fisher, cfg, seed)
        except TrainingDivergenceError as e:
            raise e.with_context(round_index=round_index, device_id=device_id, phase=phase) from e

    return dict(zip(device_ids, state.map(work, device_ids)))


def _evaluate_all(state):
    device_ids = state.device_ids()
    results = state.map(
        lambda device_id: forward_eval(state.devices[device_id].current_model, state.devices[device_id].shard.validation),
        device_ids,
    )
    return dict(zip(device_ids, results))


def _commit_evals(state, evals):
    rows = []
    for device_id in state.device_ids():
        device = state.devices[device_id]
        result = evals[device_id]
        device.record_eval(state.round, result)
        rows.append(DeviceRoundResult(device_id, device.group_id, result.mean_loss, result.accuracy))
    return tuple(rows)


def _average_group(state, group, trained):
    """Average the group's trained members and deploy to every member"""
    sampled = [d for d in group.members if d in trained]
    if sampled:
        group.model = average_weights(
            [trained[d] for d in sampled],
            [state.devices[d].n_k for d in sampled],
        )
    for device_id in group.members:
        state.devices[device_id].receive(group.model)


def _check_participants(state, participants):
    if not 1 <= participants <= state.num_devices:
        raise FederationError(f"K must lie in [1, {state.num_devices}], got {participants}")


# ---------------------------------------------------------------------------
# FedAvg
# ---------------------------------------------------------------------------

def run_fedavg(state, rounds, participants, cfg):
    """Baseline: K sampled devices train, n_k-weighted average, deploy to all"""
    _check_participants(state, participants)
    if len(state.group_table) != 1:
        raise FederationError(f"FedAvg needs a single group, found {len(state.group_table)}")
    group = next(iter(state.group_table))
    n = state.num_devices

    logger.info("=" * 60)
    logger.info(f"FedAvg: {rounds} rounds, K={participants}, N={n}, E={cfg.local_epochs}")
    logger.info("=" * 60)

    for _ in range(rounds):
        t = state.advance_round()
        sampled = _sample(state, Purpose.FEDAVG_SAMPLE, state.device_ids(), participants)
        trained = _train(state, sampled, cfg, Purpose.LOCAL_TRAIN, PHASE_FEDAVG)
        _average_group(state, group, trained)
        rows = _commit_evals(state, _evaluate_all(state))
        entry = state.ledger.record(
            t, PHASE_FEDAVG,
            updates_delta=cfg.local_epochs * participants,
            transfers_delta=2 * participants + n,
        )
        state.check_invariants()
        logger.info(
            f"[fedavg] round {t}: mean val acc {np.mean([r.val_acc for r in rows]):.2f}%, "
            f"+{entry.updates_delta} updates, +{entry.transfers_delta} transfers"
        )
        state.emit(RoundRecord(t, PHASE_FEDAVG, 1, rows, entry))

    return group.model


# ---------------------------------------------------------------------------
# Fork
# ---------------------------------------------------------------------------

def fork_eligible(t, total_rounds, last_eligible=None, policy=None):
    """Round t (1-based) may fork: past warm-up, before cool-down, min_gap after the last one"""
    policy = policy or ForkPolicy()
    if t < policy.warmup_rounds + 1 or t > total_rounds - policy.cooldown_from_end:
        return False
    return last_eligible is None or t - last_eligible >= policy.min_gap


def eligible_rounds(total_rounds, policy=None):
    rounds = []
    for t in range(1, total_rounds + 1):
        if fork_eligible(t, total_rounds, rounds[-1] if rounds else None, policy):
            rounds.append(t)
    return rounds


class ForkAction(str, Enum):
    STAY = 'stay'
    MOVE = 'move'
    NEW_GROUP = 'new_group'


@dataclass(frozen=True)
class ForkDecision:
    device_id: int
    action: ForkAction
    source_group: int
    target_group: int = None  # set for MOVE
    excess: float = 0.0
    threshold: float = 0.0
    foreign_evaluations: int = 0  # each one is a transfer

    @property
    def crossed(self):
        return self.action != ForkAction.STAY


def fork_decision(device, group_losses, group_table, h_f, sigma_floor=0.0):
    """
    Stay, move to the best-scoring live group, or split into a new group.

    The device stays when its loss is within h_f·σ of the group minimum (σ is
    the population standard deviation of the group's losses). Otherwise it
    tries every live group model on its validation data; the lowest loss wins,
    ties going to the lowest group id. Winning with its own group's model
    means a new group.
    """
    if device.device_id not in group_losses:
        raise FederationError(f"no loss reported for device {device.device_id}")
    losses = np.array([group_losses[d] for d in sorted(group_losses)], dtype=np.float64)
    own = float(group_losses[device.device_id])
    excess = own - float(losses.min())
    threshold = h_f * max(float(losses.std()), sigma_floor)
    if not excess > threshold:
        return ForkDecision(device.device_id, ForkAction.STAY, device.group_id, excess=excess, threshold=threshold)

    best_group, best_loss = None, None
    foreign = 0
    for group in group_table:
        if group.group_id == device.group_id:
            loss = own
        else:
            loss = forward_eval(group.model, device.shard.validation).mean_loss
            foreign += 1
        if best_loss is None or loss < best_loss:
            best_group, best_loss = group.group_id, loss

    if best_group != device.group_id:
        return ForkDecision(
            device.device_id, ForkAction.MOVE, device.group_id, target_group=best_group,
            excess=excess, threshold=threshold, foreign_evaluations=foreign,
        )
    return ForkDecision(
        device.device_id, ForkAction.NEW_GROUP, device.group_id,
        excess=excess, threshold=threshold, foreign_evaluations=foreign,
    )


def _decide_all(state, evals, policy):
    losses_by_group = {
        group.group_id: {d: evals[d].mean_loss for d in group.members}
        for group in state.group_table
    }

    def work(device_id):
        device = state.devices[device_id]
        return fork_decision(device, losses_by_group[device.group_id], state.group_table, policy.h_f, policy.sigma_floor)

    return state.map(work, state.device_ids())


def _apply_decisions(state, decisions, policy):
    """
    All moves take effect together, against the round-start group table.
    Returns the number of groups created.
    """
    table = state.group_table
    t = state.round
    targets = {}
    new_groups = {}
    for decision in decisions:
        if decision.action == ForkAction.MOVE:
            targets[decision.device_id] = table.get(decision.target_group)
        elif decision.action == ForkAction.NEW_GROUP:
            source = table.get(decision.source_group)
            key = decision.source_group if policy.coalesce_new_groups else ('device', decision.device_id)
            if key not in new_groups:
                new_groups[key] = table.create([], source.model, t)
                logger.info(f"🔀 Round {t}: group {new_groups[key].group_id} forked from group {source.group_id}")
            targets[decision.device_id] = new_groups[key]

    for device_id, target in sorted(targets.items()):
        device = state.devices[device_id]
        table.get(device.group_id).members.remove(device_id)
        target.members.append(device_id)
        device.group_id = target.group_id
        device.receive(target.model)
    for group in table:
        group.members.sort()

    retired = table.retire_empty()
    if retired:
        logger.info(f"Round {t}: retired empty groups {retired}")
    return len(new_groups)


def run_fork_phase(state, rounds, participants, cfg, policy=None):
    """
    Fork phase: FedAvg inside every live group, with threshold-driven moves
    and splits on eligible rounds.
    """
    policy = policy or ForkPolicy()
    _check_participants(state, participants)
    if len(state.group_table) != 1:
        raise FederationError(f"fork phase must start from a single group, found {len(state.group_table)}")
    n = state.num_devices
    start = state.round
    last_eligible = None

    logger.info("=" * 60)
    logger.info(
        f"Fork phase: {rounds} rounds, K={participants}, N={n}, h_f={policy.h_f}, "
        f"eligible rounds {eligible_rounds(rounds, policy)}"
    )
    logger.info("=" * 60)

    for t in range(1, rounds + 1):
        round_index = state.advance_round()
        sampled = _sample(state, Purpose.FORK_SAMPLE, state.device_ids(), participants)
        trained = _train(state, sampled, cfg, Purpose.LOCAL_TRAIN, PHASE_FORK)
        for group in state.group_table:
            _average_group(state, group, trained)
        evals = _evaluate_all(state)
        rows = _commit_evals(state, evals)

        decisions = ()
        created = 0
        if fork_eligible(t, rounds, last_eligible, policy):
            last_eligible = t
            decisions = tuple(_decide_all(state, evals, policy))
            created = _apply_decisions(state, decisions, policy)

        crossed = [d for d in decisions if d.crossed]
        # one seeding transfer per new group on top of the foreign evaluations
        move_transfers = sum(d.foreign_evaluations for d in crossed) + created
        entry = state.ledger.record(
            round_index, PHASE_FORK,
            updates_delta=cfg.local_epochs * participants,
            transfers_delta=2 * participants + n + move_transfers,
            move_transfers_delta=move_transfers,
            threshold_crossings=len(crossed),
        )
        state.check_invariants()
        logger.info(
            f"[fork] round {round_index}: {len(state.group_table)} groups, "
            f"+{entry.updates_delta} updates, +{entry.transfers_delta} transfers"
            + (f", {len(crossed)} devices crossed the threshold" if decisions else "")
        )
        state.emit(RoundRecord(round_index, PHASE_FORK, len(state.group_table), rows, entry, decisions=decisions))

    logger.info(f"✅ Fork phase done after round {state.round} (started at {start}): groups {state.group_table.ids()}")
    return state


# ---------------------------------------------------------------------------
# Merge-Consolidate
# ---------------------------------------------------------------------------

def merge_converged(acc_window, window=5, accuracy_gap=1.0):
    """Window full and max − mean below the accuracy gap"""
    values = list(acc_window)[-window:]
    if len(values) < window:
        return False
    return max(values) - float(np.mean(values)) < accuracy_gap


def _pooled_accuracy(state, evals, device_ids):
    correct = sum(evals[d].accuracy * evals[d].num_examples for d in device_ids)
    total = sum(evals[d].num_examples for d in device_ids)
    return correct / total


def run_merge_consolidate(state, cfg, policy=None):
    """
    Fold the groups, in id order, into one consolidated model.

    The working model starts as the first group's model. Before each further
    group joins, the working model becomes the EWC anchor and every device
    already merged computes a Fisher diagonal at it; the server averages those
    with n_k weights. The newcomers receive the working model, then sampled
    active devices train with the EWC pull until the accuracy window settles
    or max_rounds_per_group runs out.
    """
    policy = policy or MergePolicy()
    table = state.group_table
    group_ids = table.ids()
    if not group_ids:
        raise FederationError("merge needs at least one group")

    base = table.get(group_ids[0])
    working = base.model
    merged = [base.group_id]
    if len(group_ids) == 1:
        logger.info(f"Single group {base.group_id} after forking: nothing to merge")
        return working

    logger.info("=" * 60)
    logger.info(f"Merge-Consolidate: groups {group_ids}, up to {policy.max_rounds_per_group} rounds each")
    logger.info("=" * 60)

    for position, group_id in enumerate(group_ids[1:], start=1):
        anchor = working
        previously_active = list(base.members)
        setup_transfers = 0
        fisher = None
        if policy.ewc_enabled:
            fishers = state.map(
                lambda d: compute_fisher_diag(anchor, state.devices[d].shard.train),
                previously_active,
            )
            fisher = average_fisher(fishers, [state.devices[d].n_k for d in previously_active])
            setup_transfers += len(previously_active)

        incoming = table.get(group_id)
        newcomers = list(incoming.members)
        for device_id in newcomers:
            device = state.devices[device_id]
            device.group_id = base.group_id
            device.receive(working)
        base.members = sorted(base.members + newcomers)
        incoming.members = []
        table.retire_empty()
        merged.append(group_id)
        active = list(base.members)
        setup_transfers += len(active) if policy.ewc_enabled else len(newcomers)

        ewc_lambda = policy.ewc_lambda(len(merged))
        train_cfg = replace(cfg, ewc_lambda=ewc_lambda)
        logger.info(
            f"Merging group {group_id} ({len(newcomers)} devices) into {merged[:-1]}, "
            f"λ={ewc_lambda:g}, {len(active)} active devices"
        )

        history = deque(maxlen=policy.window)
        sample_size = math.ceil(policy.participation_fraction * len(active))
        for step in range(1, policy.max_rounds_per_group + 1):
            round_index = state.advance_round()
            sampled = _sample(state, Purpose.MERGE_SAMPLE, active, sample_size)
            trained = _train(
                state, sampled, train_cfg, Purpose.MERGE_TRAIN, PHASE_MERGE,
                anchor=anchor if fisher is not None else None, fisher=fisher,
            )
            working = average_weights([trained[d] for d in sampled], [state.devices[d].n_k for d in sampled])
            base.model = working
            for device_id in active:
                state.devices[device_id].receive(working)

            evals = _evaluate_all(state)
            rows = _commit_evals(state, evals)
            accuracy = _pooled_accuracy(state, evals, active)
            history.append(accuracy)
            entry = state.ledger.record(
                round_index, PHASE_MERGE,
                updates_delta=cfg.local_epochs * sample_size,
                transfers_delta=2 * sample_size + len(active) + (setup_transfers if step == 1 else 0),
            )
            state.check_invariants()
            logger.info(
                f"[merge] round {round_index} (group {group_id}, step {step}): "
                f"consolidated val acc {accuracy:.2f}%"
            )
            state.emit(RoundRecord(
                round_index, PHASE_MERGE, len(table), rows, entry,
                merged_groups=tuple(merged), merge_accuracy=accuracy, working_model=working,
            ))
            if merge_converged(history, policy.window, policy.accuracy_gap):
                logger.info(f"🛑 Group {group_id} merge converged after {step} rounds")
                break

    logger.info(f"✅ Consolidated {len(merged)} groups into one model")
    return working
