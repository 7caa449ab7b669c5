"""
Update / transfer accounting.

Units:
    updates    device-epochs of local training (one device, one epoch = 1)
    transfers  whole-model weight sends between server and a device, either
               direction

Per FedAvg or fork round the base cost is 2K + N: K downloads and K uploads
for the sampled devices, then N deploys of the averaged models. A device that
crosses the fork threshold adds one transfer per foreign group model it tries.
"""
import logging
from dataclasses import asdict, dataclass

logger = logging.getLogger(__name__)

PHASE_FEDAVG = 'fedavg'
PHASE_FORK = 'fork'
PHASE_MERGE = 'merge'
PHASES = (PHASE_FEDAVG, PHASE_FORK, PHASE_MERGE)

# Phases whose transfers the closed-form bound covers
BOUNDED_PHASES = (PHASE_FEDAVG, PHASE_FORK)


class CostBoundViolation(Exception):
    """Measured transfers exceeded the analytic bound (or the no-fork equality failed)"""

    def __init__(self, report):
        self.report = report
        if report.measured_transfers > report.bound:
            message = (
                f"{report.measured_transfers} transfers exceed the bound of {report.bound} "
                f"(first offending round: {report.first_offending_round})"
            )
        else:
            message = (
                f"no device crossed the fork threshold, yet {report.measured_transfers} transfers "
                f"!= {report.base_transfers}"
            )
        super().__init__(message)


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    phase: str
    updates_delta: int
    transfers_delta: int
    move_transfers_delta: int = 0  # part of transfers_delta spent on foreign-model evaluations
    threshold_crossings: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        for field in ('updates_delta', 'transfers_delta', 'move_transfers_delta', 'threshold_crossings'):
            if getattr(self, field) < 0:
                raise ValueError(f"{field} must be >= 0, got {getattr(self, field)}")
        if self.move_transfers_delta > self.transfers_delta:
            raise ValueError("move_transfers_delta cannot exceed transfers_delta")


class CostLedger:
    """
    Append-only record of per-round costs.

    Totals only ever grow; the federation engine is the only writer and
    records once per round from its single-threaded commit step.
    """

    def __init__(self):
        self._entries = []
        self.updates = 0
        self.transfers = 0

    def __len__(self):
        return len(self._entries)

    def record(self, round_index, phase, updates_delta, transfers_delta,
               move_transfers_delta=0, threshold_crossings=0):
        entry = LedgerEntry(
            round=int(round_index),
            phase=phase,
            updates_delta=int(updates_delta),
            transfers_delta=int(transfers_delta),
            move_transfers_delta=int(move_transfers_delta),
            threshold_crossings=int(threshold_crossings),
        )
        previous = self.entries(phase)
        if previous and entry.round <= previous[-1].round:
            raise ValueError(
                f"{phase} round {entry.round} recorded after round {previous[-1].round}"
            )
        self._entries.append(entry)
        self.updates += entry.updates_delta
        self.transfers += entry.transfers_delta
        logger.debug(
            f"Ledger {phase} round {entry.round}: +{entry.updates_delta} updates, "
            f"+{entry.transfers_delta} transfers"
        )
        return entry

    def entries(self, phase=None):
        if phase is None:
            return list(self._entries)
        return [entry for entry in self._entries if entry.phase == phase]

    @property
    def per_round(self):
        """(round, updates_delta, transfers_delta) for every recorded round"""
        return [(e.round, e.updates_delta, e.transfers_delta) for e in self._entries]

    def latest(self, phase, round_index):
        for entry in reversed(self._entries):
            if entry.phase == phase and entry.round == round_index:
                return entry
        return None

    def totals(self, phases=None):
        if isinstance(phases, str):
            phases = (phases,)
        selected = [e for e in self._entries if phases is None or e.phase in phases]
        return {
            'rounds': len(selected),
            'updates': sum(e.updates_delta for e in selected),
            'transfers': sum(e.transfers_delta for e in selected),
            'move_transfers': sum(e.move_transfers_delta for e in selected),
            'threshold_crossings': sum(e.threshold_crossings for e in selected),
        }

    def summary(self):
        summary = {'updates': self.updates, 'transfers': self.transfers}
        for phase in PHASES:
            if self.entries(phase):
                summary[phase] = self.totals(phase)
        return summary


def analytic_updates(local_epochs, participants, rounds):
    """E·K·T: device-epochs spent when K devices train E epochs for T rounds"""
    return int(local_epochs) * int(participants) * int(rounds)


def analytic_fedavg_transfers(rounds, participants, num_devices):
    """T·(2K + N), the transfer count of a run in which nobody forks"""
    return int(rounds) * (2 * int(participants) + int(num_devices))


def analytic_comm_bound(rounds, participants, num_devices):
    """
    Worst-case transfers of a fork phase: T·(2K+N) + Σ_{t=1}^{⌊T/4⌋} N·(t-1).

    The fork term assumes at most one eligible round every 4 rounds, so it is
    only meaningful under the default eligibility schedule.
    """
    rounds = int(rounds)
    num_devices = int(num_devices)
    fork_term = sum(num_devices * (t - 1) for t in range(1, rounds // 4 + 1))
    return analytic_fedavg_transfers(rounds, participants, num_devices) + fork_term


@dataclass(frozen=True)
class VerificationReport:
    rounds: int
    participants: int
    num_devices: int
    measured_transfers: int
    bound: int
    slack: int
    base_transfers: int
    threshold_crossings: int
    base_equality: bool  # None when some device crossed the threshold
    measured_updates: int
    expected_updates: int  # None when local_epochs was not supplied
    updates_equal: bool
    first_offending_round: int
    passed: bool

    def as_dict(self):
        return asdict(self)


def verify_against_bound(ledger, rounds, participants, num_devices, local_epochs=None,
                         phases=BOUNDED_PHASES, raise_on_violation=False):
    """
    Compare a finished FedAvg / fork ledger with the closed forms.

    Checks measured transfers <= bound, equality with T·(2K+N) when no device
    ever crossed the fork threshold, and (given E) updates == E·K·T.
    """
    entries = [e for e in ledger.entries() if e.phase in phases]
    totals = ledger.totals(phases)
    measured = totals['transfers']
    crossings = totals['threshold_crossings']
    bound = analytic_comm_bound(rounds, participants, num_devices)
    base = analytic_fedavg_transfers(rounds, participants, num_devices)

    # Round at which the running total first went over budget
    first_offending = None
    running = 0
    for entry in entries:
        running += entry.transfers_delta
        if running > bound:
            first_offending = entry.round
            break

    base_equality = None if crossings else measured == base
    expected_updates = None
    updates_equal = None
    if local_epochs is not None:
        expected_updates = analytic_updates(local_epochs, participants, rounds)
        updates_equal = totals['updates'] == expected_updates

    passed = measured <= bound and base_equality is not False and updates_equal is not False
    report = VerificationReport(
        rounds=int(rounds),
        participants=int(participants),
        num_devices=int(num_devices),
        measured_transfers=measured,
        bound=bound,
        slack=bound - measured,
        base_transfers=base,
        threshold_crossings=crossings,
        base_equality=base_equality,
        measured_updates=totals['updates'],
        expected_updates=expected_updates,
        updates_equal=updates_equal,
        first_offending_round=first_offending,
        passed=passed,
    )

    if passed:
        logger.info(f"✅ Cost check passed: {measured} transfers, bound {bound} (slack {bound - measured})")
    else:
        logger.warning(f"❌ Cost check failed: {report}")
        if raise_on_violation and (measured > bound or base_equality is False):
            raise CostBoundViolation(report)
    return report
