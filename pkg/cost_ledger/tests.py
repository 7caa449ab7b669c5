"""
Test cases for the cost ledger and the closed-form cost checks
"""
from django.test import SimpleTestCase

from .utils import (
    CostBoundViolation,
    CostLedger,
    analytic_comm_bound,
    analytic_fedavg_transfers,
    analytic_updates,
    verify_against_bound,
)


def no_fork_ledger(rounds, participants, num_devices, local_epochs=1):
    ledger = CostLedger()
    for t in range(1, rounds + 1):
        ledger.record(t, 'fork', local_epochs * participants, 2 * participants + num_devices)
    return ledger


class AnalyticTestCase(SimpleTestCase):
    """Test cases for analytic_updates / analytic_comm_bound"""

    def test_updates(self):
        """Test E·K·T evaluation"""
        self.assertEqual(analytic_updates(5, 10, 25), 1250)
        self.assertEqual(analytic_updates(1, 1, 1), 1)
        self.assertEqual(analytic_updates(0, 10, 25), 0)
        self.assertEqual(analytic_updates(5, 0, 25), 0)
        self.assertEqual(analytic_updates(5, 10, 0), 0)

    def test_comm_bound(self):
        """Test the bound including the fork term"""
        self.assertEqual(analytic_comm_bound(25, 10, 20), 1300)
        self.assertEqual(analytic_comm_bound(0, 10, 20), 0)
        self.assertEqual(analytic_comm_bound(3, 1, 2), 12)
        self.assertEqual(analytic_fedavg_transfers(25, 10, 20), 1000)


class CostLedgerTestCase(SimpleTestCase):
    """Test cases for CostLedger bookkeeping"""

    def setUp(self):
        self.ledger = CostLedger()

    def test_totals_are_sums_of_deltas(self):
        """Test running totals match the recorded deltas"""
        self.ledger.record(1, 'fork', 6, 24)
        self.ledger.record(2, 'fork', 6, 30, move_transfers_delta=6, threshold_crossings=3)
        self.ledger.record(1, 'merge', 3, 9)
        self.assertEqual(self.ledger.updates, 15)
        self.assertEqual(self.ledger.transfers, 63)
        self.assertEqual(self.ledger.per_round, [(1, 6, 24), (2, 6, 30), (1, 3, 9)])
        fork = self.ledger.totals('fork')
        self.assertEqual(fork['transfers'], 54)
        self.assertEqual(fork['move_transfers'], 6)
        self.assertEqual(fork['threshold_crossings'], 3)
        self.assertEqual(self.ledger.summary()['merge']['updates'], 3)

    def test_rejects_negative_deltas(self):
        """Test deltas can never be negative"""
        with self.assertRaises(ValueError):
            self.ledger.record(1, 'fork', -1, 0)
        with self.assertRaises(ValueError):
            self.ledger.record(1, 'fork', 0, -5)
        self.assertEqual(len(self.ledger), 0)

    def test_rejects_rounds_out_of_order(self):
        """Test rounds within a phase must increase"""
        self.ledger.record(3, 'fedavg', 1, 1)
        with self.assertRaises(ValueError):
            self.ledger.record(3, 'fedavg', 1, 1)

    def test_rejects_unknown_phase(self):
        """Test only fedavg / fork / merge phases are accepted"""
        with self.assertRaises(ValueError):
            self.ledger.record(1, 'warmup', 1, 1)


class VerifyAgainstBoundTestCase(SimpleTestCase):
    """Test cases for verify_against_bound"""

    def test_no_fork_run_is_exact(self):
        """Test a run without crossings measures exactly T·(2K+N)"""
        ledger = no_fork_ledger(25, 10, 20, local_epochs=5)
        report = verify_against_bound(ledger, 25, 10, 20, local_epochs=5)
        self.assertEqual(report.measured_transfers, 1000)
        self.assertEqual(report.bound, 1300)
        self.assertEqual(report.slack, 300)
        self.assertTrue(report.base_equality)
        self.assertTrue(report.updates_equal)
        self.assertTrue(report.passed)
        self.assertIsNone(report.first_offending_round)

    def test_forking_run_within_bound(self):
        """Test crossings add transfers but stay under the bound"""
        ledger = CostLedger()
        for t in range(1, 26):
            crossings = 2 if t in (6, 10) else 0
            ledger.record(t, 'fork', 10, 40 + crossings, move_transfers_delta=crossings, threshold_crossings=crossings)
        report = verify_against_bound(ledger, 25, 10, 20)
        self.assertEqual(report.measured_transfers, 1004)
        self.assertIsNone(report.base_equality)
        self.assertTrue(report.passed)
        self.assertIsNone(report.updates_equal)

    def test_violation_reports_first_round(self):
        """Test an over-budget ledger fails and names the first bad round"""
        ledger = no_fork_ledger(5, 1, 2)
        ledger.record(6, 'fork', 1, 50, move_transfers_delta=46, threshold_crossings=1)
        report = verify_against_bound(ledger, 6, 1, 2)
        self.assertFalse(report.passed)
        self.assertEqual(report.first_offending_round, 6)
        with self.assertRaises(CostBoundViolation) as ctx:
            verify_against_bound(ledger, 6, 1, 2, raise_on_violation=True)
        self.assertIs(ctx.exception.report.passed, False)

    def test_base_equality_failure(self):
        """Test extra transfers without crossings fail the equality check"""
        ledger = no_fork_ledger(4, 2, 3)
        ledger.record(5, 'fork', 2, 6)
        report = verify_against_bound(ledger, 5, 2, 3)
        self.assertIs(report.base_equality, False)
        self.assertFalse(report.passed)

    def test_empty_ledger(self):
        """Test T=0 with nothing recorded passes vacuously"""
        report = verify_against_bound(CostLedger(), 0, 3, 5)
        self.assertEqual(report.measured_transfers, 0)
        self.assertEqual(report.bound, 0)
        self.assertTrue(report.passed)

    def test_merge_entries_are_ignored(self):
        """Test merge-phase transfers do not count against the fork bound"""
        ledger = no_fork_ledger(3, 1, 2)
        ledger.record(1, 'merge', 1, 100)
        report = verify_against_bound(ledger, 3, 1, 2)
        self.assertEqual(report.measured_transfers, 12)
        self.assertTrue(report.passed)
