"""
Test cases for the federation engine (averaging, FedAvg, Fork, Merge-Consolidate)
"""
import math

import numpy as np
from django.test import SimpleTestCase

from cost_ledger.utils import analytic_fedavg_transfers, analytic_updates
from data_plane.utils import ArchetypeSpec, gen_synthetic, partition_archetypes
from learner.exceptions import DimensionMismatchError
from learner.utils import ModelParams, TrainConfig, init_model, parameter_count, sgd_epochs

from .seeding import Purpose, SeedStream
from .utils import (
    DeviceState,
    FederationError,
    FederationState,
    ForkAction,
    ForkDecision,
    ForkPolicy,
    GroupTable,
    MergePolicy,
    _apply_decisions,
    average_weights,
    eligible_rounds,
    fork_decision,
    fork_eligible,
    merge_converged,
    run_fedavg,
    run_fork_phase,
    run_merge_consolidate,
)

DIMS = [4, 8, 3]


def three_archetype_shards(devices_per_archetype=2, samples=20, seed=0):
    dataset = gen_synthetic(3, 4, 80, 6.0, seed=seed)
    specs = [ArchetypeSpec({i}, 1.0) for i in range(3)]
    return partition_archetypes(dataset, specs, devices_per_archetype, samples, 0.25, seed=seed)


def bias_model(num_classes, feature_dim, favoured, strength=5.0):
    """Linear model that always prefers one class"""
    values = np.zeros(parameter_count([feature_dim, num_classes]))
    values[feature_dim * num_classes + favoured] = strength
    return ModelParams([feature_dim, num_classes], values)


class AverageWeightsTestCase(SimpleTestCase):
    """Test cases for average_weights"""

    def test_identical_models(self):
        """Test averaging copies of one model returns it exactly"""
        model = init_model(DIMS, seed=3)
        self.assertEqual(average_weights([model, model, model], [5, 1, 9]), model)

    def test_equal_counts_give_mean(self):
        """Test counts [1, 1] give the arithmetic mean"""
        a, b = init_model(DIMS, seed=1), init_model(DIMS, seed=2)
        averaged = average_weights([a, b], [1, 1])
        np.testing.assert_allclose(averaged.values, (a.values + b.values) / 2, rtol=0, atol=1e-15)

    def test_weighted_hand_example(self):
        """Test 2 and 5 with counts [3, 1] give 2.75"""
        a = ModelParams([1, 1], [2.0, 2.0])
        b = ModelParams([1, 1], [5.0, 5.0])
        self.assertTrue(np.array_equal(average_weights([a, b], [3, 1]).values, [2.75, 2.75]))

    def test_random_instances_match_weighted_sum(self):
        """Test 100 random instances against Σ (n_k / n) w_k and the convex hull"""
        rng = np.random.default_rng(2024)
        for instance in range(100):
            dims = [int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(2, 5))]
            count = int(rng.integers(1, 8))
            models = [
                ModelParams(dims, rng.normal(scale=rng.uniform(0.1, 10.0), size=parameter_count(dims)))
                for _ in range(count)
            ]
            counts = [int(n) for n in rng.integers(1, 500, size=count)]
            total = sum(counts)
            expected = np.zeros(parameter_count(dims))
            for model, n in zip(models, counts):
                expected += (n / total) * model.values

            averaged = average_weights(models, counts).values
            np.testing.assert_allclose(averaged, expected, rtol=0, atol=1e-12, err_msg=f"instance {instance}")
            stacked = np.stack([m.values for m in models])
            self.assertTrue(np.all(averaged >= stacked.min(axis=0) - 1e-12), instance)
            self.assertTrue(np.all(averaged <= stacked.max(axis=0) + 1e-12), instance)

    def test_convex_hull(self):
        """Test every averaged coordinate lies within the input range"""
        models = [init_model(DIMS, seed=s) for s in range(5)]
        averaged = average_weights(models, [3, 7, 1, 2, 9]).values
        stacked = np.stack([m.values for m in models])
        self.assertTrue(np.all(averaged >= stacked.min(axis=0)))
        self.assertTrue(np.all(averaged <= stacked.max(axis=0)))

    def test_errors(self):
        """Test empty input, layout mismatch and bad counts are rejected"""
        with self.assertRaises(FederationError):
            average_weights([], [])
        with self.assertRaises(DimensionMismatchError):
            average_weights([init_model([2, 2], 0), init_model([2, 3], 0)], [1, 1])
        with self.assertRaises(FederationError):
            average_weights([init_model([2, 2], 0)], [0])


class ScheduleTestCase(SimpleTestCase):
    """Test cases for fork_eligible and merge_converged"""

    def test_default_schedule_t25(self):
        """Test defaults with T=25 allow exactly rounds 6, 10, 14, 18"""
        self.assertEqual(eligible_rounds(25), [6, 10, 14, 18])

    def test_short_run_never_forks(self):
        """Test T=10 leaves no eligible round"""
        self.assertEqual(eligible_rounds(10), [])

    def test_round_one_never_eligible(self):
        """Test warm-up excludes round 1"""
        for total in (1, 5, 25, 100):
            self.assertFalse(fork_eligible(1, total))

    def test_gap_is_respected(self):
        """Test a round closer than min_gap to the last eligible one is refused"""
        self.assertTrue(fork_eligible(6, 25, None))
        self.assertFalse(fork_eligible(9, 25, 6))
        self.assertTrue(fork_eligible(10, 25, 6))
        self.assertEqual(eligible_rounds(12, ForkPolicy(warmup_rounds=1, cooldown_from_end=0, min_gap=3)), [2, 5, 8, 11])

    def test_merge_converged(self):
        """Test the window/gap stopping rule"""
        self.assertTrue(merge_converged([80, 80, 80, 80, 80]))
        self.assertFalse(merge_converged([70, 75, 80, 85, 90]))
        self.assertFalse(merge_converged([80, 80, 80]))
        self.assertTrue(merge_converged([10, 80, 80, 80, 80, 80.5]))

    def test_policy_validation(self):
        """Test invalid policies are rejected"""
        with self.assertRaises(ValueError):
            ForkPolicy(h_f=0)
        with self.assertRaises(ValueError):
            ForkPolicy(warmup_rounds=0)
        with self.assertRaises(ValueError):
            MergePolicy(window=0)
        with self.assertRaises(ValueError):
            MergePolicy(participation_fraction=1.5)
        self.assertEqual(MergePolicy().ewc_lambda(2), 0.5)
        self.assertEqual(MergePolicy(ewc_enabled=False).ewc_lambda(2), 0.0)


class ForkDecisionTestCase(SimpleTestCase):
    """Test cases for fork_decision"""

    def setUp(self):
        shards = three_archetype_shards()
        # device 0 only sees label 0
        self.shard = shards[0]
        self.own_model = ModelParams([4, 3], np.zeros(parameter_count([4, 3])))

    def make_device(self, group_id=0):
        return DeviceState(2, self.shard, group_id, self.own_model)

    def table_with(self, *models):
        table = GroupTable()
        for index, model in enumerate(models):
            table.create([2] if index == 0 else [100 + index], model, 0)
        return table

    def test_minimum_loss_stays(self):
        """Test the device at the group minimum stays for any h_f"""
        device = self.make_device()
        losses = {0: 0.4, 1: 0.8, 2: 0.1}
        for h_f in (1e-9, 1.0, 10.0):
            decision = fork_decision(device, losses, self.table_with(self.own_model), h_f)
            self.assertEqual(decision.action, ForkAction.STAY)

    def test_singleton_stays(self):
        """Test a one-device group never crosses the threshold"""
        decision = fork_decision(self.make_device(), {2: 3.0}, self.table_with(self.own_model), 1e-9)
        self.assertEqual(decision.action, ForkAction.STAY)
        self.assertEqual(decision.foreign_evaluations, 0)

    def test_uniform_losses_stay(self):
        """Test equal losses keep everybody in place"""
        decision = fork_decision(self.make_device(), {0: 0.5, 1: 0.5, 2: 0.5}, self.table_with(self.own_model), 0.1)
        self.assertFalse(decision.crossed)

    def test_threshold_crossing_new_group(self):
        """Test {0.1, 0.1, 0.9}: the 0.9 device crosses and keeps its own model best"""
        worse = bias_model(3, 4, favoured=1)
        table = self.table_with(self.own_model, worse)
        decision = fork_decision(self.make_device(), {0: 0.1, 1: 0.1, 2: 0.9}, table, 1.0)
        self.assertAlmostEqual(decision.threshold, 0.3771236, places=6)
        self.assertAlmostEqual(decision.excess, 0.8)
        self.assertEqual(decision.action, ForkAction.NEW_GROUP)
        self.assertEqual(decision.foreign_evaluations, 1)

    def test_threshold_crossing_moves_to_best_group(self):
        """Test a crossing device moves to the group whose model fits its data"""
        better = bias_model(3, 4, favoured=0)
        table = self.table_with(self.own_model, better)
        decision = fork_decision(self.make_device(), {0: 0.1, 1: 0.1, 2: 0.9}, table, 1.0)
        self.assertEqual(decision.action, ForkAction.MOVE)
        self.assertEqual(decision.target_group, 1)

    def test_ties_go_to_lowest_group_id(self):
        """Test equally good foreign groups resolve to the smaller id"""
        better = bias_model(3, 4, favoured=0)
        table = self.table_with(self.own_model, better, better)
        decision = fork_decision(self.make_device(), {0: 0.1, 1: 0.1, 2: 0.9}, table, 1.0)
        self.assertEqual(decision.target_group, 1)
        self.assertEqual(decision.foreign_evaluations, 2)

    def test_sigma_floor_raises_threshold(self):
        """Test the floor keeps near-identical groups together"""
        losses = {0: 0.10, 1: 0.10, 2: 0.11}
        table = self.table_with(self.own_model)
        self.assertTrue(fork_decision(self.make_device(), losses, table, 1.0).crossed)
        self.assertFalse(fork_decision(self.make_device(), losses, table, 1.0, sigma_floor=0.05).crossed)


class GroupCommitTestCase(SimpleTestCase):
    """Test cases for the atomic fork commit and the group table"""

    def setUp(self):
        self.shards = three_archetype_shards()
        self.model = init_model(DIMS, seed=0)

    def state(self):
        return FederationState.initial(self.shards, self.model, SeedStream(1))

    def new_group(self, device_id, source=0):
        return ForkDecision(device_id, ForkAction.NEW_GROUP, source)

    def test_separate_new_groups(self):
        """Test same-round forks each get their own group by default"""
        state = self.state()
        state.advance_round()
        _apply_decisions(state, [self.new_group(2), self.new_group(3)], ForkPolicy())
        self.assertEqual(state.group_table.ids(), [0, 1, 2])
        self.assertEqual(state.group_table.get(1).members, [2])
        self.assertEqual(state.group_table.get(2).members, [3])
        self.assertEqual(state.group_table.get(1).created_round, 1)
        state.check_invariants()

    def test_coalesced_new_groups(self):
        """Test coalescing puts same-source forks into one group"""
        state = self.state()
        _apply_decisions(state, [self.new_group(2), self.new_group(3)], ForkPolicy(coalesce_new_groups=True))
        self.assertEqual(state.group_table.ids(), [0, 1])
        self.assertEqual(state.group_table.get(1).members, [2, 3])
        self.assertEqual(state.devices[3].group_id, 1)

    def test_emptied_group_is_retired_and_id_not_reused(self):
        """Test a group left by everyone disappears and ids keep counting"""
        state = self.state()
        _apply_decisions(state, [self.new_group(4)], ForkPolicy())
        _apply_decisions(state, [ForkDecision(4, ForkAction.MOVE, 1, target_group=0)], ForkPolicy())
        self.assertEqual(state.group_table.ids(), [0])
        _apply_decisions(state, [self.new_group(5)], ForkPolicy())
        self.assertEqual(state.group_table.ids(), [0, 2])
        state.check_invariants()

    def test_moved_device_holds_target_model(self):
        """Test a moving device ends up with its new group's model only"""
        state = self.state()
        _apply_decisions(state, [self.new_group(1)], ForkPolicy())
        state.group_table.get(1).model = init_model(DIMS, seed=9)
        _apply_decisions(state, [ForkDecision(0, ForkAction.MOVE, 0, target_group=1)], ForkPolicy())
        self.assertEqual(state.devices[0].current_model, state.group_table.get(1).model)

    def test_returns_created_group_count(self):
        """Test the commit reports how many groups it created"""
        decisions = [self.new_group(2), self.new_group(3), ForkDecision(4, ForkAction.MOVE, 0, target_group=0)]
        self.assertEqual(_apply_decisions(self.state(), decisions, ForkPolicy()), 2)
        self.assertEqual(_apply_decisions(self.state(), decisions, ForkPolicy(coalesce_new_groups=True)), 1)
        self.assertEqual(_apply_decisions(self.state(), [], ForkPolicy()), 0)

    def test_partition_violation_detected(self):
        """Test the structural check catches a device in two groups"""
        state = self.state()
        state.group_table.create([0], self.model, 0)
        with self.assertRaises(FederationError):
            state.check_invariants()


class FedAvgTestCase(SimpleTestCase):
    """Test cases for run_fedavg"""

    def setUp(self):
        self.shards = three_archetype_shards()
        self.model = init_model(DIMS, seed=0)
        self.cfg = TrainConfig(learning_rate=0.1, local_epochs=2, batch_size=5)

    def test_zero_rounds_returns_initial_model(self):
        """Test T=0 is a no-op"""
        state = FederationState.initial(self.shards, self.model, SeedStream(0))
        self.assertEqual(run_fedavg(state, 0, 3, self.cfg), self.model)
        self.assertEqual(len(state.ledger), 0)

    def test_single_device_equals_plain_sgd(self):
        """Test K=N=1 matches repeated sgd_epochs with the same seeds"""
        shard = self.shards[0]
        seeds = SeedStream(5)
        state = FederationState.initial([shard], self.model, seeds)
        result = run_fedavg(state, 4, 1, self.cfg)
        expected = self.model
        for t in range(1, 5):
            expected = sgd_epochs(expected, shard.train, self.cfg, seeds.seed(Purpose.LOCAL_TRAIN, t, 0))
        self.assertEqual(result, expected)

    def test_ledger_matches_closed_forms(self):
        """Test updates = E·K·T and transfers = T·(2K+N)"""
        state = FederationState.initial(self.shards, self.model, SeedStream(2))
        run_fedavg(state, 7, 4, self.cfg)
        self.assertEqual(state.ledger.updates, analytic_updates(2, 4, 7))
        self.assertEqual(state.ledger.transfers, analytic_fedavg_transfers(7, 4, 6))
        self.assertEqual(state.round, 7)

    def test_all_devices_hold_global_model(self):
        """Test the averaged model is deployed everywhere"""
        state = FederationState.initial(self.shards, self.model, SeedStream(2))
        final = run_fedavg(state, 3, 2, self.cfg)
        for device in state.devices.values():
            self.assertIs(device.current_model, final)
            self.assertEqual(len(device.loss_history), 3)

    def test_deterministic_across_worker_counts(self):
        """Test threads do not change results"""
        single = FederationState.initial(self.shards, self.model, SeedStream(4), workers=1)
        threaded = FederationState.initial(self.shards, self.model, SeedStream(4), workers=3)
        self.assertEqual(run_fedavg(single, 3, 4, self.cfg), run_fedavg(threaded, 3, 4, self.cfg))

    def test_rejects_bad_participant_count(self):
        """Test K must lie in [1, N]"""
        state = FederationState.initial(self.shards, self.model, SeedStream(0))
        with self.assertRaises(FederationError):
            run_fedavg(state, 1, 7, self.cfg)
        with self.assertRaises(FederationError):
            run_fedavg(state, 1, 0, self.cfg)

    def test_on_round_callback(self):
        """Test one record per round with a row per device"""
        records = []
        state = FederationState.initial(self.shards, self.model, SeedStream(0), on_round=lambda s, r: records.append(r))
        run_fedavg(state, 2, 3, self.cfg)
        self.assertEqual([r.round for r in records], [1, 2])
        self.assertEqual({r.phase for r in records}, {'fedavg'})
        self.assertEqual(len(records[0].devices), 6)
        self.assertEqual(records[1].ledger_entry.transfers_delta, 12)


class ForkPhaseTestCase(SimpleTestCase):
    """Test cases for run_fork_phase"""

    def setUp(self):
        self.shards = three_archetype_shards(devices_per_archetype=3)
        self.model = init_model(DIMS, seed=0)
        self.cfg = TrainConfig(learning_rate=0.1, local_epochs=1, batch_size=5)

    def run_fork(self, policy, rounds=12, participants=9, seed=3):
        state = FederationState.initial(self.shards, self.model, SeedStream(seed))
        run_fork_phase(state, rounds, participants, self.cfg, policy)
        return state

    def test_no_crossing_matches_fedavg_cost(self):
        """Test an unreachable threshold keeps one group and the base transfer count"""
        state = self.run_fork(ForkPolicy(h_f=1e9), rounds=25)
        self.assertEqual(len(state.group_table), 1)
        self.assertEqual(state.ledger.transfers, analytic_fedavg_transfers(25, 9, 9))
        self.assertEqual(state.ledger.updates, analytic_updates(1, 9, 25))

    def test_invariants_and_costs_with_forking(self):
        """Test partition, group ids and cost accounting after a forking run"""
        state = self.run_fork(ForkPolicy(h_f=0.5, warmup_rounds=2, cooldown_from_end=1, min_gap=2))
        state.check_invariants()
        ids = state.group_table.ids()
        self.assertEqual(len(ids), len(set(ids)))
        self.assertLess(max(ids), state.group_table.next_id)
        fork = state.ledger.totals('fork')
        self.assertEqual(fork['updates'], analytic_updates(1, 9, 12))
        self.assertEqual(fork['transfers'], analytic_fedavg_transfers(12, 9, 9) + fork['move_transfers'])
        for group in state.group_table:
            for device_id in group.members:
                self.assertIs(state.devices[device_id].current_model, group.model)

    def test_new_groups_cost_one_seeding_transfer_each(self):
        """Test move transfers are foreign evaluations plus one per created group"""
        seen = []

        def on_round(state, record):
            seen.append((record, state.group_table.next_id))

        state = FederationState.initial(self.shards, self.model, SeedStream(3), on_round=on_round)
        policy = ForkPolicy(h_f=0.1, sigma_floor=0.0, warmup_rounds=1, cooldown_from_end=1, min_gap=2)
        run_fork_phase(state, 12, 9, self.cfg, policy)

        previous_next_id = 1
        total_created = 0
        for record, next_id in seen:
            created = next_id - previous_next_id
            previous_next_id = next_id
            total_created += created
            foreign = sum(d.foreign_evaluations for d in record.decisions if d.crossed)
            entry = record.ledger_entry
            self.assertEqual(entry.move_transfers_delta, foreign + created, record.round)
            self.assertEqual(entry.transfers_delta, 2 * 9 + 9 + foreign + created, record.round)

        # the first eligible round starts from one group, so its only cost is seeding
        first = seen[1][0]
        self.assertTrue(first.decisions)
        self.assertGreaterEqual(first.ledger_entry.move_transfers_delta, 1)
        self.assertEqual(first.ledger_entry.move_transfers_delta, seen[1][1] - 1)
        self.assertEqual(state.ledger.totals('fork')['move_transfers'], sum(r.ledger_entry.move_transfers_delta for r, _ in seen))
        self.assertGreaterEqual(total_created, 1)

    def test_deterministic(self):
        """Test the same seed reproduces groups and models"""
        policy = ForkPolicy(h_f=0.5, warmup_rounds=2, cooldown_from_end=1, min_gap=2)
        first, second = self.run_fork(policy), self.run_fork(policy)
        self.assertEqual(first.group_table.ids(), second.group_table.ids())
        for a, b in zip(first.group_table, second.group_table):
            self.assertEqual(a.members, b.members)
            self.assertEqual(a.model, b.model)

    def test_requires_single_starting_group(self):
        """Test the phase refuses an already-split state"""
        state = FederationState.initial(self.shards, self.model, SeedStream(0))
        _apply_decisions(state, [ForkDecision(0, ForkAction.NEW_GROUP, 0)], ForkPolicy())
        with self.assertRaises(FederationError):
            run_fork_phase(state, 5, 3, self.cfg)


class MergeConsolidateTestCase(SimpleTestCase):
    """Test cases for run_merge_consolidate"""

    def setUp(self):
        self.shards = three_archetype_shards()
        self.cfg = TrainConfig(learning_rate=0.1, local_epochs=1, batch_size=5)
        self.models = [init_model(DIMS, seed=s) for s in range(3)]

    def grouped_state(self, seed=0):
        groups = [(g, 0, (2 * g, 2 * g + 1), self.models[g]) for g in range(3)]
        return FederationState.from_snapshot(self.shards, groups, 10, SeedStream(seed))

    def test_single_group_returns_its_model(self):
        """Test nothing is merged when forking left one group"""
        state = FederationState.initial(self.shards, self.models[0], SeedStream(0))
        self.assertEqual(run_merge_consolidate(state, self.cfg), self.models[0])
        self.assertEqual(len(state.ledger), 0)

    def test_merges_every_group(self):
        """Test all devices end in one group holding the consolidated model"""
        state = self.grouped_state()
        policy = MergePolicy(max_rounds_per_group=4)
        final = run_merge_consolidate(state, self.cfg, policy)
        self.assertEqual(state.group_table.ids(), [0])
        self.assertEqual(state.group_table.get(0).members, list(range(6)))
        for device in state.devices.values():
            self.assertIs(device.current_model, final)
        merge_rounds = state.ledger.entries('merge')
        self.assertEqual(len(merge_rounds), 8)
        self.assertEqual([e.round for e in merge_rounds], list(range(11, 19)))

    def test_window_one_stops_after_one_round(self):
        """Test a 1-round window converges immediately for each group"""
        state = self.grouped_state()
        run_merge_consolidate(state, self.cfg, MergePolicy(window=1, max_rounds_per_group=10))
        self.assertEqual(len(state.ledger.entries('merge')), 2)

    def test_merge_transfer_accounting(self):
        """Test setup transfers (Fisher uploads + broadcast) land on the first merge round"""
        state = self.grouped_state()
        run_merge_consolidate(state, self.cfg, MergePolicy(window=1, max_rounds_per_group=1))
        first, second = state.ledger.entries('merge')
        # group 1: 2 Fisher uploads + 4 broadcasts; 2 sampled devices; 4 deploys
        self.assertEqual(first.transfers_delta, 2 + 4 + 2 * 2 + 4)
        self.assertEqual(first.updates_delta, 2)
        # group 2: 4 Fisher uploads + 6 broadcasts; 3 sampled devices; 6 deploys
        self.assertEqual(second.transfers_delta, 4 + 6 + 2 * 3 + 6)
        self.assertEqual(second.updates_delta, math.ceil(0.5 * 6))

    def test_no_ewc_skips_fisher_transfers(self):
        """Test the ablation only pays for deploying to the newcomers"""
        state = self.grouped_state()
        run_merge_consolidate(state, self.cfg, MergePolicy(window=1, max_rounds_per_group=1, ewc_enabled=False))
        first = state.ledger.entries('merge')[0]
        self.assertEqual(first.transfers_delta, 2 + 2 * 2 + 4)

    def test_deterministic(self):
        """Test the same seed yields the same consolidated model"""
        policy = MergePolicy(max_rounds_per_group=3)
        first = run_merge_consolidate(self.grouped_state(seed=7), self.cfg, policy)
        second = run_merge_consolidate(self.grouped_state(seed=7), self.cfg, policy)
        self.assertEqual(first, second)

    def test_records_report_merge_accuracy(self):
        """Test merge round records carry the pooled accuracy and merged ids"""
        records = []
        state = self.grouped_state()
        state.on_round = lambda s, r: records.append(r)
        run_merge_consolidate(state, self.cfg, MergePolicy(window=1, max_rounds_per_group=1))
        self.assertEqual([r.merged_groups for r in records], [(0, 1), (0, 1, 2)])
        for record in records:
            self.assertGreaterEqual(record.merge_accuracy, 0.0)
            self.assertLessEqual(record.merge_accuracy, 100.0)
            self.assertIsNotNone(record.working_model)
