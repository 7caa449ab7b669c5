"""
API tests for the read-only results endpoints
"""
from django.test import TestCase
from django.urls import reverse
from rest_framework import status
from rest_framework.test import APIClient

from .models import ExperimentRun, RoundMetric


class ResultsAPITestCase(TestCase):
    """Test cases for /api/runs/ and /api/presets/"""

    def setUp(self):
        self.client = APIClient()
        self.fedavg = ExperimentRun.objects.create(
            name='three_archetypes_fedavg', algorithm='fedavg', master_seed=0,
            config={'T': 2}, report={'rounds': 2}, rounds=2, final_test_accuracy=61.5,
            total_updates=12, total_transfers=48, cost_check_passed=True,
        )
        self.fedfmc = ExperimentRun.objects.create(
            name='three_archetypes', algorithm='fedfmc', master_seed=1,
            config={'T': 2}, report={'fork': {'group_count': 3}}, rounds=3,
            final_group_count=3, final_test_accuracy=88.0,
        )
        self.failed = ExperimentRun.objects.create(
            name='broken', algorithm='fedfmc', status=ExperimentRun.STATUS_FAILED,
            error_message='truncated while reading magic',
        )
        for round_index, phase in [(1, 'fork'), (2, 'fork'), (3, 'merge')]:
            RoundMetric.objects.create(
                run=self.fedfmc, round=round_index, phase=phase, group_count=3,
                val_loss=0.5, val_acc=80.0, global_test_acc=70.0 + round_index,
                updates_delta=6, transfers_delta=24,
            )
            for device_id in range(2):
                RoundMetric.objects.create(
                    run=self.fedfmc, round=round_index, phase=phase, group_count=3,
                    device_id=device_id, group_id=device_id, val_acc=75.0, archetype_id=device_id,
                )

    def test_list_runs(self):
        """Test every run is listed, newest first"""
        response = self.client.get(reverse('harness_api:run-list'))
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual([run['id'] for run in response.data], [self.failed.id, self.fedfmc.id, self.fedavg.id])
        self.assertEqual(response.data[1]['algorithm_display'], 'FedFMC (fork + merge)')
        self.assertNotIn('report', response.data[0])

    def test_filter_runs(self):
        """Test algorithm and status filters"""
        response = self.client.get(reverse('harness_api:run-list'), {'algorithm': 'fedavg'})
        self.assertEqual([run['id'] for run in response.data], [self.fedavg.id])
        response = self.client.get(reverse('harness_api:run-list'), {'status': 'failed'})
        self.assertEqual([run['name'] for run in response.data], ['broken'])

    def test_run_detail(self):
        """Test the detail view carries config and report"""
        response = self.client.get(reverse('harness_api:run-detail', args=[self.fedfmc.id]))
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual(response.data['report'], {'fork': {'group_count': 3}})
        self.assertEqual(response.data['final_group_count'], 3)

    def test_run_detail_not_found(self):
        """Test an unknown run id is a 404"""
        response = self.client.get(reverse('harness_api:run-detail', args=[9999]))
        self.assertEqual(response.status_code, status.HTTP_404_NOT_FOUND)

    def test_metrics_summaries(self):
        """Test metrics default to round summaries in round order"""
        response = self.client.get(reverse('harness_api:run-metrics', args=[self.fedfmc.id]))
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual([row['round'] for row in response.data], [1, 2, 3])
        self.assertTrue(all(row['device_id'] is None for row in response.data))
        self.assertEqual(response.data[2]['global_test_acc'], 73.0)

    def test_metrics_devices_and_phase(self):
        """Test devices=true and the phase filter"""
        url = reverse('harness_api:run-metrics', args=[self.fedfmc.id])
        response = self.client.get(url, {'devices': 'true', 'phase': 'fork'})
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual(len(response.data), 4)
        self.assertEqual([(row['round'], row['device_id']) for row in response.data], [(1, 0), (1, 1), (2, 0), (2, 1)])

        response = self.client.get(url, {'phase': 'merge'})
        self.assertEqual([row['round'] for row in response.data], [3])

    def test_metrics_bad_phase(self):
        """Test an unknown phase is a 400"""
        response = self.client.get(reverse('harness_api:run-metrics', args=[self.fedfmc.id]), {'phase': 'warmup'})
        self.assertEqual(response.status_code, status.HTTP_400_BAD_REQUEST)
        self.assertIn('phase', response.data)

    def test_metrics_unknown_run(self):
        """Test metrics of an unknown run are a 404"""
        response = self.client.get(reverse('harness_api:run-metrics', args=[9999]))
        self.assertEqual(response.status_code, status.HTTP_404_NOT_FOUND)

    def test_read_only(self):
        """Test writes are not allowed"""
        response = self.client.post(reverse('harness_api:run-list'), {'name': 'x'}, format='json')
        self.assertEqual(response.status_code, status.HTTP_405_METHOD_NOT_ALLOWED)
        response = self.client.delete(reverse('harness_api:run-detail', args=[self.fedavg.id]))
        self.assertEqual(response.status_code, status.HTTP_405_METHOD_NOT_ALLOWED)

    def test_presets(self):
        """Test the bundled presets are served with resolved settings"""
        response = self.client.get(reverse('harness_api:preset-list'))
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        presets = {preset['name']: preset for preset in response.data}
        self.assertIn('three_archetypes', presets)
        self.assertEqual(presets['three_archetypes']['config']['archetypes'], '0@1; 1@1; 2@1')
        self.assertEqual(presets['grouped_archetypes']['config']['archetypes'], '0,1,2,3@1; 4,5,6@1; 7,8,9@1')
