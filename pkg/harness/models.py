from django.db import models


class ExperimentRun(models.Model):
    """
    One invocation of `manage.py run`: the resolved config, the report and the
    ledger totals. Per-round numbers live in RoundMetric.
    """
    STATUS_COMPLETED = 'completed'
    STATUS_FAILED = 'failed'
    STATUS_CHOICES = [
        (STATUS_COMPLETED, 'Completed'),
        (STATUS_FAILED, 'Failed'),
    ]
    ALGORITHM_CHOICES = [
        ('fedavg', 'FedAvg'),
        ('fedfmc', 'FedFMC (fork + merge)'),
    ]

    name = models.CharField(max_length=200, help_text="Config file or preset name")
    algorithm = models.CharField(max_length=20, choices=ALGORITHM_CHOICES)
    master_seed = models.PositiveIntegerField(default=0)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default=STATUS_COMPLETED)

    config = models.JSONField(default=dict, help_text="Every setting of the run, defaults included")
    report = models.JSONField(default=dict, blank=True)
    output_dir = models.CharField(max_length=500, blank=True)
    error_message = models.TextField(blank=True)

    rounds = models.PositiveIntegerField(default=0)
    final_group_count = models.PositiveIntegerField(null=True, blank=True, help_text="Groups after the fork phase")
    final_test_accuracy = models.FloatField(null=True, blank=True, help_text="Percent, on the balanced test set")
    total_updates = models.PositiveBigIntegerField(default=0)
    total_transfers = models.PositiveBigIntegerField(default=0)
    cost_check_passed = models.BooleanField(null=True, blank=True)
    duration_seconds = models.FloatField(null=True, blank=True)

    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at', '-id']
        verbose_name = "Experiment Run"
        verbose_name_plural = "Experiment Runs"

    def __str__(self):
        return f"#{self.pk} {self.name} ({self.algorithm}, seed {self.master_seed}) - {self.status}"


class RoundMetric(models.Model):
    """A metrics.csv / devices.csv row; device_id is null on round summaries"""
    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name='metrics')
    round = models.PositiveIntegerField()
    phase = models.CharField(max_length=20)
    group_count = models.PositiveIntegerField()
    device_id = models.PositiveIntegerField(null=True, blank=True)
    group_id = models.IntegerField(null=True, blank=True)
    val_loss = models.FloatField(null=True, blank=True)
    val_acc = models.FloatField(null=True, blank=True)
    archetype_id = models.PositiveIntegerField(null=True, blank=True)
    archetype_test_acc = models.FloatField(null=True, blank=True)
    global_test_acc = models.FloatField(null=True, blank=True)
    updates_delta = models.PositiveIntegerField(default=0)
    transfers_delta = models.PositiveIntegerField(default=0)

    class Meta:
        ordering = ['run', 'round', 'device_id']
        indexes = [
            models.Index(fields=['run', 'phase'], name='harness_metric_run_phase_idx'),
        ]

    def __str__(self):
        who = 'summary' if self.device_id is None else f"device {self.device_id}"
        return f"run {self.run_id} round {self.round} ({self.phase}) {who}"
