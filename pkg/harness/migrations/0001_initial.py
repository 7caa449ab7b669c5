# Generated by Django 5.2.8 on 2026-10-18 09:12

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('name', models.CharField(help_text='Config file or preset name', max_length=200)),
                ('algorithm', models.CharField(choices=[('fedavg', 'FedAvg'), ('fedfmc', 'FedFMC (fork + merge)')], max_length=20)),
                ('master_seed', models.PositiveIntegerField(default=0)),
                ('status', models.CharField(choices=[('completed', 'Completed'), ('failed', 'Failed')], default='completed', max_length=20)),
                ('config', models.JSONField(default=dict, help_text='Every setting of the run, defaults included')),
                ('report', models.JSONField(blank=True, default=dict)),
                ('output_dir', models.CharField(blank=True, max_length=500)),
                ('error_message', models.TextField(blank=True)),
                ('rounds', models.PositiveIntegerField(default=0)),
                ('final_group_count', models.PositiveIntegerField(blank=True, help_text='Groups after the fork phase', null=True)),
                ('final_test_accuracy', models.FloatField(blank=True, help_text='Percent, on the balanced test set', null=True)),
                ('total_updates', models.PositiveBigIntegerField(default=0)),
                ('total_transfers', models.PositiveBigIntegerField(default=0)),
                ('cost_check_passed', models.BooleanField(blank=True, null=True)),
                ('duration_seconds', models.FloatField(blank=True, null=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'verbose_name': 'Experiment Run',
                'verbose_name_plural': 'Experiment Runs',
                'ordering': ['-created_at', '-id'],
            },
        ),
        migrations.CreateModel(
            name='RoundMetric',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('round', models.PositiveIntegerField()),
                ('phase', models.CharField(max_length=20)),
                ('group_count', models.PositiveIntegerField()),
                ('device_id', models.PositiveIntegerField(blank=True, null=True)),
                ('group_id', models.IntegerField(blank=True, null=True)),
                ('val_loss', models.FloatField(blank=True, null=True)),
                ('val_acc', models.FloatField(blank=True, null=True)),
                ('archetype_id', models.PositiveIntegerField(blank=True, null=True)),
                ('archetype_test_acc', models.FloatField(blank=True, null=True)),
                ('global_test_acc', models.FloatField(blank=True, null=True)),
                ('updates_delta', models.PositiveIntegerField(default=0)),
                ('transfers_delta', models.PositiveIntegerField(default=0)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='metrics', to='harness.experimentrun')),
            ],
            options={
                'ordering': ['run', 'round', 'device_id'],
                'indexes': [models.Index(fields=['run', 'phase'], name='harness_metric_run_phase_idx')],
            },
        ),
    ]
