from rest_framework import serializers

from .models import ExperimentRun, RoundMetric


class RoundMetricSerializer(serializers.ModelSerializer):
    class Meta:
        model = RoundMetric
        fields = [
            'round', 'phase', 'group_count', 'device_id', 'group_id', 'val_loss', 'val_acc',
            'archetype_id', 'archetype_test_acc', 'global_test_acc', 'updates_delta', 'transfers_delta',
        ]
        read_only_fields = fields


class ExperimentRunListSerializer(serializers.ModelSerializer):
    """Summary fields for the run list"""
    algorithm_display = serializers.SerializerMethodField()

    class Meta:
        model = ExperimentRun
        fields = [
            'id', 'name', 'algorithm', 'algorithm_display', 'master_seed', 'status', 'rounds',
            'final_group_count', 'final_test_accuracy', 'total_updates', 'total_transfers',
            'cost_check_passed', 'created_at',
        ]
        read_only_fields = fields

    def get_algorithm_display(self, obj):
        return obj.get_algorithm_display()


class ExperimentRunSerializer(ExperimentRunListSerializer):
    """Everything stored for one run, report and config included"""

    class Meta(ExperimentRunListSerializer.Meta):
        fields = ExperimentRunListSerializer.Meta.fields + [
            'config', 'report', 'output_dir', 'error_message', 'duration_seconds',
        ]
        read_only_fields = fields


class PresetSerializer(serializers.Serializer):
    name = serializers.CharField()
    description = serializers.CharField(allow_blank=True)
    config = serializers.DictField()
