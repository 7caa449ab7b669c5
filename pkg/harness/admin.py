from django.contrib import admin

from .models import ExperimentRun, RoundMetric


class RoundMetricInline(admin.TabularInline):
    model = RoundMetric
    extra = 0
    can_delete = False
    fields = ['round', 'phase', 'group_count', 'val_loss', 'val_acc', 'global_test_acc', 'updates_delta', 'transfers_delta']
    readonly_fields = fields
    show_change_link = False

    def get_queryset(self, request):
        # round summaries only; per-device rows would swamp the page
        return super().get_queryset(request).filter(device_id__isnull=True)

    def has_add_permission(self, request, obj=None):
        return False


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    """Recorded runs, read-only apart from deletion"""
    list_display = [
        'id', 'name', 'algorithm', 'master_seed', 'status', 'rounds',
        'final_group_count', 'final_test_accuracy', 'total_transfers', 'cost_check_passed', 'created_at',
    ]
    list_filter = ['algorithm', 'status', 'cost_check_passed', 'created_at']
    search_fields = ['name', 'error_message']
    ordering = ['-created_at']
    readonly_fields = [
        'name', 'algorithm', 'master_seed', 'status', 'config', 'report', 'output_dir', 'error_message',
        'rounds', 'final_group_count', 'final_test_accuracy', 'total_updates', 'total_transfers',
        'cost_check_passed', 'duration_seconds', 'created_at',
    ]
    inlines = [RoundMetricInline]

    fieldsets = (
        ('Run', {
            'fields': ('name', 'algorithm', 'master_seed', 'status', 'output_dir', 'duration_seconds', 'created_at')
        }),
        ('Outcome', {
            'fields': ('rounds', 'final_group_count', 'final_test_accuracy')
        }),
        ('Costs', {
            'fields': ('total_updates', 'total_transfers', 'cost_check_passed'),
            'description': 'Device-epochs and model transfers counted by the cost ledger'
        }),
        ('Details', {
            'fields': ('config', 'report', 'error_message'),
            'classes': ('collapse',)
        }),
    )

    def has_add_permission(self, request):
        return False


@admin.register(RoundMetric)
class RoundMetricAdmin(admin.ModelAdmin):
    list_display = ['run', 'round', 'phase', 'group_count', 'device_id', 'group_id', 'val_acc', 'global_test_acc']
    list_filter = ['phase']
    search_fields = ['run__name']
    list_select_related = ['run']

    def has_add_permission(self, request):
        return False

    def has_change_permission(self, request, obj=None):
        return False
