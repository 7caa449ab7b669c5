from django.apps import AppConfig


class CostLedgerConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'cost_ledger'
    verbose_name = 'Cost ledger'
