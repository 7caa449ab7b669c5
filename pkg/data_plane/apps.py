from django.apps import AppConfig


class DataPlaneConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'data_plane'
    verbose_name = 'Data plane (datasets / partitioner)'
