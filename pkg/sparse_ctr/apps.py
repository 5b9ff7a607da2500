from django.apps import AppConfig


class SparseCtrConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'sparse_ctr'
    verbose_name = 'Motor CTR con poda estructural'
