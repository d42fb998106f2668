from django.apps import AppConfig


class NnmodelsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'nnmodels'
    verbose_name = 'Model zoo'
