from django.apps import AppConfig


class SpecanalysisConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'specanalysis'
    verbose_name = 'Spectrum analysis'
