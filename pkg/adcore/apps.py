from django.apps import AppConfig


class AdcoreConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'adcore'
    verbose_name = 'Autodiff core'
