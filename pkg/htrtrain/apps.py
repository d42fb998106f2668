from django.apps import AppConfig


class HtrtrainConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'htrtrain'
    verbose_name = 'Trace-regularized training'
