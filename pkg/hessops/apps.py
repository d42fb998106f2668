from django.apps import AppConfig


class HessopsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'hessops'
    verbose_name = 'Curvature operators'
