from django.apps import AppConfig
from django.conf import settings


class HesslensConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'hesslens'
    verbose_name = 'Hessian spectral toolkit'

    def ready(self):
        import torch

        threads = settings.HESSLENS.get('TORCH_THREADS')
        if threads:
            torch.set_num_threads(threads)
