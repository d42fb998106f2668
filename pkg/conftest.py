import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'hesslens.settings')
django.setup()
