import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'stemforge.settings')
django.setup()
