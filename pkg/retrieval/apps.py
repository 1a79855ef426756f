# ============================================
# FILE: retrieval/apps.py
# ============================================

from django.apps import AppConfig


class RetrievalConfig(AppConfig):
    name = 'retrieval'
    verbose_name = 'STEM Evidence Retrieval'
