# ============================================
# FILE: retrieval/__init__.py
# ============================================
