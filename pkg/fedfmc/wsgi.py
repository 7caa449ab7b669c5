"""
WSGI config for the fedfmc project.

Exposes the results API (run records, metrics, presets) as ``application``.
"""

import os

from django.core.wsgi import get_wsgi_application

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'fedfmc.settings')

application = get_wsgi_application()
