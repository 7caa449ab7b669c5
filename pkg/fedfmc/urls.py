"""
URL configuration for the fedfmc project.

    /admin/         run records in the Django admin
    /api/           read-only results API (runs, metrics, presets)
    /swagger/       API docs, only when drf-yasg is installed
"""
from django.contrib import admin
from django.urls import path, include, re_path
from rest_framework import permissions

# Optional Swagger imports
try:
    from drf_yasg.views import get_schema_view
    from drf_yasg import openapi

    schema_view = get_schema_view(
       openapi.Info(
          title="FedFMC Results API",
          default_version='v1',
          description="Read-only access to recorded FedAvg / FedFMC runs, their per-round metrics and the bundled presets.",
          license=openapi.License(name="BSD License"),
       ),
       public=True,
       permission_classes=(permissions.AllowAny,),
       patterns=[
          path('api/', include('harness.api_urls')),
       ],
    )
    SWAGGER_AVAILABLE = True
except ImportError:
    SWAGGER_AVAILABLE = False
    schema_view = None

urlpatterns = [
    path('admin/', admin.site.urls),
    path('api/', include('harness.api_urls')),
]

# Swagger Documentation URLs (only if drf_yasg is installed)
if SWAGGER_AVAILABLE and schema_view:
    urlpatterns += [
        re_path(r'^swagger(?P<format>\.json|\.yaml)$', schema_view.without_ui(cache_timeout=0), name='schema-json'),
        re_path(r'^swagger/$', schema_view.with_ui('swagger', cache_timeout=0), name='schema-swagger-ui'),
        re_path(r'^redoc/$', schema_view.with_ui('redoc', cache_timeout=0), name='schema-redoc'),
    ]
