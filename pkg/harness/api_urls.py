from django.urls import path
from . import api_views

app_name = 'harness_api'

urlpatterns = [
    path('runs/', api_views.ExperimentRunListView.as_view(), name='run-list'),
    path('runs/<int:pk>/', api_views.ExperimentRunDetailView.as_view(), name='run-detail'),
    path('runs/<int:pk>/metrics/', api_views.RoundMetricListView.as_view(), name='run-metrics'),
    path('presets/', api_views.PresetListView.as_view(), name='preset-list'),
]
