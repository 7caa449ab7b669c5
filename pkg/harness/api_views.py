from drf_yasg import openapi
from drf_yasg.utils import swagger_auto_schema
from rest_framework import generics
from rest_framework.exceptions import ValidationError
from rest_framework.permissions import AllowAny
from rest_framework.response import Response
from rest_framework.views import APIView

from django.shortcuts import get_object_or_404

from cost_ledger.utils import PHASES

from .config_utils import ConfigError, list_presets, parse_config, preset_path
from .models import ExperimentRun, RoundMetric
from .serializers import (
    ExperimentRunListSerializer,
    ExperimentRunSerializer,
    PresetSerializer,
    RoundMetricSerializer,
)


class ExperimentRunListView(generics.ListAPIView):
    """
    List recorded runs, newest first.
    GET /api/runs/?algorithm=fedfmc&status=completed
    """
    serializer_class = ExperimentRunListSerializer
    permission_classes = [AllowAny]

    @swagger_auto_schema(
        operation_description="List recorded FedAvg / FedFMC runs",
        manual_parameters=[
            openapi.Parameter('algorithm', openapi.IN_QUERY, type=openapi.TYPE_STRING, enum=['fedavg', 'fedfmc']),
            openapi.Parameter('status', openapi.IN_QUERY, type=openapi.TYPE_STRING, enum=['completed', 'failed']),
        ],
        responses={200: ExperimentRunListSerializer(many=True)},
        tags=['Runs']
    )
    def get(self, request, *args, **kwargs):
        return super().get(request, *args, **kwargs)

    def get_queryset(self):
        queryset = ExperimentRun.objects.all()
        algorithm = self.request.query_params.get('algorithm')
        if algorithm:
            queryset = queryset.filter(algorithm=algorithm)
        status = self.request.query_params.get('status')
        if status:
            queryset = queryset.filter(status=status)
        return queryset


class ExperimentRunDetailView(generics.RetrieveAPIView):
    """
    One run with its config and report.
    GET /api/runs/<id>/
    """
    queryset = ExperimentRun.objects.all()
    serializer_class = ExperimentRunSerializer
    permission_classes = [AllowAny]

    @swagger_auto_schema(
        operation_description="Config, report and ledger totals of one run",
        responses={200: ExperimentRunSerializer(), 404: 'Run not found'},
        tags=['Runs']
    )
    def get(self, request, *args, **kwargs):
        return super().get(request, *args, **kwargs)


class RoundMetricListView(generics.ListAPIView):
    """
    Per-round metrics of a run.
    GET /api/runs/<id>/metrics/?phase=fork&devices=true

    Round summaries by default; devices=true returns the per-device rows.
    """
    serializer_class = RoundMetricSerializer
    permission_classes = [AllowAny]
    pagination_class = None

    @swagger_auto_schema(
        operation_description="Metric rows of one run, in round order",
        manual_parameters=[
            openapi.Parameter('phase', openapi.IN_QUERY, type=openapi.TYPE_STRING, enum=list(PHASES)),
            openapi.Parameter('devices', openapi.IN_QUERY, type=openapi.TYPE_BOOLEAN),
        ],
        responses={200: RoundMetricSerializer(many=True), 400: 'Unknown phase', 404: 'Run not found'},
        tags=['Runs']
    )
    def get(self, request, *args, **kwargs):
        return super().get(request, *args, **kwargs)

    def get_queryset(self):
        run = get_object_or_404(ExperimentRun, pk=self.kwargs['pk'])
        devices = self.request.query_params.get('devices', '').lower() in ('1', 'true', 'yes')
        queryset = RoundMetric.objects.filter(run=run, device_id__isnull=not devices)
        phase = self.request.query_params.get('phase')
        if phase:
            if phase not in PHASES:
                raise ValidationError({'phase': f"unknown phase {phase!r} (expected one of {', '.join(PHASES)})"})
            queryset = queryset.filter(phase=phase)
        return queryset.order_by('round', 'device_id')


class PresetListView(APIView):
    """
    Bundled experiment presets with every setting resolved.
    GET /api/presets/
    """
    permission_classes = [AllowAny]

    @swagger_auto_schema(
        operation_description="Bundled presets and their resolved settings",
        responses={200: PresetSerializer(many=True)},
        tags=['Presets']
    )
    def get(self, request):
        presets = []
        for name, description in list_presets():
            try:
                config = parse_config(preset_path(name)).as_dict()
            except ConfigError as e:
                config = {'error': str(e)}
            presets.append({'name': name, 'description': description, 'config': config})
        return Response(PresetSerializer(presets, many=True).data)
