"""Full-field XRF imaging through a square-channel micro pore optic:
Monte Carlo simulation, detector event handling, and image analysis."""

from .optics import (
    IRIDIUM,
    ChannelTraceResult,
    Material,
    MpoGeometry,
    PathClass,
    Photon,
    ReflectivityModel,
    classify_path,
    critical_angle_deg,
    grazing_reflectivity,
    pore_entry,
    trace_channel,
)
from .sim import (
    DetectorSpec,
    Scene,
    Source,
    SpectralImage,
    apply_energy_response,
    project_to_detector,
    sample_emission,
    simulate,
)

__version__ = "0.1.0"

__all__ = [
    "IRIDIUM",
    "ChannelTraceResult",
    "Material",
    "MpoGeometry",
    "PathClass",
    "Photon",
    "ReflectivityModel",
    "classify_path",
    "critical_angle_deg",
    "grazing_reflectivity",
    "pore_entry",
    "trace_channel",
    "DetectorSpec",
    "Scene",
    "Source",
    "SpectralImage",
    "apply_energy_response",
    "project_to_detector",
    "sample_emission",
    "simulate",
]
