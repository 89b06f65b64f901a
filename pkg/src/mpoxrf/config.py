"""Run configuration: INI files with strict, unit-suffixed keys.

Sections and keys (all lengths/energies carry their unit in the key name):

    [mpo]       plate_side_mm, thickness_mm, pore_width_um, pitch_um,
                coating_name, coating_z, coating_a, coating_rho_g_cm3,
                reflectivity_model (binary | constant_per_bounce),
                reflectivity
    [detector]  n_x, n_y, pitch_um, energy_fwhm_kev, threshold_kev,
                e_min_kev, e_bin_width_kev, n_bins
    [scene]     l_s_mm, l_i_mm
    [source.X]  kind (point | rect), x_mm, y_mm, z_mm, width_mm,
                height_mm, lines (comma list of energy_kev:weight)
    [sim]       photons, seed, jobs
    [analysis]  window_sigma_mm, background_exclusion_mm,
                arm_half_width_mm, resolution_threshold, rows_averaged

Unknown sections or keys are errors (reported with their line number);
every key has a default except the source line list.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from .optics import IRIDIUM, Material, MpoGeometry, ReflectivityModel
from .sim import DetectorSpec, Scene, Source


class ConfigError(ValueError):
    pass


_KNOWN = {
    "mpo": {
        "plate_side_mm",
        "thickness_mm",
        "pore_width_um",
        "pitch_um",
        "coating_name",
        "coating_z",
        "coating_a",
        "coating_rho_g_cm3",
        "reflectivity_model",
        "reflectivity",
    },
    "detector": {
        "n_x",
        "n_y",
        "pitch_um",
        "energy_fwhm_kev",
        "threshold_kev",
        "e_min_kev",
        "e_bin_width_kev",
        "n_bins",
    },
    "scene": {"l_s_mm", "l_i_mm"},
    "source": {"kind", "x_mm", "y_mm", "z_mm", "width_mm", "height_mm", "lines"},
    "sim": {"photons", "seed", "jobs"},
    "analysis": {
        "window_sigma_mm",
        "background_exclusion_mm",
        "arm_half_width_mm",
        "resolution_threshold",
        "rows_averaged",
    },
}


@dataclass
class AnalysisParams:
    window_sigma_mm: float = 1.5
    background_exclusion_mm: float = 0.5
    arm_half_width_mm: float = 0.3
    resolution_threshold: float = 0.1
    rows_averaged: int = 3


@dataclass
class RunConfig:
    mpo: MpoGeometry
    detector: DetectorSpec
    scene: Scene
    photons: int = 1_000_000
    seed: int = 1
    jobs: int = 1
    analysis: AnalysisParams = None

    def __post_init__(self):
        if self.analysis is None:
            self.analysis = AnalysisParams()


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Map (section, key) -> 1-based line number, for error reporting."""
    table = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            table[(section, None)] = lineno
            continue
        if section is not None and ("=" in line or ":" in line):
            sep = min(
                (line.index(c) for c in "=:" if c in line), default=len(line)
            )
            key = line[:sep].strip().lower()
            table.setdefault((section, key), lineno)
    return table


def _check_keys(parser: configparser.ConfigParser, lines, path) -> None:
    for section in parser.sections():
        base = "source" if section.startswith("source.") else section
        if base not in _KNOWN:
            lineno = lines.get((section, None), 0)
            raise ConfigError(f"{path}:{lineno}: unknown section [{section}]")
        for key in parser[section]:
            if key not in _KNOWN[base]:
                lineno = lines.get((section, key), 0)
                raise ConfigError(
                    f"{path}:{lineno}: unknown key {key!r} in [{section}]"
                )


def _get(parser, section, key, cast, default):
    if section not in parser or key not in parser[section]:
        return default
    raw = parser[section][key]
    try:
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def _parse_lines(raw: str, section: str) -> tuple[tuple[float, float], ...]:
    lines = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            energy, _, weight = item.partition(":")
            lines.append((float(energy), float(weight) if weight else 1.0))
        except ValueError as exc:
            raise ConfigError(
                f"[{section}] lines entry {item!r} is not energy_kev:weight"
            ) from exc
    if not lines:
        raise ConfigError(f"[{section}] needs at least one emission line")
    return tuple(lines)


def load_config(path) -> RunConfig:
    """Parse and validate a run configuration file."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc

    parser = configparser.ConfigParser(strict=True, interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    _check_keys(parser, _key_lines(text), path)

    coating = IRIDIUM
    if _get(parser, "mpo", "coating_name", str, None) is not None:
        coating = Material(
            name=_get(parser, "mpo", "coating_name", str, "Ir"),
            Z=_get(parser, "mpo", "coating_z", int, IRIDIUM.Z),
            A=_get(parser, "mpo", "coating_a", float, IRIDIUM.A),
            rho=_get(parser, "mpo", "coating_rho_g_cm3", float, IRIDIUM.rho),
        )
    model_name = _get(parser, "mpo", "reflectivity_model", str, "binary").lower()
    try:
        model = ReflectivityModel(model_name)
    except ValueError:
        raise ConfigError(
            f"[mpo] reflectivity_model {model_name!r} is not "
            "binary | constant_per_bounce"
        ) from None

    try:
        mpo = MpoGeometry(
            plate_side=_get(parser, "mpo", "plate_side_mm", float, 20.0),
            thickness_t=_get(parser, "mpo", "thickness_mm", float, 1.2),
            pore_width_w=_get(parser, "mpo", "pore_width_um", float, 20.0),
            pitch_p=_get(parser, "mpo", "pitch_um", float, 25.0),
            coating=coating,
            reflectivity_model=model,
            reflectivity=_get(parser, "mpo", "reflectivity", float, 1.0),
        )
        detector = DetectorSpec(
            n_x=_get(parser, "detector", "n_x", int, 256),
            n_y=_get(parser, "detector", "n_y", int, 256),
            pitch=_get(parser, "detector", "pitch_um", float, 55.0),
            energy_fwhm=_get(parser, "detector", "energy_fwhm_kev", float, 1.12),
            threshold=_get(parser, "detector", "threshold_kev", float, 2.0),
            e_min=_get(parser, "detector", "e_min_kev", float, 0.0),
            e_bin_width=_get(parser, "detector", "e_bin_width_kev", float, 0.25),
            n_bins=_get(parser, "detector", "n_bins", int, 100),
        )
        l_s = _get(parser, "scene", "l_s_mm", float, 25.0)
        l_i = _get(parser, "scene", "l_i_mm", float, 25.0)

        sources = []
        for section in parser.sections():
            if not section.startswith("source."):
                continue
            label = section.split(".", 1)[1]
            kind = _get(parser, section, "kind", str, "point").lower()
            if kind not in ("point", "rect"):
                raise ConfigError(f"[{section}] kind must be point or rect")
            width = _get(parser, section, "width_mm", float, 0.0)
            height = _get(parser, section, "height_mm", float, 0.0)
            if kind == "point":
                width = height = 0.0
            elif width <= 0 or height <= 0:
                raise ConfigError(f"[{section}] rect sources need width and height")
            if "lines" not in parser[section]:
                raise ConfigError(f"[{section}] is missing its lines key")
            sources.append(
                Source(
                    label=label,
                    lines=_parse_lines(parser[section]["lines"], section),
                    position=(
                        _get(parser, section, "x_mm", float, 0.0),
                        _get(parser, section, "y_mm", float, -l_s),
                        _get(parser, section, "z_mm", float, 0.0),
                    ),
                    width=width,
                    height=height,
                )
            )
        if not sources:
            raise ConfigError(f"{path}: no [source.*] sections")
        scene = Scene(sources=tuple(sources), L_s=l_s, L_i=l_i)

        analysis = AnalysisParams(
            window_sigma_mm=_get(parser, "analysis", "window_sigma_mm", float, 1.5),
            background_exclusion_mm=_get(
                parser, "analysis", "background_exclusion_mm", float, 0.5
            ),
            arm_half_width_mm=_get(
                parser, "analysis", "arm_half_width_mm", float, 0.3
            ),
            resolution_threshold=_get(
                parser, "analysis", "resolution_threshold", float, 0.1
            ),
            rows_averaged=_get(parser, "analysis", "rows_averaged", int, 3),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    return RunConfig(
        mpo=mpo,
        detector=detector,
        scene=scene,
        photons=_get(parser, "sim", "photons", int, 1_000_000),
        seed=_get(parser, "sim", "seed", int, 1),
        jobs=_get(parser, "sim", "jobs", int, 1),
        analysis=analysis,
    )
