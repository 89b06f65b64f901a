"""Single-pore physics of a square-channel micro pore optic.

A micro pore optic (MPO) is a plate of microscopic square glass channels
whose walls act as grazing-incidence X-ray mirrors.  Because the channel
cross section is square, motion in the two transverse planes decouples
exactly: a ray bounces between the two x-walls and, independently, between
the two z-walls.  That makes the full in-channel trajectory solvable in
closed form by "unfolding" the reflections into a straight line through a
stack of mirror tiles, which is what :func:`trace_channel` does.

Conventions used throughout:

* the optic axis is the lab y axis; the plate face lies in the x-z plane,
* transverse slopes are dimensionless (dx/dy, dz/dy),
* grazing angles are measured from the mirror surface, in degrees,
* pore-local coordinates u, v run across the channel opening in micrometres,
  u, v in [0, w].
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

# Transverse slopes beyond this are outside the regime the channel model is
# meant for (grazing optics; super-critical rays are absorbed anyway).
SLOPE_LIMIT = 1.0

EQ_CRITICAL_ANGLE_COEFF = 1.651  # deg keV sqrt(mol cm^3 / g^2)


@dataclass(frozen=True)
class Material:
    """Coating material entering the critical-angle formula.

    Attributes
    ----------
    name : str
        Text label ("Ir", "Au", ...).
    Z : int
        Atomic number.
    A : float
        Atomic mass, g/mol.
    rho : float
        Density, g/cm^3.
    """

    name: str
    Z: int
    A: float
    rho: float

    def __post_init__(self):
        if self.Z < 1:
            raise ValueError(f"atomic number must be >= 1, got {self.Z}")
        if self.A <= 0:
            raise ValueError(f"atomic mass must be positive, got {self.A}")
        if self.rho <= 0:
            raise ValueError(f"density must be positive, got {self.rho}")
        if not 0.0 < self.Z / self.A <= 1.0:
            raise ValueError(
                f"Z/A = {self.Z / self.A:.3f} outside (0, 1]; not a real element"
            )


#: Iridium, the usual heavy reflective channel coating (bulk density).
IRIDIUM = Material(name="Ir", Z=77, A=192.217, rho=22.56)


class ReflectivityModel(enum.Enum):
    """How a wall bounce below the critical angle is weighted."""

    BINARY = "binary"
    CONSTANT_PER_BOUNCE = "constant_per_bounce"


@dataclass(frozen=True)
class MpoGeometry:
    """Square-pore plate geometry and coating.

    Attributes
    ----------
    plate_side : float
        Side of the square plate, mm.
    thickness_t : float
        Plate (channel) thickness, mm.
    pore_width_w : float
        Square channel opening, micrometres.
    pitch_p : float
        Channel pitch, micrometres.  Pores are centered in each pitch cell;
        the web between openings absorbs totally.
    coating : Material
        Reflective wall coating.
    reflectivity_model : ReflectivityModel
        BINARY reflects with probability 1 below the critical angle;
        CONSTANT_PER_BOUNCE applies ``reflectivity`` per bounce.
    reflectivity : float
        Per-bounce survival probability for CONSTANT_PER_BOUNCE.
    """

    plate_side: float
    thickness_t: float
    pore_width_w: float
    pitch_p: float
    coating: Material = IRIDIUM
    reflectivity_model: ReflectivityModel = ReflectivityModel.BINARY
    reflectivity: float = 1.0

    def __post_init__(self):
        if not 0 < self.pore_width_w < self.pitch_p:
            raise ValueError(
                f"need 0 < pore width ({self.pore_width_w}) < pitch ({self.pitch_p})"
            )
        if self.thickness_t <= 0:
            raise ValueError("plate thickness must be positive")
        if self.plate_side <= 0:
            raise ValueError("plate side must be positive")
        if not 0.0 < self.reflectivity <= 1.0:
            raise ValueError("per-bounce reflectivity must be in (0, 1]")

    @property
    def open_area_fraction(self) -> float:
        """Geometric open-area fraction, (w/p)^2."""
        return (self.pore_width_w / self.pitch_p) ** 2


@dataclass
class Photon:
    """Ray state in the lab frame (optic axis = y).

    ``weight`` carries the emission-sampling probability weight so that
    absolute flux normalization stays unbiased; it does not affect whether
    a photon is counted.
    """

    pos: tuple[float, float, float]  # mm
    slope_x: float
    slope_z: float
    energy: float  # keV
    weight: float = 1.0

    def __post_init__(self):
        if self.energy <= 0:
            raise ValueError(f"photon energy must be positive, got {self.energy}")
        if not (math.isfinite(self.slope_x) and math.isfinite(self.slope_z)):
            raise ValueError("photon slopes must be finite")
        if max(abs(self.slope_x), abs(self.slope_z)) >= SLOPE_LIMIT:
            raise ValueError(
                f"transverse slope {self.slope_x:.3g}/{self.slope_z:.3g} outside "
                f"|slope| < {SLOPE_LIMIT}; not a grazing-optics ray"
            )
        if not 0.0 < self.weight <= 1.0:
            raise ValueError(f"photon weight must be in (0, 1], got {self.weight}")


class TraceOutcome(enum.Enum):
    ABSORBED = "absorbed"
    EXITED = "exited"


@dataclass(frozen=True)
class ChannelTraceResult:
    """State of a ray after traversing (or dying inside) one channel.

    For ABSORBED rays the exit fields and reflection counts are the values
    the geometric unfolding would have produced; absorption is an overlay
    on top of the (always well-defined) geometry.
    """

    outcome: TraceOutcome
    exit_u: float  # micrometres, in [0, w] for EXITED
    exit_v: float
    exit_slope_x: float
    exit_slope_z: float
    n_reflections_x: int
    n_reflections_z: int


class PathClass(enum.Enum):
    """Reflection-parity taxonomy of a detected ray.

    Odd reflection counts in a plane reverse the transverse direction in
    that plane (focusing); even counts preserve it (de-focusing).  Odd in
    both planes builds the central spot, mixed parity builds the cross
    arms, zero bounces is direct transmission, and the remaining
    even/even rays form the diffuse quadrants.
    """

    CENTRAL_FOCUS = "central_focus"
    ARM_ALONG_X = "arm_along_x"
    ARM_ALONG_Z = "arm_along_z"
    DIFFUSE = "diffuse"
    DIRECT = "direct"


class EntryOutcome(enum.Enum):
    PORE = "pore"
    WEB = "web"
    OFF_PLATE = "off_plate"


@dataclass(frozen=True)
class PoreEntry:
    """Where a photon met the plate face.

    ``i, j`` are pitch-cell indices counted from the plate center; ``u, v``
    are pore-local coordinates in micrometres (only meaningful for PORE).
    """

    outcome: EntryOutcome
    i: int = 0
    j: int = 0
    u: float = 0.0
    v: float = 0.0


def critical_angle_deg(energy: float, material: Material) -> float:
    """Critical grazing angle for total external reflection, in degrees.

    theta_c = 1.651 / E[keV] * sqrt((Z/A) * rho[g/cm^3])

    Scales exactly as 1/E: doubling the energy halves the angle.

    Parameters
    ----------
    energy : float
        Photon energy, keV.  Must be positive.
    material : Material
        Reflecting surface material.
    """
    if energy <= 0:
        raise ValueError(f"energy must be positive, got {energy}")
    return (
        EQ_CRITICAL_ANGLE_COEFF
        / energy
        * math.sqrt(material.Z / material.A * material.rho)
    )


def grazing_reflectivity(
    grazing_angle: float, energy: float, geometry: MpoGeometry
) -> float:
    """Survival probability for one wall bounce at the given grazing angle.

    Angles above the critical angle of the coating absorb (0.0).  At or
    below it, the BINARY model reflects with probability 1 and
    CONSTANT_PER_BOUNCE with the configured per-bounce reflectivity.  The
    boundary case ``angle == theta_c`` counts as reflecting (inclusive
    threshold, a measure-zero tie-break fixed for reproducibility).
    """
    if grazing_angle < 0:
        raise ValueError(f"grazing angle must be >= 0, got {grazing_angle}")
    if grazing_angle > critical_angle_deg(energy, geometry.coating):
        return 0.0
    if geometry.reflectivity_model is ReflectivityModel.BINARY:
        return 1.0
    return geometry.reflectivity


def pore_entry(plate_x: float, plate_z: float, geometry: MpoGeometry) -> PoreEntry:
    """Map a lab-frame plate-face position (mm) to a pore opening.

    The plate is tiled by pitch cells with a cell center at the plate
    center; each cell holds a centered w x w opening.  Points landing on
    the web between openings are absorbed; points off the plate entirely
    are reported as OFF_PLATE.  The opening boundary itself counts as
    inside (closed interval).
    """
    half = geometry.plate_side / 2.0
    if abs(plate_x) > half or abs(plate_z) > half:
        return PoreEntry(EntryOutcome.OFF_PLATE)
    p_mm = geometry.pitch_p * 1e-3
    i = math.floor(plate_x / p_mm + 0.5)
    j = math.floor(plate_z / p_mm + 0.5)
    # offsets from the cell center, micrometres
    du = (plate_x - i * p_mm) * 1e3
    dv = (plate_z - j * p_mm) * 1e3
    half_w = geometry.pore_width_w / 2.0
    if abs(du) > half_w or abs(dv) > half_w:
        return PoreEntry(EntryOutcome.WEB, i=i, j=j)
    return PoreEntry(EntryOutcome.PORE, i=i, j=j, u=du + half_w, v=dv + half_w)


def pore_center_mm(entry: PoreEntry, geometry: MpoGeometry) -> tuple[float, float]:
    """Lab-frame (x, z) of the pore's cell center, mm."""
    p_mm = geometry.pitch_p * 1e-3
    return entry.i * p_mm, entry.j * p_mm


def unfold_plane(entry_u: float, slope: float, width: float, thickness_um: float):
    """Closed-form transit of one transverse plane of a square channel.

    Unfolds the zig-zag path into a straight line through mirror tiles of
    period ``width``: the unfolded displacement is U = u0 + t * slope, the
    reflection count is the number of tile walls crossed, the exit
    position is the triangle-wave fold of U back into [0, w], and the
    exit slope flips sign once per reflection.

    All lengths in micrometres; slope dimensionless.

    Returns
    -------
    (exit_u, exit_slope, n_reflections)
    """
    u_unfolded = entry_u + thickness_um * slope
    k = math.floor(u_unfolded / width)
    folded = u_unfolded - k * width
    if folded == 0.0 and k > 0:
        # endpoint exactly on a wall: the trajectory stayed in the lower
        # tile and only touches the boundary, so no crossing is counted
        k -= 1
        folded = width
    n = abs(k)
    if k % 2:
        exit_u = width - folded
    else:
        exit_u = folded
    exit_slope = -slope if n % 2 else slope
    return exit_u, exit_slope, n


def trace_channel(
    entry_u: float,
    entry_v: float,
    slope_x: float,
    slope_z: float,
    energy: float,
    geometry: MpoGeometry,
    rng=None,
) -> ChannelTraceResult:
    """Trace one ray through one square channel.

    The square cross section decouples the planes, so each is unfolded
    analytically with :func:`unfold_plane`.  Every bounce is then weighted
    with :func:`grazing_reflectivity` at the plane-projected grazing angle
    atan(|slope|): the BINARY model kills the ray at its first
    super-critical bounce, and CONSTANT_PER_BOUNCE additionally plays
    Russian roulette against the per-bounce reflectivity (one Bernoulli
    draw against r^n, which preserves integer counting downstream
    unbiased).  Given the rng state the result is deterministic.

    Parameters
    ----------
    entry_u, entry_v : float
        Pore-local entry position, micrometres, in [0, w].
    slope_x, slope_z : float
        Transverse slopes of the ray.
    energy : float
        Photon energy, keV.
    geometry : MpoGeometry
    rng : numpy.random.Generator, optional
        Consumed only by CONSTANT_PER_BOUNCE with at least one bounce.
    """
    w = geometry.pore_width_w
    if not (0.0 <= entry_u <= w and 0.0 <= entry_v <= w):
        raise ValueError(
            f"entry ({entry_u}, {entry_v}) outside pore opening [0, {w}]"
        )
    t_um = geometry.thickness_t * 1e3
    exit_u, exit_slope_x, n_x = unfold_plane(entry_u, slope_x, w, t_um)
    exit_v, exit_slope_z, n_z = unfold_plane(entry_v, slope_z, w, t_um)

    survived = True
    for slope, n in ((slope_x, n_x), (slope_z, n_z)):
        if n == 0:
            continue
        angle = math.degrees(math.atan(abs(slope)))
        r = grazing_reflectivity(angle, energy, geometry)
        if r == 0.0:
            survived = False
        elif r < 1.0:
            if rng is None:
                raise ValueError("CONSTANT_PER_BOUNCE tracing needs an rng")
            if rng.random() >= r**n:
                survived = False

    return ChannelTraceResult(
        outcome=TraceOutcome.EXITED if survived else TraceOutcome.ABSORBED,
        exit_u=exit_u,
        exit_v=exit_v,
        exit_slope_x=exit_slope_x,
        exit_slope_z=exit_slope_z,
        n_reflections_x=n_x,
        n_reflections_z=n_z,
    )


def classify_path(n_reflections_x: int, n_reflections_z: int) -> PathClass:
    """Classify a transmitted ray by per-plane reflection parity.

    (odd, odd) -> CENTRAL_FOCUS, (odd, even) -> ARM_ALONG_Z (focused in x,
    spread along z), (even, odd) -> ARM_ALONG_X, (0, 0) -> DIRECT, and any
    other (even, even) -> DIFFUSE.
    """
    if n_reflections_x < 0 or n_reflections_z < 0:
        raise ValueError("reflection counts must be >= 0")
    odd_x = n_reflections_x % 2 == 1
    odd_z = n_reflections_z % 2 == 1
    if odd_x and odd_z:
        return PathClass.CENTRAL_FOCUS
    if odd_x:
        return PathClass.ARM_ALONG_Z
    if odd_z:
        return PathClass.ARM_ALONG_X
    if n_reflections_x == 0 and n_reflections_z == 0:
        return PathClass.DIRECT
    return PathClass.DIFFUSE


def march_plane(entry_u: float, slope: float, width: float, thickness_um: float):
    """Brute-force wall-by-wall ray march through one channel plane.

    Independent oracle for :func:`unfold_plane`: advances the ray to each
    explicit wall intersection, flips the slope, and repeats until the ray
    clears the channel length.  Intentionally does no tiling arithmetic.

    Returns
    -------
    (exit_u, exit_slope, n_reflections)
    """
    u = entry_u
    s = slope
    y = 0.0
    n = 0
    if s == 0.0:
        return u, s, 0
    while True:
        wall = width if s > 0 else 0.0
        dy = (wall - u) / s
        if y + dy >= thickness_um:
            return u + s * (thickness_um - y), s, n
        y += dy
        u = wall
        s = -s
        n += 1
