"""Scene description and Monte Carlo transport through the pore plate.

The chain for every photon is: sample an emission point and a direction
aimed at the plate, find the pore it enters (or the web / empty space that
swallows it), unfold its in-channel trajectory, propagate the survivors to
the detector plane, smear the energy with the detector response, and bin
the hit into a pixel x energy cube.

Photons are processed in fixed batches of ``BATCH_SIZE``.  Batch ``b`` of a
run with seed ``s`` uses its own Philox stream keyed by a SplitMix64 mix of
(s, b), and batch results merge by integer addition, so a run is
bit-identical for any number of workers.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .optics import (
    MpoGeometry,
    PathClass,
    Photon,
    ReflectivityModel,
    TraceOutcome,
    critical_angle_deg,
    pore_center_mm,
)

BATCH_SIZE = 65536

#: FWHM of a Gaussian in units of its standard deviation.
FWHM_PER_SIGMA = 2.3548200450309493

#: K-alpha energies used for the imaging scenes (values as commonly quoted
#: for Ti and Cu fluorescence; the calibration tables in
#: :mod:`mpoxrf.events` carry the full five-element list).
TI_KALPHA_KEV = 4.5
CU_KALPHA_KEV = 8.0

_MASK64 = (1 << 64) - 1
_GOLDEN64 = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class Source:
    """A fluorescing sample feature.

    A point source has ``width == height == 0``; a rectangular emitter is
    uniform over ``width`` (x) by ``height`` (z) around ``position``.
    ``lines`` are (energy keV, relative intensity) pairs; emission picks a
    line proportionally to intensity.
    """

    label: str
    lines: tuple[tuple[float, float], ...]
    position: tuple[float, float, float]  # mm, y is the along-axis offset
    width: float = 0.0
    height: float = 0.0

    def __post_init__(self):
        if not self.lines:
            raise ValueError(f"source {self.label!r} has no emission lines")
        for energy, intensity in self.lines:
            if energy <= 0 or intensity <= 0:
                raise ValueError(
                    f"source {self.label!r}: line ({energy}, {intensity}) "
                    "needs positive energy and intensity"
                )
        if (self.width > 0) != (self.height > 0):
            raise ValueError("rect sources need both width and height positive")
        if self.width < 0 or self.height < 0:
            raise ValueError("rect dimensions must be >= 0")

    @property
    def is_rect(self) -> bool:
        return self.width > 0

    @property
    def total_intensity(self) -> float:
        return sum(w for _, w in self.lines)


@dataclass(frozen=True)
class Scene:
    """Sources plus the two working distances of the bench."""

    sources: tuple[Source, ...]
    L_s: float  # sample -> plate entrance face, mm
    L_i: float  # plate exit face -> detector, mm

    def __post_init__(self):
        if self.L_s <= 0 or self.L_i <= 0:
            raise ValueError("working distances must be positive")
        if not self.sources:
            raise ValueError("scene has no sources")


@dataclass(frozen=True)
class DetectorSpec:
    """Pixel matrix and constant-FWHM energy response."""

    n_x: int = 256
    n_y: int = 256
    pitch: float = 55.0  # micrometres
    energy_fwhm: float = 1.12  # keV
    threshold: float = 2.0  # keV, measured energies below are dropped
    e_min: float = 0.0  # keV, lower edge of bin 0
    e_bin_width: float = 0.25  # keV
    n_bins: int = 100

    def __post_init__(self):
        if self.n_x <= 0 or self.n_y <= 0:
            raise ValueError("pixel counts must be positive")
        if self.pitch <= 0:
            raise ValueError("pixel pitch must be positive")
        if self.energy_fwhm < 0:
            raise ValueError("energy FWHM must be >= 0")
        if self.n_bins <= 0 or self.e_bin_width <= 0:
            raise ValueError("energy binning must be positive")


@dataclass
class SimStats:
    """Bookkeeping tallies from one simulate() run."""

    n_photons: int = 0
    missed_plate: int = 0
    web_absorbed: int = 0
    wall_absorbed: int = 0
    off_detector: int = 0
    below_threshold: int = 0
    out_of_band: int = 0
    detected: int = 0
    dead_pixel_drops: int = 0  # used by the event-calibration path only
    class_counts: dict = field(default_factory=dict)
    class_images: dict | None = None  # PathClass -> (n_y, n_x) uint64

    def add(self, other: "SimStats") -> None:
        self.n_photons += other.n_photons
        self.missed_plate += other.missed_plate
        self.web_absorbed += other.web_absorbed
        self.wall_absorbed += other.wall_absorbed
        self.off_detector += other.off_detector
        self.below_threshold += other.below_threshold
        self.out_of_band += other.out_of_band
        self.detected += other.detected
        self.dead_pixel_drops += other.dead_pixel_drops
        for key, value in other.class_counts.items():
            self.class_counts[key] = self.class_counts.get(key, 0) + value
        if other.class_images is not None:
            if self.class_images is None:
                self.class_images = {
                    k: v.copy() for k, v in other.class_images.items()
                }
            else:
                for key, img in other.class_images.items():
                    self.class_images[key] += img


@dataclass
class SpectralImage:
    """Per-pixel, per-energy-bin count cube.

    ``counts`` has shape (n_y, n_x, n_bins), dtype uint64.  ``stats`` is
    in-memory bookkeeping only; it is not part of the on-disk cube format.
    """

    counts: np.ndarray
    e_min: float
    e_bin_width: float
    pixel_pitch_um: float
    seed: int = 0
    photons: int = 0
    scene_digest: str = ""
    stats: SimStats | None = None

    @property
    def n_y(self) -> int:
        return self.counts.shape[0]

    @property
    def n_x(self) -> int:
        return self.counts.shape[1]

    @property
    def n_bins(self) -> int:
        return self.counts.shape[2]

    def bin_centers(self) -> np.ndarray:
        return self.e_min + (np.arange(self.n_bins) + 0.5) * self.e_bin_width


def scene_digest(scene: Scene, geometry: MpoGeometry, detector: DetectorSpec) -> str:
    """Short stable digest of the full run configuration."""
    text = repr((scene, geometry, detector))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def batch_seed(seed: int, batch_index: int) -> int:
    """64-bit mix of (run seed, batch index): SplitMix64 finalizer over
    seed + (batch_index + 1) * golden gamma."""
    x = (seed + (batch_index + 1) * _GOLDEN64) & _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


def _batch_rng(seed: int, batch_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=batch_seed(seed, batch_index)))


def _sample_emission_arrays(scene: Scene, geometry: MpoGeometry, n: int, rng):
    """Vectorized emission sampling for ``n`` photons.

    Draw order is fixed (source pick, rect offsets, plate target, line
    pick) so a batch is reproducible from its rng alone.  Returns emission
    points, plate-target slopes, energies and solid-angle weights.
    """
    sources = scene.sources
    src_weights = np.array([s.total_intensity for s in sources], dtype=float)
    src_cdf = np.cumsum(src_weights) / src_weights.sum()

    u_src = rng.random(n)
    u_rect_x = rng.random(n)
    u_rect_z = rng.random(n)
    target_x = (rng.random(n) - 0.5) * geometry.plate_side
    target_z = (rng.random(n) - 0.5) * geometry.plate_side
    u_line = rng.random(n)

    src_idx = np.searchsorted(src_cdf, u_src, side="right")
    src_idx = np.minimum(src_idx, len(sources) - 1)

    ex = np.empty(n)
    ey = np.empty(n)
    ez = np.empty(n)
    energy = np.empty(n)
    for k, src in enumerate(sources):
        sel = src_idx == k
        if not np.any(sel):
            continue
        px, py, pz = src.position
        ex[sel] = px + (u_rect_x[sel] - 0.5) * src.width
        ez[sel] = pz + (u_rect_z[sel] - 0.5) * src.height
        ey[sel] = py
        line_e = np.array([e for e, _ in src.lines])
        line_w = np.array([w for _, w in src.lines], dtype=float)
        line_cdf = np.cumsum(line_w) / line_w.sum()
        li = np.searchsorted(line_cdf, u_line[sel], side="right")
        li = np.minimum(li, len(src.lines) - 1)
        energy[sel] = line_e[li]

    dy = -ey  # plate entrance face sits at y = 0
    if np.any(dy <= 0):
        raise ValueError("sources must sit on the sample side of the plate (y < 0)")
    dx = target_x - ex
    dz = target_z - ez
    slope_x = dx / dy
    slope_z = dz / dy
    dist_sq = dx * dx + dy * dy + dz * dz
    area = geometry.plate_side**2
    # isotropic-emission weight of an area-uniform plate sample:
    # A * cos(theta) / (4 pi d^2)
    weight = area * dy / (4.0 * math.pi * dist_sq * np.sqrt(dist_sq))
    return ex, ey, ez, target_x, target_z, slope_x, slope_z, energy, weight


def sample_emission(
    source: Source, geometry: MpoGeometry, scene: Scene, rng
) -> Photon:
    """Draw one photon from ``source`` aimed at the plate.

    The direction is importance-sampled by picking a uniform point on the
    plate face; the photon weight carries the exact isotropic-emission
    factor A*cos(theta)/(4 pi d^2) so flux estimates stay unbiased.
    """
    one = Scene(sources=(source,), L_s=scene.L_s, L_i=scene.L_i)
    ex, ey, ez, _, _, sx, sz, energy, weight = _sample_emission_arrays(
        one, geometry, 1, rng
    )
    return Photon(
        pos=(float(ex[0]), float(ey[0]), float(ez[0])),
        slope_x=float(sx[0]),
        slope_z=float(sz[0]),
        energy=float(energy[0]),
        weight=float(weight[0]),
    )


def project_to_detector(trace, entry, geometry: MpoGeometry, L_i: float):
    """Propagate a channel exit state straight to the detector plane.

    Returns the lab-frame (x, z) landing position in mm after a throw of
    ``L_i`` from the plate exit face.
    """
    if trace.outcome is not TraceOutcome.EXITED:
        raise ValueError("only exited rays reach the detector")
    cx, cz = pore_center_mm(entry, geometry)
    half_w_mm = geometry.pore_width_w * 1e-3 / 2.0
    x_exit = cx - half_w_mm + trace.exit_u * 1e-3
    z_exit = cz - half_w_mm + trace.exit_v * 1e-3
    return (
        x_exit + trace.exit_slope_x * L_i,
        z_exit + trace.exit_slope_z * L_i,
    )


def apply_energy_response(true_energy: float, detector: DetectorSpec, rng) -> float:
    """Smear a deposited energy with the detector's Gaussian response."""
    if true_energy <= 0:
        raise ValueError("true energy must be positive")
    if detector.energy_fwhm == 0:
        return true_energy
    sigma = detector.energy_fwhm / FWHM_PER_SIGMA
    return true_energy + sigma * rng.standard_normal()


_CLASS_ORDER = (
    PathClass.CENTRAL_FOCUS,
    PathClass.ARM_ALONG_X,
    PathClass.ARM_ALONG_Z,
    PathClass.DIFFUSE,
    PathClass.DIRECT,
)


def _run_batch(args):
    """Transport one seeded batch; returns sparse cube increments + tallies."""
    (scene, geometry, detector, seed, batch_index, n, want_class_images) = args
    rng = _batch_rng(seed, batch_index)
    stats = SimStats(n_photons=n)

    _, _, _, tx, tz, slope_x, slope_z, energy, _ = _sample_emission_arrays(
        scene, geometry, n, rng
    )

    half = geometry.plate_side / 2.0
    on_plate = (np.abs(tx) <= half) & (np.abs(tz) <= half)
    stats.missed_plate = int(n - np.count_nonzero(on_plate))

    # pitch-cell decomposition, pore-local coordinates in micrometres
    p_mm = geometry.pitch_p * 1e-3
    w = geometry.pore_width_w
    ci = np.floor(tx / p_mm + 0.5)
    cj = np.floor(tz / p_mm + 0.5)
    du = (tx - ci * p_mm) * 1e3
    dv = (tz - cj * p_mm) * 1e3
    in_pore = on_plate & (np.abs(du) <= w / 2.0) & (np.abs(dv) <= w / 2.0)
    stats.web_absorbed = int(np.count_nonzero(on_plate) - np.count_nonzero(in_pore))

    idx = np.nonzero(in_pore)[0]
    u = du[idx] + w / 2.0
    v = dv[idx] + w / 2.0
    sx = slope_x[idx]
    sz = slope_z[idx]
    e_true = energy[idx]

    # analytic per-plane unfolding (see optics.unfold_plane)
    t_um = geometry.thickness_t * 1e3
    exit_u, exit_sx, n_x = _unfold_vec(u, sx, w, t_um)
    exit_v, exit_sz, n_z = _unfold_vec(v, sz, w, t_um)

    # theta_c(E) = theta_c(1 keV) / E, exact 1/E scaling
    theta_c = critical_angle_deg(1.0, geometry.coating) / e_true
    angle_x = np.degrees(np.arctan(np.abs(sx)))
    angle_z = np.degrees(np.arctan(np.abs(sz)))
    survive = ((n_x == 0) | (angle_x <= theta_c)) & ((n_z == 0) | (angle_z <= theta_c))
    if geometry.reflectivity_model is ReflectivityModel.CONSTANT_PER_BOUNCE:
        n_total = n_x + n_z
        roulette = rng.random(idx.size)
        survive &= roulette < geometry.reflectivity ** n_total
    stats.wall_absorbed = int(idx.size - np.count_nonzero(survive))

    keep = np.nonzero(survive)[0]
    half_w_mm = w * 1e-3 / 2.0
    x_det = (
        ci[idx][keep] * p_mm - half_w_mm + exit_u[keep] * 1e-3
        + exit_sx[keep] * scene.L_i
    )
    z_det = (
        cj[idx][keep] * p_mm - half_w_mm + exit_v[keep] * 1e-3
        + exit_sz[keep] * scene.L_i
    )
    nx_keep = n_x[keep]
    nz_keep = n_z[keep]

    sigma = detector.energy_fwhm / FWHM_PER_SIGMA
    e_meas = e_true[keep]
    if sigma > 0:
        e_meas = e_meas + sigma * rng.standard_normal(keep.size)

    pitch_mm = detector.pitch * 1e-3
    x0 = -detector.n_x * pitch_mm / 2.0
    z0 = -detector.n_y * pitch_mm / 2.0
    ix = np.floor((x_det - x0) / pitch_mm).astype(np.int64)
    iy = np.floor((z_det - z0) / pitch_mm).astype(np.int64)
    on_det = (ix >= 0) & (ix < detector.n_x) & (iy >= 0) & (iy < detector.n_y)
    stats.off_detector = int(keep.size - np.count_nonzero(on_det))

    above = e_meas >= detector.threshold
    stats.below_threshold = int(np.count_nonzero(on_det & ~above))

    e_bin = np.floor((e_meas - detector.e_min) / detector.e_bin_width).astype(np.int64)
    in_band = (e_bin >= 0) & (e_bin < detector.n_bins)
    stats.out_of_band = int(np.count_nonzero(on_det & above & ~in_band))

    hit = on_det & above & in_band
    stats.detected = int(np.count_nonzero(hit))

    flat = ((iy[hit] * detector.n_x) + ix[hit]) * detector.n_bins + e_bin[hit]
    cube_idx, cube_cnt = np.unique(flat, return_counts=True)

    odd_x = nx_keep[hit] % 2 == 1
    odd_z = nz_keep[hit] % 2 == 1
    direct = (nx_keep[hit] == 0) & (nz_keep[hit] == 0)
    class_code = np.full(int(np.count_nonzero(hit)), 3, dtype=np.int8)  # DIFFUSE
    class_code[odd_x & odd_z] = 0  # CENTRAL_FOCUS
    class_code[~odd_x & odd_z] = 1  # ARM_ALONG_X
    class_code[odd_x & ~odd_z] = 2  # ARM_ALONG_Z
    class_code[direct] = 4  # DIRECT
    counts_by_class = np.bincount(class_code, minlength=5)
    stats.class_counts = {
        cls: int(counts_by_class[c]) for c, cls in enumerate(_CLASS_ORDER)
    }

    class_sparse = None
    if want_class_images:
        pix_flat = iy[hit] * detector.n_x + ix[hit]
        class_sparse = {}
        for c, cls in enumerate(_CLASS_ORDER):
            sel = class_code == c
            pi, pc = np.unique(pix_flat[sel], return_counts=True)
            class_sparse[cls] = (pi, pc)

    return cube_idx, cube_cnt, stats, class_sparse


def _unfold_vec(u, s, width, thickness_um):
    """Vectorized mirror of optics.unfold_plane."""
    u_unf = u + thickness_um * s
    k = np.floor(u_unf / width)
    folded = u_unf - k * width
    # endpoint exactly on a wall belongs to the lower tile (no crossing)
    on_boundary = (folded == 0.0) & (k > 0)
    k = np.where(on_boundary, k - 1, k)
    folded = np.where(on_boundary, width, folded)
    n = np.abs(k).astype(np.int64)
    odd = (k.astype(np.int64) % 2) != 0
    exit_u = np.where(odd, width - folded, folded)
    exit_s = np.where(n % 2 == 1, -s, s)
    return exit_u, exit_s, n


def simulate(
    scene: Scene,
    mpo: MpoGeometry,
    detector: DetectorSpec,
    n_photons: int,
    seed: int = 0,
    n_workers: int = 1,
    class_images: bool = False,
) -> SpectralImage:
    """Run the full transport chain for ``n_photons`` photons.

    Deterministic for fixed (scene, mpo, detector, n_photons, seed): the
    photon stream is partitioned into BATCH_SIZE batches, each seeded by
    :func:`batch_seed`, and batch histograms merge by integer addition, so
    results are bit-identical for any ``n_workers``.

    With ``class_images=True`` the returned stats carry one 2-D hit image
    per :class:`~mpoxrf.optics.PathClass` (summed over energy bins).
    """
    if n_photons < 0:
        raise ValueError("n_photons must be >= 0")
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")

    cube = np.zeros(detector.n_y * detector.n_x * detector.n_bins, dtype=np.uint64)
    total = SimStats()
    if class_images:
        total.class_images = {
            cls: np.zeros((detector.n_y, detector.n_x), dtype=np.uint64)
            for cls in _CLASS_ORDER
        }

    n_batches = (n_photons + BATCH_SIZE - 1) // BATCH_SIZE
    tasks = [
        (
            scene,
            mpo,
            detector,
            seed,
            b,
            min(BATCH_SIZE, n_photons - b * BATCH_SIZE),
            class_images,
        )
        for b in range(n_batches)
    ]

    def _merge(result):
        cube_idx, cube_cnt, stats, class_sparse = result
        cube[cube_idx] += cube_cnt.astype(np.uint64)
        total.add(stats)
        if class_sparse is not None:
            for cls, (pi, pc) in class_sparse.items():
                flat = total.class_images[cls].reshape(-1)
                flat[pi] += pc.astype(np.uint64)

    if n_workers == 1 or n_batches <= 1:
        for task in tasks:
            _merge(_run_batch(task))
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for result in pool.map(_run_batch, tasks):
                _merge(result)

    return SpectralImage(
        counts=cube.reshape(detector.n_y, detector.n_x, detector.n_bins),
        e_min=detector.e_min,
        e_bin_width=detector.e_bin_width,
        pixel_pitch_um=detector.pitch,
        seed=seed,
        photons=n_photons,
        scene_digest=scene_digest(scene, mpo, detector),
        stats=total,
    )
