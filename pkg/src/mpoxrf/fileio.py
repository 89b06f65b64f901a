"""Text export/import: PGM previews, image CSV, profile CSV, ATF CSV."""

from __future__ import annotations

import numpy as np

from .analysis import Atf, Image2D, PsfProfile


class FileFormatError(ValueError):
    """A text export could not be read back."""


def write_pgm(path, image: Image2D, lo_percentile=1.0, hi_percentile=99.0) -> None:
    """ASCII PGM (P2) preview scaled to 16-bit over the given percentile
    window.  Lossy by design; use the CSV export for exact values."""
    vals = image.values
    lo = np.percentile(vals, lo_percentile)
    hi = np.percentile(vals, hi_percentile)
    if hi <= lo:
        hi = lo + 1.0
    scaled = np.clip((vals - lo) / (hi - lo), 0.0, 1.0)
    pixels = np.round(scaled * 65535).astype(int)
    with open(path, "w") as fh:
        fh.write("P2\n")
        fh.write(f"# pitch_um={image.pitch_um!r}\n")
        fh.write(f"{image.n_x} {image.n_y}\n65535\n")
        for row in pixels:
            fh.write(" ".join(str(v) for v in row))
            fh.write("\n")


def write_image_csv(path, image: Image2D) -> None:
    """Exact pixel values, one row per line, with a pitch header comment."""
    with open(path, "w") as fh:
        fh.write(f"# n_x={image.n_x} n_y={image.n_y} pitch_um={image.pitch_um!r}\n")
        for row in image.values:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def read_image_csv(path) -> Image2D:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise FileFormatError(f"{path}: missing image CSV header line")
        fields = dict(
            item.split("=", 1) for item in header[1:].split() if "=" in item
        )
        if "pitch_um" not in fields:
            raise FileFormatError(f"{path}: image CSV header lacks pitch_um")
        pitch = float(fields["pitch_um"])
        values = np.loadtxt(fh, delimiter=",", ndmin=2)
    return Image2D(values=values, pitch_um=pitch)


def write_profile_csv(path, profile: PsfProfile) -> None:
    with open(path, "w") as fh:
        fh.write("position_mm,intensity\n")
        for pos, val in zip(profile.positions, profile.intensities):
            fh.write(f"{float(pos)!r},{float(val)!r}\n")


def write_atf_csv(path, transfer: Atf) -> None:
    """ATF grid with the x-frequency axis as the header row and the
    y frequency as the first column, lp/mm."""
    with open(path, "w") as fh:
        fh.write("freq_y_lp_mm\\freq_x_lp_mm")
        for fx in transfer.freq_x:
            fh.write(f",{float(fx)!r}")
        fh.write("\n")
        for j, fy in enumerate(transfer.freq_y):
            fh.write(f"{float(fy)!r}")
            for value in transfer.amplitude[j]:
                fh.write(f",{float(value)!r}")
            fh.write("\n")
