"""Volume preprocessing chain: window -> crop -> resize -> depth uniformize.

Every accepted volume leaves this module with shape
``[target_depth, target_h, target_w]`` and values in [0, 1]. Depth
uniformization is last so the standardized depth (40 by default) is
unconditionally final. Interpolation arithmetic runs in float64 internally
and is cast back to the run precision on output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError, VolumeFormatError
from .tensor import Tensor, active_dtype
from .volio import Volume

# Bottom regions of above-threshold rows thinner than this fraction of the
# image height, separated from the body by a gap, are treated as the
# patient table and dropped from the crop box.
TABLE_ROW_FRACTION = 0.10

DEFAULT_HU_WINDOW = (-1000.0, 400.0)


@dataclass(frozen=True)
class CropPolicy:
    body_threshold: float = 0.15
    margin_fraction: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.body_threshold < 1.0:
            raise ConfigError(f"body_threshold must lie in (0, 1), got {self.body_threshold}")
        if not 0.0 <= self.margin_fraction <= 0.25:
            raise ConfigError(f"margin_fraction must lie in [0, 0.25], got {self.margin_fraction}")


@dataclass(frozen=True)
class PreprocessConfig:
    hu_window: tuple[float, float] = DEFAULT_HU_WINDOW
    target_hw: tuple[int, int] = (64, 64)
    target_depth: int = 40
    crop: CropPolicy = CropPolicy()

    def __post_init__(self):
        low, high = self.hu_window
        if not low < high:
            raise ConfigError(f"hu_window must satisfy low < high, got ({low}, {high})")
        if self.target_depth < 2:
            raise ConfigError(f"target_depth must be >= 2, got {self.target_depth}")
        if any(int(e) < 2 for e in self.target_hw):
            raise ConfigError(f"target_hw extents must be >= 2, got {self.target_hw}")

    @staticmethod
    def from_json(doc: dict) -> "PreprocessConfig":
        crop_doc = doc.get("crop", {})
        return PreprocessConfig(
            hu_window=tuple(doc.get("hu_window", DEFAULT_HU_WINDOW)),  # type: ignore[arg-type]
            target_hw=tuple(doc.get("target_hw", (64, 64))),  # type: ignore[arg-type]
            target_depth=int(doc.get("target_depth", 40)),
            crop=CropPolicy(
                body_threshold=float(crop_doc.get("body_threshold", 0.15)),
                margin_fraction=float(crop_doc.get("margin_fraction", 0.05)),
            ),
        )

    def to_json(self) -> dict:
        return {
            "hu_window": list(self.hu_window),
            "target_hw": list(self.target_hw),
            "target_depth": self.target_depth,
            "crop": {
                "body_threshold": self.crop.body_threshold,
                "margin_fraction": self.crop.margin_fraction,
            },
        }


def window_normalize(volume: Volume, window: tuple[float, float]) -> Volume:
    """Map intensities through clamp((x - low) / (high - low), 0, 1)."""
    low, high = float(window[0]), float(window[1])
    if low >= high:
        raise ConfigError(f"degenerate intensity window ({low}, {high})")
    arr = volume.voxels.array.astype(np.float64)
    out = np.clip((arr - low) / (high - low), 0.0, 1.0)
    return Volume(
        voxels=Tensor(out.astype(active_dtype())),
        intensity_unit="normalized",
        spacing_mm=volume.spacing_mm,
    )


def _trim_table_rows(row_any: np.ndarray, image_height: int) -> int:
    """Return the last kept row index (relative to row_any) after dropping
    bottom-most thin content runs that are separated from the body by a gap.

    Iterates so a second application on the cropped result is a no-op.
    """
    limit = TABLE_ROW_FRACTION * image_height
    idx = np.flatnonzero(row_any)
    while idx.size > 0:
        bottom = idx[-1]
        start = bottom
        while start > 0 and row_any[start - 1]:
            start -= 1
        separated = bool(row_any[:start].any()) if start > 0 else False
        run_height = bottom - start + 1
        if separated and run_height < limit:
            idx = idx[idx < start]
        else:
            return int(bottom)
    raise ValidationError("no body rows remain after table mitigation")


def crop_body(volume: Volume, policy: CropPolicy, record_id: str | None = None) -> Volume:
    """Crop every slice to the body bounding box of the middle slice.

    The box covers all pixels >= body_threshold; thin gap-separated bottom
    bands (patient table) are dropped before the box is expanded by
    margin_fraction of each extent, so margin 0 is idempotent.
    """
    if volume.intensity_unit != "normalized":
        raise ValidationError("crop_body requires a window-normalized volume")
    arr = volume.voxels.array
    depth, height, width = arr.shape
    mid = arr[depth // 2]
    mask = mid >= policy.body_threshold
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        who = f" (record {record_id})" if record_id else ""
        raise ValidationError(f"no pixel reaches body threshold {policy.body_threshold}{who}")
    r0 = int(rows[0])
    r1 = r0 + _trim_table_rows(mask[r0 : int(rows[-1]) + 1].any(axis=1), height)
    cols = np.flatnonzero(mask[r0 : r1 + 1].any(axis=0))
    c0, c1 = int(cols[0]), int(cols[-1])
    mr = int(policy.margin_fraction * (r1 - r0 + 1))
    mc = int(policy.margin_fraction * (c1 - c0 + 1))
    r0, r1 = max(0, r0 - mr), min(height - 1, r1 + mr)
    c0, c1 = max(0, c0 - mc), min(width - 1, c1 + mc)
    return Volume(
        voxels=Tensor(arr[:, r0 : r1 + 1, c0 : c1 + 1]),
        intensity_unit=volume.intensity_unit,
        spacing_mm=volume.spacing_mm,
    )


def _axis_coords(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corner-aligned sample positions: lower index, upper index, upper weight."""
    if src == 1:
        zeros = np.zeros(dst, dtype=np.int64)
        return zeros, zeros, np.zeros(dst, dtype=np.float64)
    pos = np.arange(dst, dtype=np.float64) * (src - 1) / (dst - 1)
    lo = np.minimum(pos.astype(np.int64), src - 2)
    return lo, lo + 1, pos - lo


def resize_inplane(volume: Volume, target_hw: tuple[int, int]) -> Volume:
    """Per-slice bilinear resize with corner-aligned sampling."""
    th, tw = int(target_hw[0]), int(target_hw[1])
    if th < 2 or tw < 2:
        raise ConfigError(f"resize target extents must be >= 2, got ({th}, {tw})")
    arr = volume.voxels.array.astype(np.float64)
    _, height, width = arr.shape
    y0, y1, wy = _axis_coords(height, th)
    x0, x1, wx = _axis_coords(width, tw)
    rows = arr[:, y0, :] * (1.0 - wy)[None, :, None] + arr[:, y1, :] * wy[None, :, None]
    out = rows[:, :, x0] * (1.0 - wx)[None, None, :] + rows[:, :, x1] * wx[None, None, :]
    return Volume(
        voxels=Tensor(out.astype(active_dtype())),
        intensity_unit=volume.intensity_unit,
        spacing_mm=None,
    )


def _natural_cubic_second_derivatives(y: np.ndarray) -> np.ndarray:
    """Second derivatives M of the natural cubic spline through y.

    y has shape [depth, n_columns] with unit knot spacing; M matches it.
    Natural boundary conditions: M[0] = M[-1] = 0.
    """
    depth, n = y.shape
    m = np.zeros((depth, n), dtype=np.float64)
    interior = depth - 2
    if interior < 1:
        return m
    rhs = 6.0 * (y[2:] - 2.0 * y[1:-1] + y[:-2])
    # Thomas algorithm; the tridiagonal (1, 4, 1) system is shared by all
    # columns, so the elimination coefficients are scalars.
    cp = np.empty(interior)
    cp[0] = 1.0 / 4.0
    for i in range(1, interior):
        cp[i] = 1.0 / (4.0 - cp[i - 1])
    dp = np.empty((interior, n))
    dp[0] = rhs[0] / 4.0
    for i in range(1, interior):
        dp[i] = (rhs[i] - dp[i - 1]) * cp[i]
    m[interior] = dp[interior - 1]
    for i in range(interior - 2, -1, -1):
        m[i + 1] = dp[i] - cp[i] * m[i + 2]
    return m


def uniformize_depth(volume: Volume, target_depth: int) -> Volume:
    """Resample each (y, x) column to target_depth samples along depth.

    Fits a natural cubic spline through the source samples at positions
    0..D-1 and evaluates it at i * (D-1) / (T-1) for i in 0..T-1. Knots are
    reproduced exactly; constants and linear ramps pass through unchanged.
    """
    target_depth = int(target_depth)
    if target_depth < 2:
        raise ConfigError(f"target depth must be >= 2, got {target_depth}")
    arr = volume.voxels.array
    depth, height, width = arr.shape
    if depth < 2:
        raise ValidationError(f"source depth {depth} is insufficient for depth uniformization")
    y = arr.reshape(depth, height * width).astype(np.float64)
    m = _natural_cubic_second_derivatives(y)
    t = np.arange(target_depth, dtype=np.float64) * (depth - 1) / (target_depth - 1)
    seg = np.minimum(t.astype(np.int64), depth - 2)
    s = (t - seg)[:, None]
    y0, y1 = y[seg], y[seg + 1]
    m0, m1 = m[seg], m[seg + 1]
    u = 1.0 - s
    out = y0 * u + y1 * s + (m0 / 6.0) * (u**3 - u) + (m1 / 6.0) * (s**3 - s)
    return Volume(
        voxels=Tensor(out.reshape(target_depth, height, width).astype(active_dtype())),
        intensity_unit=volume.intensity_unit,
        spacing_mm=None,
    )


def preprocess_volume(
    volume: Volume, cfg: PreprocessConfig, record_id: str | None = None
) -> Volume:
    """Full chain; output shape is exactly [target_depth, target_h, target_w]
    with values clamped to [0, 1] (cubic overshoot removed).

    Volumes already in normalized units skip the windowing stage; the HU
    window is only meaningful for HU inputs.
    """
    try:
        if volume.intensity_unit == "HU":
            v = window_normalize(volume, cfg.hu_window)
        else:
            v = volume
        v = crop_body(v, cfg.crop, record_id=record_id)
        v = resize_inplane(v, cfg.target_hw)
        v = uniformize_depth(v, cfg.target_depth)
    except ValidationError as exc:
        if record_id and record_id not in str(exc):
            raise type(exc)(f"record {record_id}: {exc}") from exc
        raise
    clipped = np.clip(v.voxels.array, 0.0, 1.0).astype(active_dtype())
    return Volume(voxels=Tensor(clipped), intensity_unit="normalized", spacing_mm=None)
