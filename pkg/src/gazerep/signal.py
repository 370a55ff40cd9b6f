"""Gaze trials and the deterministic preprocessing that turns them into windows.

Canonical form is 500 Hz, top-left origin, about 35 px per degree of visual
angle, clipped to a 1280x1024 screen. The pipeline order is

    zero_blinks -> resample(500) -> normalize_coords -> scale_to_dva

and applying it to its own output is a no-op.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.interpolate import CubicSpline

CANONICAL_HZ = 500
PX_PER_DVA = 35.0
SCREEN_W, SCREEN_H = 1280, 1024
WINDOW_SAMPLES = 1000
STRIDE_SAMPLES = 200
ORIGINS = ("top_left", "bottom_left", "center", "center_y_up")

MANIFEST_SUFFIX = ".manifest"
TRIAL_HEADER = "t_ms,x_px,y_px"


@dataclass(frozen=True)
class TrialMeta:
    subject_id: str
    stimulus_id: str
    dataset_id: str
    trial_id: str = ""
    px_per_dva: float | None = None
    screen_wh: tuple[int, int] | None = None
    origin: str = "top_left"

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise ValueError(f"origin must be one of {ORIGINS}, got {self.origin!r}")


@dataclass(frozen=True)
class GazeTrial:
    timestamps_ms: np.ndarray
    xy_px: np.ndarray  # (N, 2)
    rate_hz: float
    meta: TrialMeta

    def __post_init__(self):
        t = np.asarray(self.timestamps_ms, dtype=np.float64)
        xy = np.asarray(self.xy_px, dtype=np.float64).reshape(-1, 2)
        if len(t) != len(xy):
            raise ValueError(f"timestamps ({len(t)}) and coordinates ({len(xy)}) differ in length")
        if len(t) < 2:
            raise ValueError("a trial needs at least 2 samples")
        if np.any(np.diff(t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if self.rate_hz <= 0:
            raise ValueError(f"rate_hz must be positive, got {self.rate_hz}")
        object.__setattr__(self, "timestamps_ms", t)
        object.__setattr__(self, "xy_px", xy)

    def __len__(self) -> int:
        return len(self.timestamps_ms)

    @property
    def duration_s(self) -> float:
        return len(self) / self.rate_hz

    def replace(self, **changes) -> "GazeTrial":
        return dataclasses.replace(self, **changes)

    def with_meta(self, **changes) -> "GazeTrial":
        return dataclasses.replace(self, meta=dataclasses.replace(self.meta, **changes))

    def position(self) -> np.ndarray:
        """(2, N) position signal."""
        return self.xy_px.T.copy()

    def velocity(self) -> np.ndarray:
        """(2, N) velocity signal in px/ms."""
        return derive_velocity(self.position(), self.rate_hz)


@dataclass(frozen=True)
class SignalWindow:
    channels: np.ndarray  # (2, T)
    modality: str
    origin: tuple[str, int]  # (trial id, start index)
    n_real: int = 0  # samples before any zero padding


# transforms


def zero_blinks(trial: GazeTrial) -> GazeTrial:
    """Set both coordinates to 0 wherever either one is negative."""
    xy = trial.xy_px.copy()
    xy[(xy < 0).any(axis=1)] = 0.0
    return trial.replace(xy_px=xy)


def resample(trial: GazeTrial, target_hz: float) -> GazeTrial:
    """Decimate by an integer factor, or cubic-spline onto a uniform grid."""
    if target_hz <= 0:
        raise ValueError(f"target_hz must be positive, got {target_hz}")
    src = float(trial.rate_hz)
    if math.isclose(src, target_hz):
        return trial
    if target_hz < src:
        factor = src / target_hz
        k = round(factor)
        if not math.isclose(factor, k, rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"cannot downsample {src:g} Hz to {target_hz:g} Hz by a non-integer factor")
        return GazeTrial(trial.timestamps_ms[::k], trial.xy_px[::k], target_hz, trial.meta)
    if len(trial) < 4:
        raise ValueError("cubic upsampling needs at least 4 samples")
    t = trial.timestamps_ms
    step = 1000.0 / target_hz
    n = int(math.floor((t[-1] - t[0]) / step + 1e-9)) + 1
    grid = t[0] + np.arange(n) * step
    xy = CubicSpline(t, trial.xy_px, axis=0)(grid)
    return GazeTrial(grid, xy, target_hz, trial.meta)


def _to_top_left(xy: np.ndarray, origin: str, w: float, h: float) -> np.ndarray:
    x, y = xy[:, 0], xy[:, 1]
    if origin == "bottom_left":
        return np.column_stack([x, h - y])
    if origin == "center":
        return np.column_stack([x + w / 2, y + h / 2])
    if origin == "center_y_up":
        return np.column_stack([x + w / 2, h / 2 - y])
    return xy.copy()


def clip_to_screen(xy: np.ndarray) -> np.ndarray:
    return np.column_stack([np.clip(xy[:, 0], 0, SCREEN_W), np.clip(xy[:, 1], 0, SCREEN_H)])


def normalize_coords(trial: GazeTrial) -> GazeTrial:
    """Move the origin to the top-left corner (y down) and clip to 1280x1024."""
    origin = trial.meta.origin
    if origin != "top_left" and trial.meta.screen_wh is None:
        raise ValueError(f"trial {trial.meta.trial_id!r}: origin {origin!r} needs screen geometry to convert")
    xy = trial.xy_px
    if origin != "top_left":
        xy = _to_top_left(xy, origin, *trial.meta.screen_wh)
    return trial.replace(xy_px=clip_to_screen(xy)).with_meta(origin="top_left")


def scale_to_dva(trial: GazeTrial) -> GazeTrial:
    """Rescale about the top-left origin so one degree spans 35 px.

    Trials without a known pixels-per-degree pass through unchanged.
    """
    ppd = trial.meta.px_per_dva
    if ppd is None:
        return trial
    if ppd <= 0:
        raise ValueError(f"px_per_dva must be positive, got {ppd}")
    return trial.replace(xy_px=trial.xy_px * (PX_PER_DVA / ppd)).with_meta(px_per_dva=PX_PER_DVA)


def dva_scale_factor(px_per_dva: float | None) -> float:
    return 1.0 if px_per_dva is None else PX_PER_DVA / px_per_dva


def preprocess(trial: GazeTrial) -> GazeTrial:
    """Full canonicalization; the trailing clip keeps scaled positions on screen."""
    out = scale_to_dva(normalize_coords(resample(zero_blinks(trial), CANONICAL_HZ)))
    return out.replace(xy_px=clip_to_screen(out.xy_px))


def derive_velocity(position: np.ndarray, rate_hz: float) -> np.ndarray:
    """(2, T) positions -> (2, T) velocity in px/ms; the first sample is 0."""
    position = np.asarray(position, dtype=np.float64)
    if position.ndim != 2 or position.shape[1] < 2:
        raise ValueError(f"need a (channels, T>=2) array, got {position.shape}")
    if rate_hz <= 0:
        raise ValueError(f"rate_hz must be positive, got {rate_hz}")
    dt_ms = 1000.0 / rate_hz
    vel = np.zeros_like(position)
    vel[:, 1:] = np.diff(position, axis=1) / dt_ms
    return vel


def integrate_velocity(velocity: np.ndarray, rate_hz: float, start: np.ndarray) -> np.ndarray:
    """Inverse of ``derive_velocity`` given the first position."""
    dt_ms = 1000.0 / rate_hz
    return np.asarray(start, dtype=np.float64)[:, None] + np.cumsum(velocity * dt_ms, axis=1)


def modality_signal(trial: GazeTrial, modality: str) -> np.ndarray:
    if modality == "position":
        return trial.position()
    if modality == "velocity":
        return trial.velocity()
    raise ValueError(f"modality must be 'position' or 'velocity', got {modality!r}")


def window_starts(n: int, window: int = WINDOW_SAMPLES, stride: int = STRIDE_SAMPLES) -> list[int]:
    if n <= 0:
        raise ValueError("cannot window an empty trial")
    if n < window:
        return [0]
    return list(range(0, n - window + 1, stride))


def window_slices(trial: GazeTrial, win_s: float = 2.0, stride_s: float = 0.4,
                  modality: str = "position") -> list[SignalWindow]:
    """Fixed-length windows from a 500 Hz trial; short trials are zero-padded on the right."""
    if not math.isclose(trial.rate_hz, CANONICAL_HZ):
        raise ValueError(f"windowing expects a {CANONICAL_HZ} Hz trial, got {trial.rate_hz:g} Hz")
    window = int(round(win_s * trial.rate_hz))
    stride = int(round(stride_s * trial.rate_hz))
    signal = modality_signal(trial, modality)
    n = signal.shape[1]
    out = []
    for start in window_starts(n, window, stride):
        chunk = signal[:, start:start + window]
        real = chunk.shape[1]
        if real < window:
            chunk = np.pad(chunk, ((0, 0), (0, window - real)))
        out.append(SignalWindow(chunk, modality, (trial.meta.trial_id, start), real))
    return out


def windows_array(trials: Iterable[GazeTrial], modality: str) -> np.ndarray:
    """Stack every window of every trial into a float32 (N, 2, 1000) array."""
    chunks = [w.channels for t in trials for w in window_slices(t, modality=modality)]
    if not chunks:
        raise ValueError("no windows: empty trial list")
    return np.stack(chunks).astype(np.float32)


# file format


def _format_value(v) -> str:
    return "" if v is None else str(v)


def write_trial(trial: GazeTrial, directory: str | Path) -> Path:
    """Write ``<trial_id>.csv`` plus its key:value sidecar manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not trial.meta.trial_id:
        raise ValueError("trial_id is required to write a trial")
    path = directory / f"{trial.meta.trial_id}.csv"
    data = np.column_stack([trial.timestamps_ms, trial.xy_px])
    np.savetxt(path, data, delimiter=",", header=TRIAL_HEADER, comments="", fmt="%.17g", encoding="utf-8")
    m = trial.meta
    w, h = m.screen_wh if m.screen_wh else (None, None)
    fields = {
        "rate_hz": f"{trial.rate_hz:g}",
        "subject_id": m.subject_id,
        "stimulus_id": m.stimulus_id,
        "dataset_id": m.dataset_id,
        "px_per_dva": _format_value(m.px_per_dva),
        "screen_w": _format_value(w),
        "screen_h": _format_value(h),
        "origin": m.origin,
    }
    path.with_suffix(MANIFEST_SUFFIX).write_text(
        "".join(f"{k}: {v}\n" for k, v in fields.items()), encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key: value', got {line!r}")
        key, value = line.split(":", 1)
        out[key.strip()] = value.strip()
    return out


def read_trial(path: str | Path) -> GazeTrial:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip()
    if header != TRIAL_HEADER:
        raise ValueError(f"{path}: expected header {TRIAL_HEADER!r}, got {header!r}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, encoding="utf-8")
    if data.shape[1] != 3:
        raise ValueError(f"{path}: expected 3 columns, got {data.shape[1]}")
    if np.any(np.diff(data[:, 0]) <= 0):
        raise ValueError(f"{path}: timestamps are not strictly increasing")
    man = read_manifest(path.with_suffix(MANIFEST_SUFFIX))
    missing = {"rate_hz", "subject_id", "stimulus_id", "dataset_id"} - man.keys()
    if missing:
        raise ValueError(f"{path}: manifest lacks {sorted(missing)}")
    w, h = man.get("screen_w", ""), man.get("screen_h", "")
    meta = TrialMeta(
        subject_id=man["subject_id"],
        stimulus_id=man["stimulus_id"],
        dataset_id=man["dataset_id"],
        trial_id=path.stem,
        px_per_dva=float(man["px_per_dva"]) if man.get("px_per_dva") else None,
        screen_wh=(int(float(w)), int(float(h))) if w and h else None,
        origin=man.get("origin") or "top_left",
    )
    return GazeTrial(data[:, 0], data[:, 1:3], float(man["rate_hz"]), meta)


def read_trials(directory: str | Path) -> list[GazeTrial]:
    paths = sorted(Path(directory).glob("*.csv"))
    if not paths:
        raise FileNotFoundError(f"no trial files in {directory}")
    return [read_trial(p) for p in paths]
