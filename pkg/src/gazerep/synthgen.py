"""Labeled synthetic gaze trials for desk-scale training and evaluation.

A trial alternates fixations and saccades. Fixations hold a target with
Gaussian jitter, linear drift and occasional microsaccades; saccades follow a
raised-cosine velocity profile whose peak equals the subject's
``saccade_peak_vel`` exactly. Output is already canonical (500 Hz is typical,
top-left origin, 35 px/dva, inside 1280x1024).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .signal import PX_PER_DVA, SCREEN_H, SCREEN_W, GazeTrial, TrialMeta

FIXATION_MS = (100.0, 400.0)
SACCADE_MS = (20.0, 80.0)
MICROSACCADE_PX = (5.0, 30.0)
MICRO_PEAK_FRACTION = 0.4  # microsaccade peak velocity relative to saccades
MARGIN_PX = 40.0
BLINK_MS = (80.0, 150.0)

PEAK_VEL_RANGE = (4.0, 12.0)
JITTER_SD_RANGE = (0.2, 0.3)
MICROSACCADE_RATE_RANGE = (0.5, 2.5)
DRIFT_RANGE = (1.0, 5.0)


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: str
    saccade_peak_vel: float  # px/ms
    fixation_jitter_sd: float  # px
    microsaccade_rate: float  # events/s
    drift_coeff: float  # px/sqrt(s)

    def __post_init__(self):
        for name in ("saccade_peak_vel", "fixation_jitter_sd", "microsaccade_rate", "drift_coeff"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.saccade_peak_vel <= 0:
            raise ValueError("saccade_peak_vel must be positive")


@dataclass(frozen=True)
class StimulusClass:
    class_id: str
    n_targets: int
    dispersion: float  # px
    revisit_prob: float
    center: tuple[float, float] = (SCREEN_W / 2, SCREEN_H / 2)
    layout_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.revisit_prob <= 1.0:
            raise ValueError("revisit_prob must lie in [0, 1]")
        if self.n_targets < 1:
            raise ValueError("n_targets must be at least 1")
        if self.dispersion > math.hypot(SCREEN_W, SCREEN_H):
            raise ValueError("dispersion exceeds the screen diagonal")

    def targets(self) -> np.ndarray:
        """Fixed (n_targets, 2) target layout of this class."""
        rng = np.random.default_rng([self.layout_seed, 7919])
        pts = np.asarray(self.center) + rng.normal(0.0, self.dispersion, size=(self.n_targets, 2))
        if self.n_targets == 1 and self.dispersion == 0:
            pts = np.asarray([self.center], dtype=float)
        lo = np.array([MARGIN_PX, MARGIN_PX])
        hi = np.array([SCREEN_W - MARGIN_PX, SCREEN_H - MARGIN_PX])
        return np.clip(pts, lo, hi)


def make_subject_profiles(n: int, seed: int) -> list[SubjectProfile]:
    """Profiles whose peak velocities evenly span 4..12 px/ms in shuffled order.

    Spacing is 8 / (n - 1) px/ms; the largest jitter-induced velocity noise at
    500 Hz is sqrt(2) * 0.3 px / 2 ms ~ 0.21 px/ms, so neighbouring subjects
    stay at least 3 noise SDs apart up to n = 13.
    """
    if n < 1:
        raise ValueError("need at least one subject")
    rng = np.random.default_rng([seed, 1])
    spacing = 0.0 if n == 1 else (PEAK_VEL_RANGE[1] - PEAK_VEL_RANGE[0]) / (n - 1)
    peaks = PEAK_VEL_RANGE[0] + spacing * rng.permutation(n)
    out = []
    for i in range(n):
        out.append(SubjectProfile(
            subject_id=f"s{i:02d}",
            saccade_peak_vel=float(peaks[i]),
            fixation_jitter_sd=float(rng.uniform(*JITTER_SD_RANGE)),
            microsaccade_rate=float(rng.uniform(*MICROSACCADE_RATE_RANGE)),
            drift_coeff=float(rng.uniform(*DRIFT_RANGE)),
        ))
    return out


def make_stimulus_classes(k: int, seed: int) -> list[StimulusClass]:
    if k < 1:
        raise ValueError("need at least one stimulus class")
    rng = np.random.default_rng([seed, 2])
    out = []
    for i in range(k):
        out.append(StimulusClass(
            class_id=f"c{i:02d}",
            n_targets=int(rng.integers(3, 9)),
            dispersion=float(rng.uniform(80.0, 300.0)),
            revisit_prob=float(rng.uniform(0.1, 0.6)),
            center=(float(rng.uniform(400, SCREEN_W - 400)), float(rng.uniform(300, SCREEN_H - 300))),
            layout_seed=int(rng.integers(2**31)),
        ))
    return out


def _raised_cosine_path(n: int) -> np.ndarray:
    """Fraction of the amplitude covered after each of n equal steps."""
    u = np.arange(1, n + 1) / n
    return u - np.sin(2 * np.pi * u) / (2 * np.pi)


def _inside(p: np.ndarray) -> bool:
    return MARGIN_PX / 2 <= p[0] <= SCREEN_W - MARGIN_PX / 2 and MARGIN_PX / 2 <= p[1] <= SCREEN_H - MARGIN_PX / 2


def generate_trial(profile: SubjectProfile, stim: StimulusClass, duration_s: float = 4.0, rate_hz: int = 500,
                   seed: int = 0, blinks: bool = False, trial_id: str = "") -> GazeTrial:
    if duration_s < 1:
        raise ValueError("duration_s must be at least 1")
    if rate_hz not in (250, 500, 1000):
        raise ValueError(f"rate_hz must be 250, 500 or 1000, got {rate_hz}")
    rng = np.random.default_rng(seed)
    dt = 1000.0 / rate_hz
    n_total = int(round(duration_s * rate_hz))
    targets = stim.targets()
    visited = [int(rng.integers(len(targets)))]
    pos = targets[visited[0]].astype(float).copy()
    chunks: list[np.ndarray] = []
    n = 0
    peak = profile.saccade_peak_vel
    while n < n_total:
        # fixation
        n_fix = max(1, int(round(rng.uniform(*FIXATION_MS) / dt)))
        fix_s = n_fix * dt / 1000.0
        theta = rng.uniform(0, 2 * np.pi)
        drift_speed = profile.drift_coeff / math.sqrt(fix_s) / 1000.0  # px/ms
        drift = np.outer(np.arange(n_fix) * dt * drift_speed, [math.cos(theta), math.sin(theta)])
        offset = np.zeros((n_fix, 2))
        n_micro = rng.poisson(profile.microsaccade_rate * fix_s)
        for _ in range(n_micro):
            amp = rng.uniform(*MICROSACCADE_PX)
            steps = max(2, int(math.ceil(2 * amp / (MICRO_PEAK_FRACTION * peak) / dt)))
            start = int(rng.integers(n_fix))
            phi = rng.uniform(0, 2 * np.pi)
            d = amp * np.array([math.cos(phi), math.sin(phi)])
            prof = _raised_cosine_path(steps)
            stop = min(n_fix, start + steps)
            offset[start:stop] += prof[: stop - start, None] * d
            offset[stop:] += d
        jitter = rng.normal(0.0, profile.fixation_jitter_sd, size=(n_fix, 2)) if profile.fixation_jitter_sd else 0.0
        fix = pos + drift + offset + jitter
        chunks.append(fix)
        n += n_fix
        pos = pos + drift[-1] + offset[-1]
        if n >= n_total:
            break
        # saccade of n_sac steps; amplitude set so the peak velocity is exact
        # odd step count puts the middle step on the velocity peak
        n_sac = max(3, int(round(rng.uniform(*SACCADE_MS) / dt))) | 1
        amp = peak * n_sac * dt / 2.0
        direction = None
        moved = False
        for _ in range(20):
            if rng.random() < stim.revisit_prob and len(visited) > 1:
                idx = visited[int(rng.integers(len(visited)))]
            else:
                idx = int(rng.integers(len(targets)))
            vec = targets[idx] - pos
            norm = float(np.hypot(*vec))
            if norm < 1e-9:
                continue
            moved = True
            cand = vec / norm
            if _inside(pos + amp * cand):
                direction = cand
                visited.append(idx)
                break
        if not moved:
            continue  # already on the only reachable target: refixate
        if direction is None:
            vec = np.array([SCREEN_W / 2, SCREEN_H / 2]) - pos
            norm = float(np.hypot(*vec))
            direction = vec / norm if norm > 1e-9 else np.array([1.0, 0.0])
        sac = pos + np.outer(_raised_cosine_path(n_sac), amp * direction)
        chunks.append(sac)
        n += n_sac
        pos = sac[-1].copy()
    xy = np.concatenate(chunks)[:n_total]
    xy[:, 0] = np.clip(xy[:, 0], 0, SCREEN_W)
    xy[:, 1] = np.clip(xy[:, 1], 0, SCREEN_H)
    if blinks:
        _inject_blinks(xy, rng, dt)
    meta = TrialMeta(subject_id=profile.subject_id, stimulus_id=stim.class_id, dataset_id="synth",
                     trial_id=trial_id, px_per_dva=PX_PER_DVA, screen_wh=(SCREEN_W, SCREEN_H))
    return GazeTrial(np.arange(n_total) * dt, xy, float(rate_hz), meta)


def _inject_blinks(xy: np.ndarray, rng: np.random.Generator, dt: float, rate_per_s: float = 0.3) -> None:
    n = len(xy)
    count = rng.poisson(rate_per_s * n * dt / 1000.0)
    for _ in range(count):
        length = int(round(rng.uniform(*BLINK_MS) / dt))
        start = int(rng.integers(max(1, n - length)))
        xy[start:start + length] = -1.0


def generate_dataset(n_subjects: int, n_stimuli_classes: int, trials_per_cell: int, seed: int,
                     duration_s: float = 4.0, rate_hz: int = 500, blinks: bool = False) -> list[GazeTrial]:
    """subjects x classes x repetitions, each trial labeled in its metadata."""
    if min(n_subjects, n_stimuli_classes, trials_per_cell) < 1:
        raise ValueError("all counts must be at least 1")
    profiles = make_subject_profiles(n_subjects, seed)
    classes = make_stimulus_classes(n_stimuli_classes, seed)
    seeds = np.random.SeedSequence([seed, 3]).generate_state(n_subjects * n_stimuli_classes * trials_per_cell)
    trials = []
    i = 0
    for prof in profiles:
        for stim in classes:
            for r in range(trials_per_cell):
                tid = f"{prof.subject_id}_{stim.class_id}_r{r:02d}"
                trials.append(generate_trial(prof, stim, duration_s, rate_hz, int(seeds[i]), blinks, tid))
                i += 1
    return trials
