"""Linear duration predictors for prefill and decode batches.

Prefill duration is linear in the number of *uncached* input tokens (cached
prefixes are skipped, so total token count is a poor predictor); decode
duration is linear in the request count.  Coefficients are fitted by ordinary
least squares from offline calibration samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np


class FitError(ValueError):
    """Calibration samples are insufficient or degenerate."""


@dataclass(frozen=True)
class LinearCostModel:
    alpha_p: float  # s per uncached prefill token
    beta_p: float   # s, prefill intercept
    alpha_d: float  # s per decoding request
    beta_d: float   # s, decode intercept
    clamped: bool = False  # a fitted coefficient was negative and clamped to 0

    def __post_init__(self):
        if min(self.alpha_p, self.beta_p, self.alpha_d, self.beta_d) < 0:
            raise ValueError("cost model coefficients must be non-negative")


@dataclass(frozen=True)
class CalibrationSample:
    kind: str  # "prefill" | "decode"
    x: float   # uncached tokens (prefill) or request count (decode)
    duration: float  # seconds

    def __post_init__(self):
        if self.kind not in ("prefill", "decode"):
            raise ValueError(f"unknown sample kind {self.kind!r}")
        if self.x < 0 or self.duration < 0:
            raise ValueError("sample values must be non-negative")


def predict_prefill(model: LinearCostModel, uncached_tokens: int) -> float:
    if uncached_tokens < 0:
        raise ValueError("uncached_tokens must be non-negative")
    return model.alpha_p * uncached_tokens + model.beta_p


def predict_decode(model: LinearCostModel, num_requests: int) -> float:
    if num_requests < 0:
        raise ValueError("num_requests must be non-negative")
    return model.alpha_d * num_requests + model.beta_d


def _ols(xs: np.ndarray, ys: np.ndarray) -> tuple[float, float, bool]:
    if len(xs) < 2 or len(set(xs.tolist())) < 2:
        raise FitError("need >=2 samples with distinct x values")
    slope, intercept = np.polyfit(xs, ys, 1)
    clamped = slope < 0 or intercept < 0
    return max(float(slope), 0.0), max(float(intercept), 0.0), clamped


def fit(samples: Iterable[CalibrationSample]) -> LinearCostModel:
    """OLS slope/intercept per kind; negative fits are clamped to 0."""
    samples = list(samples)
    by_kind = {"prefill": ([], []), "decode": ([], [])}
    for s in samples:
        by_kind[s.kind][0].append(s.x)
        by_kind[s.kind][1].append(s.duration)
    coeffs = {}
    clamped = False
    for kind, (xs, ys) in by_kind.items():
        try:
            slope, intercept, c = _ols(np.asarray(xs, float), np.asarray(ys, float))
        except FitError as e:
            raise FitError(f"{kind}: {e}") from None
        coeffs[kind] = (slope, intercept)
        clamped |= c
    return LinearCostModel(
        alpha_p=coeffs["prefill"][0],
        beta_p=coeffs["prefill"][1],
        alpha_d=coeffs["decode"][0],
        beta_d=coeffs["decode"][1],
        clamped=clamped,
    )


# ---------------------------------------------------------------------------
# File formats: samples as `kind,x,duration_s` lines, models as JSON
# ---------------------------------------------------------------------------

def load_samples(path: str | Path) -> list[CalibrationSample]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("kind,"):
            continue
        try:
            kind, x, dur = line.split(",")
            out.append(CalibrationSample(kind.strip(), float(x), float(dur)))
        except ValueError as e:
            raise FitError(f"{path}:{lineno}: bad sample line: {e}") from None
    return out


def save_model(model: LinearCostModel, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(
            {
                "alpha_p": model.alpha_p,
                "beta_p": model.beta_p,
                "alpha_d": model.alpha_d,
                "beta_d": model.beta_d,
            },
            indent=2,
        )
        + "\n"
    )


def load_model(path: str | Path) -> LinearCostModel:
    d = json.loads(Path(path).read_text())
    return LinearCostModel(d["alpha_p"], d["beta_p"], d["alpha_d"], d["beta_d"])


#: Ground-truth ("world") model presets.  Values are internally consistent
#: defaults for a desk-scale simulator, not measurements of real hardware.
WORLD_PRESETS = {
    "opt-13b-like": LinearCostModel(1.0e-4, 0.020, 3.0e-4, 0.020),
    "qwen-32b-like": LinearCostModel(2.2e-4, 0.030, 6.0e-4, 0.030),
    "llama-70b-like": LinearCostModel(5.0e-4, 0.050, 1.2e-3, 0.050),
}


def world_preset(name: str) -> LinearCostModel:
    try:
        return WORLD_PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown world model preset {name!r}; available: {sorted(WORLD_PRESETS)}"
        ) from None
