"""Depth-map evaluation: structure-aware scores and classical metrics.

Two families live here. The structural family works on DISPARITY maps
(inverse depth, so the lumen — the deepest region — is the minimum): a
ReLU penalty on the airway/non-airway disparity contrast, plus per-frame
structure checks — does the global disparity minimum fall inside the
lumen mask, and is the lumen significantly deeper than its surroundings
(z-score). The classical family works on DEPTH maps after median
alignment: abs rel, sq rel, rmse, rmse log, and threshold accuracy.

Classical values are canonically rounded to 12 significant digits.
Mathematically equal pipelines (e.g. evaluating ``k * pred`` for any
``k > 0``, whose scale median alignment removes) then compare equal with
``==`` instead of differing in the last ulp; the rounding grain sits three
orders of magnitude inside the tightest tolerance used anywhere here.

Pure functions throughout: frames can be evaluated in parallel and
aggregated in any order.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset_io import EvalBundle
from .errors import AlignmentError, InputError

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-7

# composite-objective weights for downstream trainers (adversarial, cycle,
# identity, airway-structure); recorded here, not optimized here
LAMBDA_ADVERSARIAL = 5.0
LAMBDA_CYCLE = 1.0
LAMBDA_IDENTITY = 1.0
LAMBDA_AIRWAY = 0.5


@dataclass(frozen=True)
class TrainingLossWeights:
    """Weights of the composite training objective, for downstream use."""

    adversarial: float = LAMBDA_ADVERSARIAL
    cycle: float = LAMBDA_CYCLE
    identity: float = LAMBDA_IDENTITY
    airway: float = LAMBDA_AIRWAY


def _round_sig(x: float, digits: int = 12) -> float:
    """Round to ``digits`` significant decimal digits (finite values)."""
    if not np.isfinite(x) or x == 0.0:
        return float(x)
    return float(format(x, f".{digits - 1}e"))


def _as_map(name: str, arr) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2:
        raise InputError(f"{name} must be a 2-D map, got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# structural family (disparity domain)


def airway_structure_loss(
    disparity: np.ndarray, mask: np.ndarray, epsilon: float = DEFAULT_EPSILON
) -> float:
    """ReLU penalty on the airway/non-airway disparity contrast.

    ``max(0, D_airway - D_non_airway)`` with ``D_airway`` the
    epsilon-regularized mean disparity over the mask and ``D_non_airway``
    over its complement. Zero when the airway is (as it should be) the
    low-disparity — deepest — region; positive when the prediction puts
    the airway nearer than its surroundings.
    """
    if not epsilon > 0:
        raise InputError("epsilon must be > 0")
    d = _as_map("disparity", disparity)
    m = np.asarray(mask, dtype=bool)
    if m.shape != d.shape:
        raise InputError(f"mask shape {m.shape} does not match map shape {d.shape}")
    mf = m.astype(np.float64)
    inside = float((d * mf).sum()) / (float(mf.sum()) + epsilon)
    outside = float((d * (1.0 - mf)).sum()) / (float((1.0 - mf).sum()) + epsilon)
    return max(0.0, inside - outside)


def minimum_set(values: np.ndarray, tol: float = 0.0) -> np.ndarray:
    """Pixels within ``tol`` of the map minimum (``tol=0``: exact argmin set).

    Floating-point argmin sets are fragile; a small absolute tolerance
    makes the localization score robust to storage round-trips.
    """
    if tol < 0:
        raise InputError("tol must be >= 0")
    v = _as_map("values", values)
    return v <= v.min() + tol


@dataclass(frozen=True)
class AdseFrameResult:
    """Per-frame structure scores of a disparity map against a lumen mask."""

    r_in_lumen: float
    z_lumen_outside: float
    local_pass: bool  # r_in_lumen > 0.99
    contrast_pass: bool  # z < -1.00
    d_min: float
    mean_in_lumen: float
    mean_outside: float
    sigma_outside: float
    min_set_tol: float = 0.0


def adse_frame(
    disparity: np.ndarray,
    lumen: np.ndarray,
    epsilon: float = DEFAULT_EPSILON,
    min_set_tol: float = 0.0,
    valid: np.ndarray | None = None,
) -> AdseFrameResult:
    """Structure scores of one disparity map.

    ``r_in_lumen`` is the fraction of minimum-disparity pixels that fall
    inside the lumen mask (epsilon-regularized); ``z_lumen_outside`` is
    the z-score of the lumen mean against the outside distribution, with
    population standard deviation. Pass thresholds: 0.99 and -1.00.

    ``valid`` restricts all statistics to a pixel subset. A degenerate
    mask — no lumen pixels, or fewer than two outside pixels — raises
    :class:`InputError` so the caller can mark the frame skipped rather
    than pass it silently.
    """
    if not epsilon > 0:
        raise InputError("epsilon must be > 0")
    d = _as_map("disparity", disparity)
    m = np.asarray(lumen, dtype=bool)
    if m.shape != d.shape:
        raise InputError(f"mask shape {m.shape} does not match map shape {d.shape}")
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != d.shape:
            raise InputError("valid mask shape does not match map shape")
        d, m = d[valid], m[valid]
    n_in = int(m.sum())
    n_out = int(m.size - n_in)
    if n_in == 0:
        raise InputError("degenerate mask: no lumen pixels")
    if n_out < 2:
        raise InputError("degenerate mask: fewer than 2 outside pixels")

    d_min = float(d.min())
    min_mask = d <= d_min + min_set_tol
    r_in = float((min_mask & m).sum()) / (float(min_mask.sum()) + epsilon)
    mean_in = float(d[m].mean())
    outside = d[~m]
    mean_out = float(outside.mean())
    sigma_out = float(outside.std())  # population
    z = (mean_in - mean_out) / (sigma_out + epsilon)
    return AdseFrameResult(
        r_in_lumen=r_in,
        z_lumen_outside=z,
        local_pass=r_in > 0.99,
        contrast_pass=z < -1.00,
        d_min=d_min,
        mean_in_lumen=mean_in,
        mean_outside=mean_out,
        sigma_outside=sigma_out,
        min_set_tol=min_set_tol,
    )


# ---------------------------------------------------------------------------
# classical family (depth domain)


def median_align(
    pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None
) -> tuple[np.ndarray, float]:
    """Rescale ``pred`` by the ratio of valid-pixel medians.

    Returns ``(pred * scale, scale)`` with ``scale = median(gt) /
    median(pred)``. Corrects global scale only — a shifted prediction
    keeps its residual error. Nonpositive medians leave no meaningful
    scale and raise :class:`AlignmentError`.
    """
    p = _as_map("pred", pred)
    g = _as_map("gt", gt)
    if p.shape != g.shape:
        raise InputError(f"pred shape {p.shape} does not match gt shape {g.shape}")
    if valid is None:
        pv, gv = p.ravel(), g.ravel()
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != p.shape:
            raise InputError("valid mask shape does not match map shape")
        pv, gv = p[valid], g[valid]
    if pv.size == 0:
        raise AlignmentError("no valid pixels to align on")
    med_p = float(np.median(pv))
    med_g = float(np.median(gv))
    if med_p <= 0 or med_g <= 0:
        raise AlignmentError(
            f"nonpositive median (pred {med_p:.6g}, gt {med_g:.6g}); "
            "median alignment needs positive depth"
        )
    scale = med_g / med_p
    return p * scale, scale


@dataclass(frozen=True)
class ClassicalResult:
    """Standard depth errors over valid pixels, 12-significant-digit values."""

    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta: float  # fraction with max(p/g, g/p) < 1.25
    alignment_scale: float = 1.0
    excluded_nonpositive: int = 0  # pred <= 0: dropped from rmse_log and delta
    valid_count: int = 0


def classical_metrics(
    pred_aligned: np.ndarray,
    gt: np.ndarray,
    valid: np.ndarray | None = None,
    alignment_scale: float = 1.0,
) -> ClassicalResult:
    """Standard depth metrics of an (already aligned) prediction.

    ``gt`` must be positive on valid pixels. Nonpositive predictions have
    no logarithm or ratio: those pixels are excluded from ``rmse_log`` and
    ``delta`` and surfaced in ``excluded_nonpositive`` — never silently
    clamped.
    """
    p = _as_map("pred_aligned", pred_aligned)
    g = _as_map("gt", gt)
    if p.shape != g.shape:
        raise InputError(f"pred shape {p.shape} does not match gt shape {g.shape}")
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != p.shape:
            raise InputError("valid mask shape does not match map shape")
        p, g = p[valid], g[valid]
    else:
        p, g = p.ravel(), g.ravel()
    if p.size == 0:
        raise InputError("no valid pixels to evaluate")
    if not (g > 0).all():
        raise InputError("gt must be positive on valid pixels")

    diff = p - g
    abs_rel = float(np.mean(np.abs(diff) / g))
    sq_rel = float(np.mean(diff**2 / g))
    rmse = float(np.sqrt(np.mean(diff**2)))

    pos = p > 0
    excluded = int(p.size - pos.sum())
    if pos.any():
        pp, gp = p[pos], g[pos]
        rmse_log = float(np.sqrt(np.mean((np.log(pp) - np.log(gp)) ** 2)))
        ratio = np.maximum(pp / gp, gp / pp)
        delta = float((ratio < 1.25).sum() / pos.sum())
    else:
        rmse_log = 0.0
        delta = 0.0
    return ClassicalResult(
        abs_rel=_round_sig(abs_rel),
        sq_rel=_round_sig(sq_rel),
        rmse=_round_sig(rmse),
        rmse_log=_round_sig(rmse_log),
        delta=_round_sig(delta),
        alignment_scale=alignment_scale,
        excluded_nonpositive=excluded,
        valid_count=int(p.size),
    )


# ---------------------------------------------------------------------------
# per-frame orchestration and aggregation


def to_disparity(values: np.ndarray, convention: str) -> np.ndarray:
    """Bring a map into the disparity domain given its stored convention.

    ``'disparity'`` passes through; ``'depth'`` inverts positive pixels
    (nonpositive ones map to 0, i.e. infinitely deep — they cannot win the
    minimum-localization check).
    """
    v = _as_map("values", values)
    if convention == "disparity":
        return v
    if convention != "depth":
        raise InputError(f"unknown convention {convention!r}")
    out = np.zeros_like(v)
    pos = v > 0
    out[pos] = 1.0 / v[pos]
    return out


@dataclass
class FrameEvaluation:
    """Everything computed for one frame; missing parts carry reasons."""

    frame_id: int | str
    classical: ClassicalResult | None = None
    adse: AdseFrameResult | None = None
    skip_reasons: list[str] = field(default_factory=list)


@dataclass
class MetricsReport:
    """Aggregate scores plus the per-frame records they derive from."""

    frames: list[FrameEvaluation]
    depthcon_pct: float
    localaccu_pct: float
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta: float
    adse_frame_count: int
    classical_frame_count: int
    skipped: list[tuple[int | str, str]]
    min_set_tol: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "aggregate": {
                "depthcon_pct": self.depthcon_pct,
                "localaccu_pct": self.localaccu_pct,
                "abs_rel": self.abs_rel,
                "sq_rel": self.sq_rel,
                "rmse": self.rmse,
                "rmse_log": self.rmse_log,
                "delta": self.delta,
                "adse_frame_count": self.adse_frame_count,
                "classical_frame_count": self.classical_frame_count,
                "min_set_tol": self.min_set_tol,
            },
            "skipped": [{"frame": f, "reason": r} for f, r in self.skipped],
            "frames": [
                {
                    "frame": fr.frame_id,
                    "classical": None if fr.classical is None else vars(fr.classical),
                    "adse": None if fr.adse is None else vars(fr.adse),
                    "skip_reasons": fr.skip_reasons,
                }
                for fr in self.frames
            ],
        }


def aggregate(frames: list[FrameEvaluation], min_set_tol: float = 0.0) -> MetricsReport:
    """Fold per-frame records into the report.

    DepthCon / LocalAccu are per-frame pass rates times 100 over frames
    with structure scores; classical metrics are per-frame averages.
    Raises :class:`InputError` when nothing was evaluated at all.
    """
    adse_frames = [f for f in frames if f.adse is not None]
    cls_frames = [f for f in frames if f.classical is not None]
    if not adse_frames and not cls_frames:
        raise InputError("all frames were skipped; nothing to aggregate")

    def frac(flag: str) -> float:
        if not adse_frames:
            return float("nan")
        hits = sum(1 for f in adse_frames if getattr(f.adse, flag))
        return 100.0 * hits / len(adse_frames)

    def mean_of(fld: str) -> float:
        if not cls_frames:
            return float("nan")
        return _round_sig(
            float(np.mean([getattr(f.classical, fld) for f in cls_frames]))
        )

    skipped = [(f.frame_id, "; ".join(f.skip_reasons)) for f in frames if f.skip_reasons]
    return MetricsReport(
        frames=frames,
        depthcon_pct=frac("contrast_pass"),
        localaccu_pct=frac("local_pass"),
        abs_rel=mean_of("abs_rel"),
        sq_rel=mean_of("sq_rel"),
        rmse=mean_of("rmse"),
        rmse_log=mean_of("rmse_log"),
        delta=mean_of("delta"),
        adse_frame_count=len(adse_frames),
        classical_frame_count=len(cls_frames),
        skipped=skipped,
        min_set_tol=min_set_tol,
    )


def evaluate_bundle(
    bundle: EvalBundle,
    epsilon: float = DEFAULT_EPSILON,
    min_set_tol: float = 0.0,
    align: bool = True,
) -> MetricsReport:
    """Evaluate every frame of a loaded prediction/ground-truth bundle.

    Classical metrics run in the depth domain (median-aligned unless
    ``align=False``); structure scores run on the prediction's disparity
    against the frame's lumen mask. Frames that cannot support one family
    keep the other and carry the reason; a frame with a degenerate mask is
    marked skipped, not passed.
    """
    results: list[FrameEvaluation] = []
    for fr in bundle.frames:
        rec = FrameEvaluation(frame_id=fr.frame_id)
        conv = bundle.disparity_convention
        if conv == "depth":
            depth_pred, depth_gt = fr.prediction, fr.ground_truth
        else:
            depth_pred = to_disparity(fr.prediction, "depth")  # 1/x both ways
            depth_gt = to_disparity(fr.ground_truth, "depth")
        try:
            if align:
                aligned, scale = median_align(depth_pred, depth_gt, fr.valid)
            else:
                aligned, scale = np.asarray(depth_pred, dtype=np.float64), 1.0
            rec.classical = classical_metrics(aligned, depth_gt, fr.valid, scale)
        except (AlignmentError, InputError) as exc:
            rec.skip_reasons.append(f"classical: {exc}")
        if fr.mask is None:
            rec.skip_reasons.append("structure: no lumen mask")
        else:
            disp_pred = to_disparity(fr.prediction, conv)
            try:
                rec.adse = adse_frame(
                    disp_pred, fr.mask, epsilon, min_set_tol, fr.valid
                )
            except InputError as exc:
                rec.skip_reasons.append(f"structure: {exc}")
        results.append(rec)
    return aggregate(results, min_set_tol)


# ---------------------------------------------------------------------------
# report output


def write_report_json(path, report: MetricsReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


_CSV_FIELDS = [
    "frame", "abs_rel", "sq_rel", "rmse", "rmse_log", "delta",
    "alignment_scale", "excluded_nonpositive", "r_in_lumen",
    "z_lumen_outside", "local_pass", "contrast_pass", "skip_reasons",
]


def write_report_csv(path, report: MetricsReport) -> None:
    """One row per frame; empty cells where a family was not computed."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
        writer.writeheader()
        for fr in report.frames:
            row = {"frame": fr.frame_id, "skip_reasons": "; ".join(fr.skip_reasons)}
            if fr.classical is not None:
                for k in ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta",
                          "alignment_scale", "excluded_nonpositive"):
                    row[k] = getattr(fr.classical, k)
            if fr.adse is not None:
                for k in ("r_in_lumen", "z_lumen_outside", "local_pass",
                          "contrast_pass"):
                    row[k] = getattr(fr.adse, k)
            writer.writerow(row)


def format_report_table(report: MetricsReport) -> str:
    """Human-readable aggregate summary."""
    lines = [
        "metric            value",
        "----------------  ----------",
        f"DepthCon %        {report.depthcon_pct:10.2f}",
        f"LocalAccu %       {report.localaccu_pct:10.2f}",
        f"abs rel           {report.abs_rel:10.4f}",
        f"sq rel            {report.sq_rel:10.4f}",
        f"rmse              {report.rmse:10.4f}",
        f"rmse log          {report.rmse_log:10.4f}",
        f"delta < 1.25      {report.delta:10.4f}",
        f"frames (adse)     {report.adse_frame_count:10d}",
        f"frames (classic)  {report.classical_frame_count:10d}",
        f"frames skipped    {len(report.skipped):10d}",
    ]
    return "\n".join(lines)
