"""Metrics, matching, cost accounting, and report assembly.

Detection scoring follows the usual multi-object pipeline: peaks come out of
the heatmap by 3x3 local-maximum suppression with a score threshold, are
greedily matched one-to-one to ground truth nearest-pair-first within a
world-scale distance threshold, and the match counts feed MODA / MODP /
precision / recall. Classification uses instance-averaged accuracy. The cost
ledger is analytic: multiply-accumulate counts per network, no wall clock.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats

from .errors import ShapeError

Array = np.ndarray

PEAK_SCORE_THRESHOLD = 0.4


# ---------------------------------------------------------------------------
# classification


def classification_accuracy(predictions, labels) -> float:
    """Fraction of correct predictions."""
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.size == 0:
        raise ShapeError("accuracy of an empty prediction set is undefined")
    if preds.shape != labs.shape and labs.ndim == 1 and preds.ndim == 2:
        labs = np.broadcast_to(labs[:, None], preds.shape)
    if preds.shape != labs.shape:
        raise ShapeError(f"predictions {preds.shape} vs labels {labs.shape}")
    return float(np.mean(preds == labs))


def classification_metrics(preds: Array, labels: Array) -> dict:
    acc = classification_accuracy(preds, labels)
    return {"accuracy": acc, "primary": acc}


def correctness(run) -> Array:
    """Flat per-(instance, initial view) correctness indicators of a
    classification evaluation run, for paired significance tests."""
    return (run.preds == run.labels[:, None]).astype(float).ravel()


# ---------------------------------------------------------------------------
# peak extraction and matching


def extract_peaks(heatmap: Array, threshold: float = PEAK_SCORE_THRESHOLD) -> Array:
    """Detection peaks: cells that are maximal in their 3x3 neighbourhood and
    score at least the threshold. Exact plateau ties keep only the first cell
    in row-major order within each adjacent group. Returns (K, 2) ints sorted
    by descending score, then row, then column."""
    heat = np.asarray(heatmap, dtype=float)
    if heat.ndim != 2:
        raise ShapeError(f"heatmap must be 2-D, got {heat.shape}")
    local_max = ndimage.maximum_filter(heat, size=3, mode="constant", cval=-np.inf)
    candidates = np.argwhere((heat == local_max) & (heat >= threshold))
    accepted: list[tuple[int, int]] = []
    for r, c in candidates:  # row-major order from argwhere
        if any(abs(r - ar) <= 1 and abs(c - ac) <= 1 and heat[ar, ac] == heat[r, c]
               for ar, ac in accepted):
            continue
        accepted.append((int(r), int(c)))
    accepted.sort(key=lambda rc: (-heat[rc], rc[0], rc[1]))
    return np.array(accepted, dtype=int).reshape(-1, 2)


@dataclass(frozen=True)
class DetectionMatchResult:
    tp: int
    fp: int
    fn: int
    gt: int
    distances: tuple  # matched-pair distances, in cells
    threshold: float  # matching radius, in cells


def match_detections(peaks: Array, gt_positions: Array, threshold: float) -> DetectionMatchResult:
    """Greedy nearest-pair-first one-to-one matching within the threshold.

    Ties on distance break to the lower peak index, then lower ground-truth
    index, so results are deterministic.
    """
    peaks = np.asarray(peaks, dtype=float).reshape(-1, 2)
    gts = np.asarray(gt_positions, dtype=float).reshape(-1, 2)
    n_peaks, n_gt = len(peaks), len(gts)
    pairs = []
    for p in range(n_peaks):
        for g in range(n_gt):
            d = float(np.hypot(*(peaks[p] - gts[g])))
            if d <= threshold:
                pairs.append((d, p, g))
    pairs.sort()
    used_p, used_g, dists = set(), set(), []
    for d, p, g in pairs:
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        dists.append(d)
    tp = len(dists)
    return DetectionMatchResult(tp, n_peaks - tp, n_gt - tp, n_gt, tuple(dists), threshold)


def frame_counts(heatmap: Array, gt_positions: Array, threshold: float) -> Array:
    """[tp, fp, fn, gt, distance credit] for one frame; credit is the MODP
    numerator sum(1 - d/threshold) over matched pairs."""
    peaks = extract_peaks(heatmap)
    m = match_detections(peaks, gt_positions, threshold)
    credit = float(sum(1.0 - d / threshold for d in m.distances))
    return np.array([m.tp, m.fp, m.fn, m.gt, credit], dtype=float)


def frame_moda(frame: Array) -> float:
    """MODA of one frame-count row; frames without ground truth score 0."""
    tp, fp, fn, gt = frame[:4]
    if gt == 0:
        return 0.0
    return float(1.0 - (fp + fn) / gt)


# ---------------------------------------------------------------------------
# detection metric bundle


def detection_metrics_from_counts(tp: float, fp: float, fn: float, gt: float,
                                  credit: float) -> dict:
    """Formula substitution on aggregated counts: MODA = 1 - (FP+FN)/GT,
    MODP = credit/TP, precision = TP/(TP+FP), recall = TP/GT."""
    if gt <= 0:
        raise ShapeError("detection metrics need positive ground-truth count")
    moda = 1.0 - (fp + fn) / gt
    modp = credit / tp if tp > 0 else 0.0
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / gt
    return {"moda": float(moda), "modp": float(modp),
            "precision": float(precision), "recall": float(recall),
            "primary": float(moda)}


def detection_metrics(match_results) -> dict:
    """Metrics over one match result or a sequence of per-frame results.
    Frames with no ground truth are skipped with a warning."""
    if isinstance(match_results, DetectionMatchResult):
        match_results = [match_results]
    tp = fp = fn = gt = credit = 0.0
    kept = 0
    for m in match_results:
        if m.gt == 0:
            warnings.warn("skipping frame with no ground truth", stacklevel=2)
            continue
        tp += m.tp
        fp += m.fp
        fn += m.fn
        gt += m.gt
        credit += sum(1.0 - d / m.threshold for d in m.distances)
        kept += 1
    if kept == 0:
        raise ShapeError("all frames lacked ground truth")
    return detection_metrics_from_counts(tp, fp, fn, gt, credit)


def detection_metrics_arrays(counts: Array, credit: Array) -> dict:
    """Aggregate (…, 4) frame-count rows and matching credit sums."""
    counts = np.asarray(counts, dtype=float).reshape(-1, 4)
    credit = np.asarray(credit, dtype=float).ravel()
    if len(counts) != len(credit):
        raise ShapeError("counts and credit are misaligned")
    keep = counts[:, 3] > 0
    if not keep.all():
        warnings.warn(f"skipping {int((~keep).sum())} frame(s) with no ground truth",
                      stacklevel=2)
    if not keep.any():
        raise ShapeError("all frames lacked ground truth")
    tp, fp, fn, gt = counts[keep].sum(axis=0)
    return detection_metrics_from_counts(tp, fp, fn, gt, float(credit[keep].sum()))


# ---------------------------------------------------------------------------
# cost accounting


@dataclass(frozen=True)
class CostLedger:
    """Analytic per-instance inference cost in multiply-accumulates.

    cost_selected = T * f + g + (T-1) * d (one selector decision per added
    view); cost_full = N * f + g with no selector involved.
    """

    f_per_view: int
    g: int
    selector_step: int
    T: int
    n_cameras: int

    @property
    def cost_selected(self) -> int:
        return self.T * self.f_per_view + self.g + (self.T - 1) * self.selector_step

    @property
    def cost_full(self) -> int:
        return self.n_cameras * self.f_per_view + self.g

    @property
    def ratio(self) -> float:
        return self.cost_selected / self.cost_full

    def to_dict(self) -> dict:
        return {
            "f_per_view": self.f_per_view,
            "g": self.g,
            "selector_step": self.selector_step,
            "T": self.T,
            "n_cameras": self.n_cameras,
            "cost_selected": self.cost_selected,
            "cost_full": self.cost_full,
            "ratio": self.ratio,
        }


def cost_from_macs(f_per_view: int, g: int, selector_step: int, T: int,
                   n_cameras: int) -> CostLedger:
    if not 1 <= T <= n_cameras:
        raise ShapeError(f"T={T} outside [1, {n_cameras}]")
    return CostLedger(int(f_per_view), int(g), int(selector_step), T, n_cameras)


def cost_account(world, task_net, q_net, T: int) -> CostLedger:
    """Ledger from actual network shapes; q_net may be None (no selector)."""
    macs = task_net.mac_counts()
    if "f_per_view" in macs:
        f, g = macs["f_per_view"], macs["g"]
    else:
        cells = world.config.grid_h * world.config.grid_w
        f = macs["f_per_view_per_cell"] * cells
        g = macs["g_per_cell"] * cells
    d = q_net.mac_count() if q_net is not None else 0
    if T == world.n_cameras:
        d = 0  # full-view inference never consults the selector
    return cost_from_macs(f, g, d, T, world.n_cameras)


# ---------------------------------------------------------------------------
# policy frequency


def policy_frequency(chosen: Array, n_cameras: int) -> Array:
    """Per-step selection frequencies from (n, N, T) chosen-view records:
    freq[t, v0, a] is the fraction of instances whose step-(t+1) selection
    was camera a, given initial view v0. Rows sum to 1."""
    chosen = np.asarray(chosen)
    if chosen.ndim != 3:
        raise ShapeError(f"chosen must be (instances, initial views, T), got {chosen.shape}")
    n, v0s, T = chosen.shape
    if n == 0 or T < 2:
        raise ShapeError("frequency needs at least one instance and one selection step")
    freq = np.zeros((T - 1, n_cameras, n_cameras))
    for t in range(1, T):
        for v0 in range(v0s):
            np.add.at(freq[t - 1, v0], chosen[:, v0, t], 1.0)
    return freq / n


def camera_usage(chosen: Array, n_cameras: int) -> Array:
    """Fraction of rollouts in which each camera was used at all (initial
    view included); the ranking signal for the shut-off study."""
    chosen = np.asarray(chosen).reshape(-1, chosen.shape[-1])
    usage = np.zeros(n_cameras)
    for row in chosen:
        for cam in set(int(c) for c in row):
            usage[cam] += 1.0
    return usage / len(chosen)


# ---------------------------------------------------------------------------
# significance


def paired_t_pvalue(a, b) -> float:
    """One-sided paired t-test p-value for mean(a - b) > 0. Degenerate
    zero-variance differences collapse to 0 or 1 by sign."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ShapeError("paired test needs two aligned 1-D samples, n >= 2")
    diffs = a - b
    if np.ptp(diffs) == 0.0:
        return 0.0 if diffs[0] > 0 else 1.0
    return float(stats.ttest_rel(a, b, alternative="greater").pvalue)


def paired_permutation_pvalue(a, b, n_resamples: int = 9999, seed: int = 0) -> float:
    """One-sided sign-flip permutation p-value for mean(a - b) > 0.

    Exact enumeration up to 20 pairs, Monte Carlo with add-one smoothing
    beyond that. The exact variant is floor-limited to 1/2^n.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ShapeError("paired test needs two aligned 1-D samples, n >= 2")
    diffs = a - b
    observed = diffs.mean()
    n = len(diffs)
    if n <= 20:
        count = 0
        for signs in itertools.product((1.0, -1.0), repeat=n):
            if (diffs * np.array(signs)).mean() >= observed - 1e-12:
                count += 1
        return count / 2 ** n
    rng = np.random.default_rng([seed, 23])
    signs = rng.choice((1.0, -1.0), size=(n_resamples, n))
    perm_means = (signs * diffs).mean(axis=1)
    return float((1 + np.sum(perm_means >= observed - 1e-12)) / (n_resamples + 1))


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    """Deterministic metric bundle for one evaluated policy."""

    mode: str
    policy: str
    split: str
    T: int
    metrics: dict
    cost: dict
    config_hash: str
    seeds: list
    frequency: list | None = None  # nested (T-1, N, N) lists
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        body = {
            "mode": self.mode,
            "policy": self.policy,
            "split": self.split,
            "T": self.T,
            "metrics": self.metrics,
            "cost": self.cost,
            "config_hash": self.config_hash,
            "seeds": list(self.seeds),
            "frequency": self.frequency,
            "notes": self.notes,
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"


def build_report(run, cost: CostLedger, config_hash: str, seeds,
                 notes: dict | None = None, include_frequency: bool = True) -> EvalReport:
    freq = None
    if include_frequency and run.T >= 2 and run.policy != "full-views":
        freq = policy_frequency(run.chosen, run.n_cameras).tolist()
    return EvalReport(
        mode=run.mode,
        policy=run.policy,
        split=run.split,
        T=run.T,
        metrics=run.metrics(),
        cost=cost.to_dict(),
        config_hash=config_hash,
        seeds=[int(s) for s in seeds],
        frequency=freq,
        notes=notes or {},
    )


def frequency_csv(freq: Array) -> str:
    """step,initial_view,selected_view,frequency rows for plotting."""
    freq = np.asarray(freq, dtype=float)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["step", "initial_view", "selected_view", "frequency"])
    for t, v0, a in np.ndindex(freq.shape):
        writer.writerow([t + 1, v0, a, repr(float(freq[t, v0, a]))])
    return out.getvalue()


def table_csv(rows: list[dict], fieldnames: list[str]) -> str:
    """Generic plot-ready CSV; floats written via repr for determinism."""
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({
            k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()
        })
    return out.getvalue()


def measure_throughput(fn, n_repeats: int = 3) -> dict:
    """Wall-clock throughput of a callable; informational only, never part
    of a report's bytes."""
    start = time.perf_counter()
    for _ in range(n_repeats):
        fn()
    elapsed = time.perf_counter() - start
    return {"seconds_per_call": elapsed / n_repeats,
            "calls_per_second": n_repeats / elapsed if elapsed > 0 else float("inf")}
