"""Quantitative evaluation of correspondence and grasp models.

Covers cumulative pixel-error curves with symmetry-tolerant scoring, region
classification with a confidence gate (a low-confidence answer counts as
safe, never as correct), precision@k ranking, confidence-threshold
calibration, and config-grid sweeps.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as glio
from .descriptor import (DescriptorConfig, best_match, load_packs,
                         match_distribution, train_descriptor)
from .rng import derive_seed

DEFAULT_THRESHOLDS = np.arange(0, 41)


# ---------------------------------------------------------------------------
# matchers


class EncoderMatcher:
    """Adapts a descriptor model to the evaluation loop.

    `prepare` caches both feature fields for a scene; `match` then answers
    point queries in either direction. Forward queries live on the deformed
    image and are answered on the canonical image; inverse queries swap the
    roles.
    """

    def __init__(self, model):
        self.model = model
        self._fields = None

    def prepare(self, pack):
        fs, fc = self.model.features_pair(pack.image, pack.canonical)
        self._fields = (fs, fc)

    def match(self, query, direction):
        fs, fc = self._fields
        if direction == "forward":
            return best_match(fs, query, fc)
        return best_match(fc, query, fs)

    def distribution(self, query, direction):
        fs, fc = self._fields
        if direction == "forward":
            return match_distribution(fs, query, fc)
        return match_distribution(fc, query, fs)


class OracleMatcher:
    """Answers every query with the ground-truth match at fixed confidence.

    Used to validate the harness itself and as a stub model for the
    command-line `eval` self-check.
    """

    def __init__(self, confidence=1.0):
        self.confidence = confidence
        self._pack = None
        self._inv = None

    def prepare(self, pack):
        self._pack = pack
        self._inv = inverse_correspondence(pack)

    def match(self, query, direction):
        x, y = int(query[0]), int(query[1])
        if direction == "forward":
            gt = self._pack.corr[y, x]
        else:
            gt = self._inv[y, x]
        if not np.isfinite(gt[0]):
            return (x, y), 0.0
        return (int(round(gt[0])), int(round(gt[1]))), self.confidence


# ---------------------------------------------------------------------------
# query construction


def invert_correspondence(corr, canonical_shape):
    """Per-canonical-pixel map to the visible scene pixel showing that point.

    Built by rounding the forward correspondence of every visible scene
    pixel; when several scene pixels round to the same canonical pixel the
    first in scan order wins. Unseen canonical pixels are NaN.
    """
    ch, cw = canonical_shape
    inv = np.full((ch, cw, 2), np.nan)
    ys, xs = np.nonzero(np.isfinite(corr[..., 0]))
    cx = np.clip(np.rint(corr[ys, xs, 0]).astype(int), 0, cw - 1)
    cy = np.clip(np.rint(corr[ys, xs, 1]).astype(int), 0, ch - 1)
    flat = cy * cw + cx
    # stable sort keeps scan order inside each group of duplicate claims
    order = np.argsort(flat, kind="stable")
    uniq, first = np.unique(flat[order], return_index=True)
    keep = order[first]
    inv[uniq // cw, uniq % cw, 0] = xs[keep]
    inv[uniq // cw, uniq % cw, 1] = ys[keep]
    return inv


def inverse_correspondence(pack):
    """`invert_correspondence` for a loaded scene pack."""
    return invert_correspondence(pack.corr, pack.canonical_mask.shape)


def sample_queries(pack, n, rng, direction="forward"):
    """Up to `n` query pixels with defined ground truth, as an (m, 2) xy array."""
    if direction == "forward":
        pool = pack.query_pool
    else:
        inv = inverse_correspondence(pack)
        ys, xs = np.nonzero(np.isfinite(inv[..., 0]))
        pool = np.stack([xs, ys], axis=1)
    if len(pool) <= n:
        return pool
    idx = rng.choice(len(pool), size=n, replace=False)
    return pool[idx]


def _round_px(v, w, h):
    return (min(max(int(round(v[0])), 0), w - 1),
            min(max(int(round(v[1])), 0), h - 1))


def query_modes(pack, query, direction="forward", inv=None):
    """Ground-truth match pixels for a query: the true location and, when
    the garment point has a distinct visible mirror partner, that partner.

    Modes are rounded to the pixel lattice so an exact predictor scores a
    zero-pixel error.
    """
    x, y = int(query[0]), int(query[1])
    modes = []
    if direction == "forward":
        ch, cw = pack.canonical_mask.shape
        gt = pack.corr[y, x]
        if np.isfinite(gt[0]):
            gx, gy = _round_px(gt, cw, ch)
            modes.append((gx, gy))
            mir = pack.mirror[gy, gx]
            if np.isfinite(mir[0]):
                modes.append(_round_px(mir, cw, ch))
    else:
        if inv is None:
            inv = inverse_correspondence(pack)
        sh, sw = pack.corr.shape[:2]
        gt = inv[y, x]
        if np.isfinite(gt[0]):
            modes.append(_round_px(gt, sw, sh))
            mir = pack.mirror[y, x]
            if np.isfinite(mir[0]):
                mx, my = _round_px(mir, inv.shape[1], inv.shape[0])
                alt = inv[my, mx]
                if np.isfinite(alt[0]):
                    modes.append(_round_px(alt, sw, sh))
    # a mirror mode that rounds onto the primary (axis points) collapses
    if len(modes) == 2 and modes[1] == modes[0]:
        modes = modes[:1]
    return [(float(mx), float(my)) for mx, my in modes]


def symmetric_queries(pack, min_separation=8.0, limit=None, rng=None):
    """Forward queries whose two ground-truth modes are both visible and at
    least `min_separation` pixels apart."""
    out = []
    for q in pack.query_pool:
        modes = query_modes(pack, q)
        if len(modes) == 2:
            d = np.hypot(modes[1][0] - modes[0][0], modes[1][1] - modes[0][1])
            if d >= min_separation:
                out.append(q)
    out = np.array(out, dtype=int).reshape(-1, 2)
    if limit is not None and len(out) > limit:
        idx = (rng or np.random.default_rng(0)).choice(
            len(out), size=limit, replace=False)
        out = out[idx]
    return out


# ---------------------------------------------------------------------------
# error curves


@dataclass
class ErrorCurve:
    """Cumulative fraction of queries whose match error is below each
    pixel threshold."""

    thresholds: np.ndarray
    fractions: np.ndarray
    n_queries: int

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=float)
        self.fractions = np.asarray(self.fractions, dtype=float)
        if np.any(np.diff(self.fractions) < -1e-12):
            raise ValueError("fractions must be non-decreasing")

    def auc(self, max_threshold=None) -> float:
        """Mean cumulative fraction over thresholds up to `max_threshold`."""
        if max_threshold is None:
            sel = np.ones(len(self.thresholds), dtype=bool)
        else:
            sel = self.thresholds <= max_threshold
        return float(np.mean(self.fractions[sel]))

    def to_json(self):
        return {"thresholds": self.thresholds.tolist(),
                "fractions": np.round(self.fractions, 6).tolist(),
                "n_queries": int(self.n_queries)}

    @classmethod
    def from_json(cls, obj):
        return cls(np.asarray(obj["thresholds"]),
                   np.asarray(obj["fractions"]), int(obj["n_queries"]))


def curve_from_errors(errors, thresholds=DEFAULT_THRESHOLDS) -> ErrorCurve:
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise ValueError("no queries")
    fr = [(errors <= t).mean() for t in thresholds]
    return ErrorCurve(np.asarray(thresholds), np.asarray(fr), errors.size)


def match_errors(matcher, packs, direction="forward", queries_per_scene=100,
                 seed=0):
    """Per-query distance from the predicted match to the nearest
    ground-truth mode, pooled over all scenes."""
    matcher = as_matcher(matcher)
    rng = np.random.default_rng(derive_seed(seed, "match-errors", direction))
    errors = []
    for pack in packs:
        matcher.prepare(pack)
        inv = (inverse_correspondence(pack)
               if direction == "inverse" else None)
        queries = sample_queries(pack, queries_per_scene, rng, direction)
        for q in queries:
            modes = query_modes(pack, q, direction, inv=inv)
            if not modes:
                continue
            (px, py), _ = matcher.match((int(q[0]), int(q[1])), direction)
            err = min(np.hypot(px - mx, py - my) for mx, my in modes)
            errors.append(err)
    return np.asarray(errors)


def cumulative_error_curve(model, testset, direction="forward",
                           queries_per_scene=100, seed=0,
                           thresholds=DEFAULT_THRESHOLDS) -> ErrorCurve:
    """Fig-style cumulative error curve for a model over a test set.

    `testset` is a dataset directory or a list of loaded packs; `model` is a
    descriptor model or any matcher object.
    """
    packs = testset if isinstance(testset, list) else load_packs(testset)
    errs = match_errors(model, packs, direction, queries_per_scene, seed)
    return curve_from_errors(errs, thresholds)


def as_matcher(model):
    if hasattr(model, "match") and hasattr(model, "prepare"):
        return model
    return EncoderMatcher(model)


# ---------------------------------------------------------------------------
# probability-mass diagnostics


def mode_mass(probs, center, radius) -> float:
    """Total probability within `radius` pixels of `center` (x, y)."""
    h, w = probs.shape
    yy, xx = np.mgrid[0:h, 0:w]
    disk = (xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= radius ** 2
    return float(probs[disk].sum())


def mirror_mass_table(model, pack, queries, radius):
    """For each forward query, the probability mass near the true match and
    near its mirror partner: an (n, 2) array."""
    matcher = as_matcher(model)
    matcher.prepare(pack)
    rows = []
    for q in queries:
        modes = query_modes(pack, q)
        if len(modes) != 2:
            raise ValueError("query lacks a distinct mirror mode")
        p = matcher.distribution((int(q[0]), int(q[1])), "forward")
        rows.append([mode_mass(p, modes[0], radius),
                     mode_mass(p, modes[1], radius)])
    return np.asarray(rows)


# ---------------------------------------------------------------------------
# region classification


@dataclass
class ClassificationReport:
    n: int
    correct: int
    low_confidence: int
    wrong: int

    def __post_init__(self):
        if self.correct + self.low_confidence + self.wrong != self.n:
            raise ValueError("report partition does not add up")

    @property
    def correct_rate(self):
        return self.correct / self.n if self.n else 0.0

    @property
    def safe_rate(self):
        return (self.correct + self.low_confidence) / self.n if self.n else 1.0

    def to_json(self):
        return {"n": self.n, "correct": self.correct,
                "low_confidence": self.low_confidence, "wrong": self.wrong,
                "correct_rate": round(self.correct_rate, 6),
                "safe_rate": round(self.safe_rate, 6)}


def region_records(model, packs, region_labels, queries_per_scene=50, seed=0,
                   accept_mirror=False):
    """Confidence and region-correctness for sampled forward queries.

    `region_labels` is the canonical-frame label image (background < 0).
    Returns (confidences, correct flags); a prediction is correct when the
    matched canonical pixel carries the query's ground-truth region label.
    """
    labels = getattr(region_labels, "labels", region_labels)
    mirror_of = getattr(region_labels, "mirror_label", None)
    matcher = as_matcher(model)
    rng = np.random.default_rng(derive_seed(seed, "region-records"))
    confs, correct = [], []
    h, w = labels.shape
    for pack in packs:
        matcher.prepare(pack)
        for q in sample_queries(pack, queries_per_scene, rng):
            gt = pack.corr[int(q[1]), int(q[0])]
            gx = min(max(int(round(gt[0])), 0), w - 1)
            gy = min(max(int(round(gt[1])), 0), h - 1)
            gt_label = labels[gy, gx]
            if gt_label < 0:
                continue
            (px, py), conf = matcher.match((int(q[0]), int(q[1])), "forward")
            ok = False
            if 0 <= px < w and 0 <= py < h:
                got = labels[py, px]
                ok = got == gt_label
                if accept_mirror and not ok and mirror_of is not None:
                    ok = got == mirror_of(gt_label)
            confs.append(conf)
            correct.append(ok)
    return np.asarray(confs), np.asarray(correct, dtype=bool)


def report_at(confidences, correct, tau_corr) -> ClassificationReport:
    """Partition query outcomes at a confidence gate: below-gate answers are
    deferred; the rest are right or wrong."""
    confidences = np.asarray(confidences)
    correct = np.asarray(correct, dtype=bool)
    low = confidences < tau_corr
    n = len(confidences)
    ncorr = int(np.sum(correct & ~low))
    nlow = int(np.sum(low))
    return ClassificationReport(n, ncorr, nlow, n - ncorr - nlow)


def region_classification(model, packs, region_labels, tau_corr,
                          queries_per_scene=50, seed=0,
                          accept_mirror=False) -> ClassificationReport:
    conf, corr = region_records(model, packs, region_labels,
                                queries_per_scene, seed, accept_mirror)
    return report_at(conf, corr, tau_corr)


def calibrate_from_records(confidences, correct, target_safe_rate):
    """Smallest confidence gate reaching the target safe rate.

    Returns (tau, table, reached) where `table` rows are
    (tau, correct_rate, safe_rate). Deferring everything gives safe rate 1,
    so any target <= 1 is reachable; `reached` is False only beyond that.
    """
    confidences = np.asarray(confidences, dtype=float)
    cands = np.unique(confidences)
    cands = np.append(cands, np.nextafter(cands[-1], np.inf))
    table = []
    best = None
    for tau in cands:
        rep = report_at(confidences, correct, tau)
        table.append((float(tau), rep.correct_rate, rep.safe_rate))
        if best is None and rep.safe_rate >= target_safe_rate:
            best = float(tau)
    if best is None:
        return float(cands[-1]), table, False
    return best, table, True


def calibrate_threshold(model, valset, target_safe_rate, region_labels,
                        queries_per_scene=50, seed=0):
    """Calibrate the correspondence-confidence gate on a validation set."""
    packs = valset if isinstance(valset, list) else load_packs(valset)
    conf, corr = region_records(model, packs, region_labels,
                                queries_per_scene, seed)
    return calibrate_from_records(conf, corr, target_safe_rate)


# ---------------------------------------------------------------------------
# ranking


def precision_at_k(scores, labels, k) -> float:
    """Fraction of positive labels among the k highest-scored items; ties
    keep input order."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if k <= 0:
        raise ValueError("k must be positive")
    if k > len(scores):
        raise ValueError("k exceeds the number of items")
    top = np.argsort(-scores, kind="stable")[:k]
    return float(np.mean(labels[top] > 0))


# ---------------------------------------------------------------------------
# sweeps


def sweep(dataset_dir, grid, base_cfg=None, testset=None, seeds=(0,),
          queries_per_scene=60, auc_threshold=10, train=None):
    """Train one descriptor per grid cell and score each on a shared test set.

    `grid` maps DescriptorConfig field names to value lists. `testset`
    defaults to the training set (self-test); pass a held-out directory for
    honest numbers. `train` may override the training entry point, e.g. with
    a cache-aware wrapper taking (dataset_dir, cfg).
    """
    if not grid:
        raise ValueError("empty grid")
    base = base_cfg or DescriptorConfig()
    test_dir = testset or dataset_dir
    packs = load_packs(test_dir)
    test_hash = glio.sha256_text(
        glio.canonical_json(glio.read_json(Path(test_dir) / "manifest.json")))
    trainer = train or (lambda d, cfg: train_descriptor(d, cfg))
    names = sorted(grid)
    cells = []
    for values in itertools.product(*(grid[n] for n in names)):
        params = dict(zip(names, values))
        for seed in seeds:
            cfg = dataclasses.replace(base, seed=seed, **params)
            model = trainer(dataset_dir, cfg)
            curve = cumulative_error_curve(model, packs,
                                           queries_per_scene=queries_per_scene)
            cells.append({"params": params, "seed": seed,
                          "auc": curve.auc(auc_threshold),
                          "curve": curve.to_json()})
    ranked = sorted(range(len(cells)), key=lambda i: -cells[i]["auc"])
    return {"testset_hash": test_hash, "auc_threshold": int(auc_threshold),
            "cells": cells, "ranked": ranked}
