"""Two-alternative forced choice data, agreement scoring and metric fitting."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Parameter, Tensor, ops
from ..autodiff.optim import adam_step
from ..imageio import read_ppm, write_ppm
from .perceptual import ChannelWeights, tap_distances


class DegenerateDataError(ValueError):
    """The records carry no preference signal to learn from."""


@dataclass
class TwoAFCRecord:
    reference: np.ndarray
    a: np.ndarray
    b: np.ndarray
    fraction_a: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.reference.shape == self.a.shape == self.b.shape):
            raise ValueError("reference and reconstructions must share dimensions")
        if not 0.0 <= self.fraction_a <= 1.0:
            raise ValueError("fraction_a must lie in [0, 1]")


def save_records(path, records) -> None:
    os.makedirs(path, exist_ok=True)
    for i, rec in enumerate(records):
        stem = f"rec{i:05d}"
        files = {k: f"{stem}_{k}.ppm" for k in ("ref", "a", "b")}
        for key, img in zip(("ref", "a", "b"), (rec.reference, rec.a, rec.b)):
            write_ppm(os.path.join(path, files[key]), img)
        sidecar = {**files, "fraction_a": rec.fraction_a,
                   "method_a": rec.meta.get("method_a", ""), "method_b": rec.meta.get("method_b", ""),
                   "bpp": rec.meta.get("bpp", 0.0)}
        with open(os.path.join(path, stem + ".json"), "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, sort_keys=True)


def load_records(path) -> list[TwoAFCRecord]:
    out = []
    for name in sorted(os.listdir(path)):
        if not name.endswith(".json"):
            continue
        with open(os.path.join(path, name), encoding="utf-8") as fh:
            side = json.load(fh)
        imgs = [read_ppm(os.path.join(path, side[k])) for k in ("ref", "a", "b")]
        meta = {k: side.get(k) for k in ("method_a", "method_b", "bpp")}
        out.append(TwoAFCRecord(*imgs, float(side["fraction_a"]), meta))
    return out


def synthetic_records(count: int, seed: int = 0, size: int = 24, key_channel: int = 1,
                      judges: int = 6) -> list[TwoAFCRecord]:
    """Records whose human preference depends only on the distortion of ``key_channel``.

    Both reconstructions carry noise on every colour channel; the other
    channels' noise is larger but independent of the simulated judges, who
    prefer the reconstruction with the smaller key-channel error.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        ref = np.clip(0.5 + 0.2 * rng.normal(size=(size, size, 3)), 0.05, 0.95)
        amp = {}
        recs = []
        for side in ("a", "b"):
            scales = rng.uniform(0.02, 0.12, size=3)
            key_amp = rng.uniform(0.0, 0.08)
            scales[key_channel] = key_amp
            amp[side] = key_amp
            noise = rng.normal(size=ref.shape) * scales
            recs.append(np.clip(ref + noise, 0.0, 1.0))
        p = 1.0 / (1.0 + np.exp(-(amp["b"] - amp["a"]) / 0.01))
        frac = rng.binomial(judges, p) / judges
        out.append(TwoAFCRecord(ref, recs[0], recs[1], float(frac), {"method_a": "noise", "method_b": "noise"}))
    return out


def agreement(dist_a, dist_b, fraction_a) -> np.ndarray:
    """Per-record human fraction behind the metric's pick (0.5 when the metric ties)."""
    dist_a, dist_b = np.asarray(dist_a, float), np.asarray(dist_b, float)
    f = np.asarray(fraction_a, float)
    return np.where(dist_a < dist_b, f, np.where(dist_b < dist_a, 1.0 - f, 0.5))


def twoafc_from_distances(dist_a, dist_b, fraction_a) -> float:
    return float(agreement(dist_a, dist_b, fraction_a).mean())


def metric_distances(metric, records):
    da = np.array([metric(r.reference, r.a) for r in records], dtype=float)
    db = np.array([metric(r.reference, r.b) for r in records], dtype=float)
    return da, db


def twoafc_score(metric, records) -> float:
    """Mean fraction of humans agreeing with the reconstruction the metric calls closer."""
    da, db = metric_distances(metric, records)
    return twoafc_from_distances(da, db, [r.fraction_a for r in records])


# -- learned channel weights ------------------------------------------------------------

def _record_features(records, extractor):
    per_a = [tap_distances(r.reference, r.a, extractor) for r in records]
    per_b = [tap_distances(r.reference, r.b, extractor) for r in records]
    taps = len(per_a[0])
    da = [np.concatenate([d[t] for d in per_a]) for t in range(taps)]  # each (R, C_t)
    db = [np.concatenate([d[t] for d in per_b]) for t in range(taps)]
    return da, db


def _weighted(d_list, weights):
    return sum(d @ (w ** 2) for d, w in zip(d_list, weights))


def fit_channel_weights(records, extractor, steps: int = 300, lr: float = 0.05,
                        initial: ChannelWeights | None = None) -> ChannelWeights:
    """Learn non-negative channel weights with a two-distance soft comparator.

    The comparator predicts P(humans prefer A) = sigmoid(g * (dpl_B - dpl_A))
    with a learned gain g and is trained by cross-entropy against the human
    fractions.  Weights are clamped at zero after every step.  The returned
    weights are the best seen on the training records, the initial all-ones
    vector included, so fitting never scores below its starting point.
    """
    if len(records) < 2:
        raise ValueError("need at least two records")
    fractions = np.array([r.fraction_a for r in records], dtype=float)
    if np.all(fractions == 0.5):
        raise DegenerateDataError("every record is a coin flip; there is no preference to fit")
    da, db = _record_features(records, extractor)
    weights = initial or ChannelWeights.ones(extractor)
    for v in weights.vectors:
        v.astype(np.float64)
    spread = np.std(_weighted(db, weights.arrays()) - _weighted(da, weights.arrays()))
    log_gain = Parameter(np.array(np.log(1.0 / max(spread, 1e-12))), dtype=np.float64)
    target = np.stack([fractions, 1.0 - fractions], axis=-1)
    da_t = [Tensor(d) for d in da]
    db_t = [Tensor(d) for d in db]

    def score(ws):
        return twoafc_from_distances(_weighted(da, ws), _weighted(db, ws), fractions)

    best, best_score = weights.arrays(), score(weights.arrays())
    params = weights.vectors + [log_gain]
    for _ in range(steps):
        margin = None
        for a, b, w in zip(da_t, db_t, weights.vectors):
            w2 = w * w
            term = ops.matmul(b - a, w2.reshape(-1, 1)).reshape(-1)
            margin = term if margin is None else margin + term
        logit = margin * ops.exp(log_gain)
        p_a = ops.sigmoid(logit)
        probs = ops.concat([p_a.reshape(-1, 1), (1.0 - p_a).reshape(-1, 1)], axis=1)
        probs = probs * (1 - 2e-7) + 1e-7
        loss = ops.cross_entropy(probs, target, axis=1)
        loss.backward()
        adam_step(params, lr)
        weights.clamp_()
        current = score(weights.arrays())
        if current > best_score:
            best, best_score = weights.arrays(), current
    out = ChannelWeights([w.size for w in best])
    for p, w in zip(out.vectors, best):
        p.assign(w)
    return out


# -- linear combinations of metrics --------------------------------------------------------

@dataclass
class ComboFit:
    weights: np.ndarray  # applied to raw metric distances
    score: float
    inliers: int

    def combine(self, distances) -> np.ndarray:
        """``distances`` is (R, M); returns the combined distance per record."""
        return np.asarray(distances, float) @ self.weights


def fit_linear_combo(dist_a, dist_b, fractions, iterations: int = 500, sample_size=None,
                     threshold: float = 0.5, seed: int = 0) -> ComboFit:
    """RANSAC over record subsets for a linear combination of metric distances.

    ``dist_a``/``dist_b`` are (R, M) distances of each reconstruction under
    each metric.  Each draw least-squares fits normalized distance
    differences to the signed preference margin 2f - 1; records whose
    residual is below ``threshold`` are inliers, and the inlier set of every
    draw is refit once.  Candidates are ranked by 2AFC agreement on all
    records (ties: more inliers, then earlier candidate).  Every single
    metric (either sign) is also a candidate, so the combination never
    scores below the best individual metric on the fitting set.
    """
    da, db = np.asarray(dist_a, float), np.asarray(dist_b, float)
    if da.ndim == 1:
        da, db = da[:, None], db[:, None]
    f = np.asarray(fractions, float)
    n, m = da.shape
    if n < m:
        raise ValueError(f"{n} records cannot determine {m} combination weights")
    diff = db - da  # positive when A looks closer
    scale = diff.std(axis=0)
    scale[scale == 0] = 1.0
    feats = diff / scale
    margin = 2 * f - 1
    rng = np.random.default_rng(seed)
    k = sample_size or min(n, max(2 * m, m + 2))

    def evaluate(w):
        pred = feats @ w
        resid = np.abs(pred - margin)
        score = float(agreement(-pred, pred, f).mean())
        return score, int((resid < threshold).sum())

    candidates = []
    for j in range(m):
        for sign in (1.0, -1.0):
            e = np.zeros(m)
            e[j] = sign
            candidates.append(e)
    full, *_ = np.linalg.lstsq(feats, margin, rcond=None)
    candidates.append(full)
    for _ in range(iterations):
        idx = rng.choice(n, size=k, replace=False)
        w, *_ = np.linalg.lstsq(feats[idx], margin[idx], rcond=None)
        candidates.append(w)
        inl = np.abs(feats @ w - margin) < threshold
        if inl.sum() >= m:
            w2, *_ = np.linalg.lstsq(feats[inl], margin[inl], rcond=None)
            candidates.append(w2)
    best_key, best_w = None, None
    for i, w in enumerate(candidates):
        s, inl = evaluate(w)
        key = (s, inl, -i)
        if best_key is None or key > best_key:
            best_key, best_w = key, w
    return ComboFit(best_w / scale, best_key[0], best_key[1])
