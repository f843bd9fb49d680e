"""Explanation quality and classification metrics, plus the report that bundles them.

Heatmap metrics consume the heatmap values directly with no hidden
renormalization. Model callbacks work on raw images in [0, 1]; the
perturbation scales below are fractions of that range.
"""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, TaxonomyTree, standardize
from .errors import ConfigError, PrerequisiteError, UndefinedMetricError
from .explain import heatmap_from_attention

ProbFn = Callable[[np.ndarray], np.ndarray]  # N x c x H x W -> N x n probabilities
ExplainFn = Callable[[np.ndarray], np.ndarray]  # c x H x W -> H x W heatmap

AUC_STEPS = 100
BLUR_KERNEL_224 = 11
BLUR_SIGMA_224 = 5.0
INFIDELITY_SAMPLES = 50
INFIDELITY_SIGMA = 0.2
SENSITIVITY_SAMPLES = 20
SENSITIVITY_RADIUS = 0.05
DEFAULT_METRIC_SEED = 0

HIGHLY_SIMILAR = "highly_similar"
SIMILAR = "similar"
DISSIMILAR = "dissimilar"

EXPLANATION_METRICS = ("precision", "pointing", "area", "iauc", "dauc", "infidelity", "sensitivity", "similarity")
CLASSIFICATION_METRICS = ("accuracy", "macro_precision", "macro_recall", "macro_f1", "kappa", "roc_auc")


# ---------------------------------------------------------------- localization


def bbox_mask(shape: Tuple[int, int], bbox) -> np.ndarray:
    """Pixels ``(row, col)`` with ``x <= col < x + w`` and ``y <= row < y + h``."""
    x, y, w, h = (float(v) for v in bbox)
    rows = np.arange(shape[0])[:, None]
    cols = np.arange(shape[1])[None, :]
    return (cols >= x) & (cols < x + w) & (rows >= y) & (rows < y + h)


def explanation_precision(heatmap: np.ndarray, bbox) -> float:
    """Share of the heatmap mass that falls inside the box."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    mask = bbox_mask(heatmap.shape, bbox)
    inside = heatmap[mask].sum()
    total = inside + heatmap[~mask].sum()  # exactly 1.0 when nothing lies outside
    if not total > 0:
        raise UndefinedMetricError("precision is undefined for a heatmap with no mass")
    return float(inside / total)


def pointing_hit(heatmap: np.ndarray, bbox) -> bool:
    """Whether the heatmap maximum (first in row-major order on ties) lies in the box."""
    heatmap = np.asarray(heatmap)
    r, c = np.unravel_index(int(np.argmax(heatmap)), heatmap.shape)
    return bool(bbox_mask(heatmap.shape, bbox)[r, c])


def pointing_game(heatmaps: Sequence[np.ndarray], bboxes: Sequence) -> float:
    hits = [pointing_hit(h, b) for h, b in zip(heatmaps, bboxes)]
    if not hits:
        raise UndefinedMetricError("pointing game needs at least one image")
    return sum(hits) / len(hits)


def area_size(heatmap: np.ndarray) -> Tuple[float, float]:
    """``(normalized, raw)``: the heatmap sum divided by the pixel count, and the plain sum."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    raw = float(heatmap.sum())
    return raw / heatmap.size, raw


# ---------------------------------------------------------------- insertion / deletion


def blur_parameters(height: int, width: int) -> Tuple[int, float]:
    """Kernel size and sigma of the insertion baseline blur, scaled from the 224-pixel setting."""
    scale = min(height, width) / 224.0
    half = max(0, int(round(BLUR_KERNEL_224 // 2 * scale)))
    return 2 * half + 1, BLUR_SIGMA_224 * scale


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    if size % 2 == 0 or size < 1:
        raise ConfigError(f"kernel size must be a positive odd number, got {size}")
    if sigma <= 0:
        k = np.zeros(size)
        k[size // 2] = 1.0
        return k
    x = np.arange(size) - size // 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, size: Optional[int] = None, sigma: Optional[float] = None) -> np.ndarray:
    """Separable Gaussian blur of a ``c x H x W`` image with reflected borders."""
    image = np.asarray(image, dtype=np.float64)
    if size is None or sigma is None:
        size, sigma = blur_parameters(*image.shape[-2:])
    k = gaussian_kernel(size, sigma)
    half = size // 2
    if half == 0:
        return image.copy()
    pad_mode = "reflect" if min(image.shape[-2:]) > half else "edge"
    padded = np.pad(image, ((0, 0), (half, half), (0, 0)), mode=pad_mode)
    out = sum(k[i] * padded[:, i:i + image.shape[1], :] for i in range(size))
    padded = np.pad(out, ((0, 0), (0, 0), (half, half)), mode=pad_mode)
    return sum(k[i] * padded[:, :, i:i + image.shape[2]] for i in range(size))


def pixel_order(heatmap: np.ndarray) -> np.ndarray:
    """Flat pixel indices by descending importance; ties keep index order."""
    return np.argsort(-np.asarray(heatmap, dtype=np.float64).ravel(), kind="stable")


def _check_steps(steps: int) -> None:
    if steps < 2:
        raise ConfigError(f"steps must be >= 2, got {steps}")


def _sweep(prob_fn: ProbFn, start: np.ndarray, end: np.ndarray, order: np.ndarray, target: int,
           steps: int) -> np.ndarray:
    """Probability of ``target`` as pixels switch from ``start`` to ``end`` in ``order``.

    Point k has the first ``floor(k * HW / (steps - 1))`` pixels switched.
    """
    c, h, w = start.shape
    hw = h * w
    counts = (np.arange(steps) * hw) // (steps - 1)
    rank = np.empty(hw, dtype=np.int64)
    rank[order] = np.arange(hw)
    switched = rank[None, :] < counts[:, None]  # steps x HW
    frames = np.where(switched[:, None, :], end.reshape(1, c, hw), start.reshape(1, c, hw))
    probs = prob_fn(frames.reshape(steps, c, h, w))
    return np.asarray(probs, dtype=np.float64)[:, target]


def _trapezoid(curve: np.ndarray) -> float:
    dx = 1.0 / (len(curve) - 1)
    return float(dx * (curve.sum() - 0.5 * (curve[0] + curve[-1])))


def insertion_curve(prob_fn: ProbFn, image: np.ndarray, heatmap: np.ndarray, target: int,
                    steps: int = AUC_STEPS, baseline: Optional[np.ndarray] = None) -> np.ndarray:
    _check_steps(steps)
    image = np.asarray(image, dtype=np.float64)
    start = gaussian_blur(image) if baseline is None else np.asarray(baseline, dtype=np.float64)
    return _sweep(prob_fn, start, image, pixel_order(heatmap), target, steps)


def insertion_auc(prob_fn: ProbFn, image: np.ndarray, heatmap: np.ndarray, target: int,
                  steps: int = AUC_STEPS, baseline: Optional[np.ndarray] = None) -> float:
    """Area under the target probability as pixels are revealed over a blurred copy; higher is better."""
    return _trapezoid(insertion_curve(prob_fn, image, heatmap, target, steps, baseline))


def deletion_curve(prob_fn: ProbFn, image: np.ndarray, heatmap: np.ndarray, target: int,
                   steps: int = AUC_STEPS, fill=None) -> np.ndarray:
    _check_steps(steps)
    image = np.asarray(image, dtype=np.float64)
    if fill is None:
        fill = image.mean(axis=(1, 2))
    end = np.broadcast_to(np.asarray(fill, dtype=np.float64).reshape(-1, 1, 1), image.shape)
    return _sweep(prob_fn, image, end, pixel_order(heatmap), target, steps)


def deletion_auc(prob_fn: ProbFn, image: np.ndarray, heatmap: np.ndarray, target: int,
                 steps: int = AUC_STEPS, fill=None) -> float:
    """Area under the target probability as pixels are replaced by ``fill`` (per channel); lower is better."""
    return _trapezoid(deletion_curve(prob_fn, image, heatmap, target, steps, fill))


# ---------------------------------------------------------------- robustness


def infidelity(prob_fn: ProbFn, image: np.ndarray, heatmap: np.ndarray, target: int,
               n_samples: int = INFIDELITY_SAMPLES, sigma: float = INFIDELITY_SIGMA,
               rng: Optional[np.random.Generator] = None) -> float:
    """Monte-Carlo mean of ``(I . phi - (f(x) - f(x - I)))**2``, ``I ~ N(0, sigma^2)`` per pixel.

    The same per-pixel noise is applied to every channel.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(DEFAULT_METRIC_SEED)
    image = np.asarray(image, dtype=np.float64)
    phi = np.asarray(heatmap, dtype=np.float64)
    noise = rng.normal(0.0, sigma, size=(n_samples,) + image.shape[-2:])
    batch = np.concatenate([image[None], image[None] - noise[:, None]])
    f = np.asarray(prob_fn(batch), dtype=np.float64)[:, target]
    predicted = (noise * phi[None]).sum(axis=(1, 2))
    return float(np.mean((predicted - (f[0] - f[1:])) ** 2))


def sensitivity(explain_fn: ExplainFn, image: np.ndarray, radius: float = SENSITIVITY_RADIUS,
                n_samples: int = SENSITIVITY_SAMPLES, rng: Optional[np.random.Generator] = None) -> float:
    """Max relative L2 change of the heatmap over uniform perturbations with ``|delta|_inf <= radius``."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(DEFAULT_METRIC_SEED)
    image = np.asarray(image, dtype=np.float64)
    base = np.asarray(explain_fn(image), dtype=np.float64)
    norm = np.linalg.norm(base)
    if not norm > 0:
        raise UndefinedMetricError("sensitivity is undefined for an all-zero heatmap")
    worst = 0.0
    for _ in range(n_samples):
        delta = rng.uniform(-radius, radius, size=image.shape)
        diff = np.linalg.norm(np.asarray(explain_fn(image + delta), dtype=np.float64) - base)
        worst = max(worst, diff / norm)
    return float(worst)


# ---------------------------------------------------------------- taxonomy similarity


def wu_palmer(tree: TaxonomyTree, a: int, b: int) -> float:
    """``2 * depth(lcs) / (depth(a) + depth(b))`` for category indices ``a`` and ``b``."""
    na, nb = tree.node_of(a), tree.node_of(b)
    up_a = set(tree.ancestors(na))
    lcs = next(node for node in tree.ancestors(nb) if node in up_a)
    return 2.0 * tree.depth(lcs) / (tree.depth(na) + tree.depth(nb))


def similarity_bin(score: float) -> str:
    if score >= 0.9:
        return HIGHLY_SIMILAR
    if score >= 0.7:
        return SIMILAR
    return DISSIMILAR


def similarity_bins(scores: Sequence[float]) -> List[str]:
    return [similarity_bin(s) for s in scores]


def least_similar_class(tree: TaxonomyTree, label: int) -> int:
    """Category with the lowest similarity to ``label``; lowest index wins ties."""
    others = [c for c in range(tree.n_categories) if c != label]
    if not others:
        raise UndefinedMetricError("least similar class needs at least two categories")
    tree.node_of(label)
    return min(others, key=lambda c: (wu_palmer(tree, label, c), c))


# ---------------------------------------------------------------- classification


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Binary ROC-AUC via the rank statistic (average ranks for ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs both classes in the ground truth")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1
        i = j + 1
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def confusion_matrix(predictions: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def classification_metrics(predictions, scores, labels, n_classes: Optional[int] = None) -> Dict[str, float]:
    """Accuracy, macro precision/recall/F1, Cohen's kappa, and (binary tasks only) ROC-AUC.

    ``scores`` are positive-class scores for binary tasks and may be None
    otherwise. Per-class precision or recall with an empty denominator
    counts as 0.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise UndefinedMetricError("classification metrics need at least one sample")
    if n_classes is None:
        n_classes = int(max(predictions.max(), labels.max())) + 1
    cm = confusion_matrix(predictions, labels, n_classes).astype(np.float64)
    total = cm.sum()
    tp = np.diag(cm)
    pred_count = cm.sum(axis=0)
    true_count = cm.sum(axis=1)
    present = (pred_count + true_count) > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(pred_count > 0, tp / pred_count, 0.0)
        rec = np.where(true_count > 0, tp / true_count, 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    p_o = tp.sum() / total
    p_e = float((pred_count * true_count).sum() / total ** 2)
    kappa = 1.0 if p_e == 1.0 and p_o == 1.0 else (p_o - p_e) / (1 - p_e) if p_e < 1 else 0.0
    out = {
        "accuracy": float(p_o),
        "macro_precision": float(prec[present].mean()),
        "macro_recall": float(rec[present].mean()),
        "macro_f1": float(f1[present].mean()),
        "kappa": float(kappa),
    }
    if n_classes == 2 and scores is not None:
        out["roc_auc"] = roc_auc(scores, labels == 1)
    return out


# ---------------------------------------------------------------- dataset report


@dataclass
class ModelAdapter:
    """Raw-image callbacks around a trained classifier."""

    model: object
    mean: Sequence[float]
    std: Sequence[float]

    def _prep(self, images: np.ndarray) -> np.ndarray:
        return standardize(np.asarray(images), self.mean, self.std).astype(np.float32)

    def probabilities(self, images: np.ndarray) -> np.ndarray:
        return self.model.predict_proba(self._prep(images))

    def attention(self, images: np.ndarray) -> np.ndarray:
        return self.model.attention(self._prep(images))

    def heatmap(self, image: np.ndarray, class_index: int) -> np.ndarray:
        attn = self.attention(np.asarray(image)[None])[0]
        return heatmap_from_attention(attn[class_index], attn.shape[1:], image.shape[-2:], class_index).values

    def explainer(self, class_index: int) -> ExplainFn:
        return lambda image: self.heatmap(image, class_index)


@dataclass
class MetricReport:
    records: List[Dict[str, object]]
    parameters: Dict[str, object]
    classification: Dict[str, float] = field(default_factory=dict)

    def columns(self) -> List[str]:
        cols: List[str] = []
        for rec in self.records:
            cols.extend(k for k in rec if k not in cols)
        return cols

    def aggregate(self) -> Dict[str, Dict[str, object]]:
        out: Dict[str, Dict[str, object]] = {}
        for col in self.columns():
            if col in ("index", "label", "class", "similarity_bin"):
                continue
            vals = [r.get(col) for r in self.records]
            ok = [float(v) for v in vals if v is not None]
            out[col] = {"mean": (math.fsum(ok) / len(ok)) if ok else None, "count": len(ok),
                        "skipped": len(vals) - len(ok)}
        for k, v in self.classification.items():
            out[k] = {"mean": v, "count": len(self.records), "skipped": 0}
        return out

    def write(self, csv_path, json_path) -> None:
        cols = self.columns()
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for rec in self.records:
                writer.writerow(["" if rec.get(c) is None else _fmt(rec[c]) for c in cols])
        doc = {"_parameters": self.parameters, **self.aggregate()}
        with open(json_path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def select_classes(selector, labels: np.ndarray, n_classes: int,
                   taxonomy: Optional[TaxonomyTree] = None) -> np.ndarray:
    """Target class per image for ``gt``, ``lsc``, or an explicit class index."""
    labels = np.asarray(labels)
    if selector == "gt":
        return labels.copy()
    if selector == "lsc":
        if taxonomy is None:
            raise ConfigError("class selector 'lsc' needs a taxonomy file")
        cache: Dict[int, int] = {}
        return np.array([cache.setdefault(int(l), least_similar_class(taxonomy, int(l))) for l in labels])
    try:
        idx = int(selector)
    except (TypeError, ValueError):
        raise ConfigError(f"class selector must be gt, lsc, or an index, got {selector!r}") from None
    if not 0 <= idx < n_classes:
        raise IndexError(f"class index {idx} out of range for {n_classes} classes")
    return np.full(len(labels), idx)


def check_prerequisites(metrics: Sequence[str], dataset: Dataset, taxonomy: Optional[TaxonomyTree],
                        selector) -> None:
    unknown = [m for m in metrics if m not in EXPLANATION_METRICS + ("classification",)]
    if unknown:
        raise ConfigError(f"unknown metrics {unknown}; choose from {EXPLANATION_METRICS + ('classification',)}")
    missing = []
    if not dataset.has_bboxes:
        missing += [f"{m} needs bounding boxes" for m in metrics if m in ("precision", "pointing")]
    if taxonomy is None:
        if "similarity" in metrics:
            missing.append("similarity needs a taxonomy")
        if selector == "lsc":
            missing.append("the lsc class selector needs a taxonomy")
    if missing:
        raise PrerequisiteError("; ".join(missing))


def evaluate(
    adapter: ModelAdapter,
    dataset: Dataset,
    metrics: Sequence[str] = EXPLANATION_METRICS + ("classification",),
    selector="gt",
    taxonomy: Optional[TaxonomyTree] = None,
    seed: int = DEFAULT_METRIC_SEED,
    threads: int = 1,
    steps: int = AUC_STEPS,
) -> MetricReport:
    """Per-image explanation metrics on ``dataset`` (raw [0, 1] images) plus a classification block.

    Every random draw comes from a generator seeded by ``(seed, image index)``,
    so results do not depend on ``threads``.
    """
    metrics = list(metrics)
    check_prerequisites(metrics, dataset, taxonomy, selector)
    n_classes = adapter.model.config.n_classes
    targets = select_classes(selector, dataset.labels, n_classes, taxonomy)
    images = dataset.images.astype(np.float64)
    fill = images.mean(axis=(0, 2, 3))
    explanation = [m for m in metrics if m != "classification"]
    heatmap_metrics = [m for m in explanation if m != "similarity"]
    attn = adapter.attention(dataset.images) if heatmap_metrics else None

    def one(i: int) -> Dict[str, object]:
        rec: Dict[str, object] = {"index": i, "label": int(dataset.labels[i]), "class": int(targets[i])}
        t = int(targets[i])
        hm = None
        if attn is not None:
            hm = heatmap_from_attention(attn[i, t], attn.shape[2:], images.shape[-2:], t).values
        box = dataset.bboxes[i] if dataset.bboxes is not None else None
        for m in explanation:
            try:
                if m == "precision":
                    rec["precision"] = explanation_precision(hm, box)
                elif m == "pointing":
                    rec["pointing"] = float(pointing_hit(hm, box))
                elif m == "area":
                    rec["area"], rec["area_raw"] = area_size(hm)
                elif m == "iauc":
                    rec["iauc"] = insertion_auc(adapter.probabilities, images[i], hm, t, steps)
                elif m == "dauc":
                    rec["dauc"] = deletion_auc(adapter.probabilities, images[i], hm, t, steps, fill)
                elif m == "infidelity":
                    rng = np.random.default_rng([seed, i, 0])
                    rec["infidelity"] = infidelity(adapter.probabilities, images[i], hm, t, rng=rng)
                elif m == "sensitivity":
                    rng = np.random.default_rng([seed, i, 1])
                    rec["sensitivity"] = sensitivity(adapter.explainer(t), images[i], rng=rng)
                elif m == "similarity":
                    score = wu_palmer(taxonomy, int(dataset.labels[i]), t)
                    rec["similarity"] = score
                    rec["similarity_bin"] = similarity_bin(score)
            except UndefinedMetricError:
                rec[m] = None
        return rec

    idx = range(len(dataset))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one, idx))
    else:
        records = [one(i) for i in idx]

    classification: Dict[str, float] = {}
    if "classification" in metrics:
        probs = adapter.probabilities(dataset.images)
        preds = probs.argmax(axis=1)
        scores = probs[:, 1] if n_classes == 2 else None
        try:
            classification = classification_metrics(preds, scores, dataset.labels, n_classes)
        except UndefinedMetricError:
            classification = classification_metrics(preds, None, dataset.labels, n_classes)

    blur_size, blur_sigma = blur_parameters(*images.shape[-2:])
    params = {
        "metrics": metrics,
        "class_selector": str(selector),
        "seed": seed,
        "auc_steps": steps,
        "insertion_baseline": f"gaussian blur, kernel {blur_size}, sigma {blur_sigma!r}",
        "deletion_fill": [float(v) for v in fill],
        "infidelity": {"samples": INFIDELITY_SAMPLES, "sigma": INFIDELITY_SIGMA},
        "sensitivity": {"samples": SENSITIVITY_SAMPLES, "radius": SENSITIVITY_RADIUS},
        "images": len(dataset),
    }
    return MetricReport(records, params, classification)


def parallelism(default: int = 1) -> int:
    """Thread cap from ``$SCOUTER_THREADS``."""
    raw = os.environ.get("SCOUTER_THREADS")
    if not raw:
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"SCOUTER_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError("SCOUTER_THREADS must be >= 1")
    return value
