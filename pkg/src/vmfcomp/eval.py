"""Segmentation metrics, leave-one-domain-out evaluation and equivariance probes.

Hausdorff distances are in pixels. A class that is empty in the prediction
or the ground truth (or both) yields NaN for HD, which is excluded from
averages and counted separately; Dice excludes only classes empty in both.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial.distance import cdist
from skimage.filters import threshold_otsu

from .data import HEART_FACTORS, generate_sample
from .errors import (EmptyFactorSet, FactorOutOfBounds, IncompatibleCheckpoint,
                     NoMatchedChannel, ShapeMismatch)

CLASS_NAMES = ("LV", "MYO", "RV")


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"{np.shape(a)} vs {np.shape(b)}")


def dice_score(pred_mask, gt_mask, num_classes=3):
    """Per-class Dice in percent; NaN where the class is absent from both masks."""
    _same_shape(pred_mask, gt_mask)
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    out = np.full(num_classes, np.nan)
    for k in range(1, num_classes + 1):
        p, g = pred_mask == k, gt_mask == k
        denom = p.sum() + g.sum()
        if denom:
            out[k - 1] = 100.0 * 2.0 * np.logical_and(p, g).sum() / denom
    return out


def boundary(region):
    """Pixels of ``region`` with a 4-neighbour outside it (image border counts as outside)."""
    region = np.asarray(region, dtype=bool)
    return region & ~ndimage.binary_erosion(region, border_value=0)


def hausdorff_points(a, b):
    """Symmetric Hausdorff distance between two nonempty point sets ``(n, 2)``."""
    d = cdist(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def hausdorff(pred_mask, gt_mask, num_classes=3):
    """Per-class symmetric boundary Hausdorff distance in pixels (NaN = skipped)."""
    _same_shape(pred_mask, gt_mask)
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    out = np.full(num_classes, np.nan)
    for k in range(1, num_classes + 1):
        p, g = pred_mask == k, gt_mask == k
        if p.any() and g.any():
            out[k - 1] = hausdorff_points(np.argwhere(boundary(p)), np.argwhere(boundary(g)))
    return out


def harden_predictions(probs):
    """Sigmoid maps ``(N, K, H, W)`` -> labels ``(N, H, W)``: best channel if >= 0.5, else 0."""
    probs = torch.as_tensor(probs)
    best, idx = probs.max(dim=1)
    return torch.where(best >= 0.5, idx + 1, torch.zeros_like(idx)).numpy().astype(np.uint8)


def _summary(values):
    v = np.asarray(values, dtype=float)
    ok = v[~np.isnan(v)]
    return {
        "mean": float(ok.mean()) if ok.size else None,
        "std": float(ok.std()) if ok.size else None,
        "n": int(ok.size),
        "n_skipped": int(np.isnan(v).sum()),
    }


# -- channel / factor analysis -------------------------------------------------

def with_heart(factor_masks):
    """Add a ``heart`` factor: the union of LV, MYO and RV."""
    fm = dict(factor_masks)
    if all(k in fm for k in HEART_FACTORS):
        fm["heart"] = fm["LV"] | fm["MYO"] | fm["RV"]
    return fm


def binarize_channel(ch):
    """Otsu-threshold one activation channel; a constant channel is all background."""
    ch = np.asarray(ch, dtype=np.float64)
    if ch.max() == ch.min():
        return np.zeros(ch.shape, dtype=bool)
    return ch > threshold_otsu(ch)


def upsample_nearest(m, stride):
    return np.repeat(np.repeat(m, stride, axis=0), stride, axis=1)


def _binary_dice(a, b):
    denom = a.sum() + b.sum()
    return 2.0 * np.logical_and(a, b).sum() / denom if denom else 0.0


def channel_match(activations, factor_masks, factors=None):
    """Dice between Otsu-binarised channels and factor masks, averaged over samples.

    ``activations`` is ``(N, J, h, w)``; ``factor_masks`` is a list of N dicts
    of ``(H, W)`` boolean masks. Samples where a factor is empty do not count
    towards that factor's column. Returns ``(matrix (J, F), assignment, factors)``
    where ``assignment`` maps each factor to its best channel.
    """
    acts = np.asarray(activations, dtype=np.float64)
    if len(factor_masks) == 0 or len(factor_masks) != len(acts):
        raise EmptyFactorSet("need one factor-mask dict per activation map")
    factor_masks = [with_heart(fm) for fm in factor_masks]
    if factors is None:
        factors = [f for f in factor_masks[0]]
    if not factors:
        raise EmptyFactorSet("no factors to match")
    n, J = acts.shape[:2]
    stride = factor_masks[0][factors[0]].shape[0] // acts.shape[2]
    sums = np.zeros((J, len(factors)))
    counts = np.zeros(len(factors))
    for i in range(n):
        bins = [upsample_nearest(binarize_channel(acts[i, j]), stride) for j in range(J)]
        for f, name in enumerate(factors):
            m = np.asarray(factor_masks[i][name], dtype=bool)
            if not m.any():
                continue
            counts[f] += 1
            for j in range(J):
                sums[j, f] += _binary_dice(bins[j], m)
    if not counts.any():
        raise EmptyFactorSet("every factor is empty in every sample")
    matrix = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    assignment = {name: int(matrix[:, f].argmax()) for f, name in enumerate(factors) if counts[f]}
    return matrix, assignment, list(factors)


def factor_descriptor(act, mask, channels, stride):
    """Mean activation of ``channels`` inside the factor's bounding box on the feature grid."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise EmptyFactorSet("factor absent from sample")
    y0, y1 = ys.min() // stride, ys.max() // stride + 1
    x0, x1 = xs.min() // stride, xs.max() // stride + 1
    return np.asarray(act)[list(channels), y0:y1, x0:x1].mean(axis=(1, 2))


def _activations(model, images):
    x = torch.from_numpy(np.stack(images)[:, None].astype(np.float32))
    dtype = next(model.parameters()).dtype if hasattr(model, "parameters") else torch.float32
    return model.activations(x.to(dtype)).double().numpy()


def shared_factor_probe(model, pairs, factor, assignment, stride):
    """Mean L1 gap between paired samples' descriptors on the factor's channels.

    Lower means the factor is represented the same way across the pair.
    """
    keys = [factor] if factor != "heart" else ["heart"]
    channels = sorted({assignment[k] for k in keys if k in assignment})
    if not channels:
        raise NoMatchedChannel(f"no channel assigned to {factor!r}")
    if not pairs:
        return 0.0
    firsts = _activations(model, [p[0].image for p in pairs])
    seconds = _activations(model, [p[1].image for p in pairs])
    gaps = []
    for (s1, s2), a1, a2 in zip(pairs, firsts, seconds):
        m1, m2 = with_heart(s1.factor_masks)[factor], with_heart(s2.factor_masks)[factor]
        d1 = factor_descriptor(a1, m1, channels, stride)
        d2 = factor_descriptor(a2, m2, channels, stride)
        gaps.append(np.abs(d1 - d2).mean())
    return float(np.mean(gaps))


def argmax_location(channel):
    return np.array(np.unravel_index(np.argmax(channel), np.shape(channel)), dtype=float)


def translation_error(act_orig, act_shifted, shift_cells, channels):
    """Mean distance between each channel's argmax displacement and the expected shift."""
    shift = np.asarray(shift_cells, dtype=float)
    errs = [np.linalg.norm(argmax_location(act_shifted[j]) - argmax_location(act_orig[j]) - shift)
            for j in channels]
    return float(np.mean(errs))


def heart_channels(assignment):
    chans = {assignment[k] for k in (*HEART_FACTORS, "heart") if k in assignment}
    if not chans:
        raise NoMatchedChannel("no channel assigned to a heart factor")
    return sorted(chans)


def translation_probe(model, spec, seed, shift, channels, stride, size=(64, 64)):
    """Re-render a heart-bearing sample with the heart moved by ``shift`` pixels.

    Returns the mean argmax-displacement error (feature cells) of ``channels``.
    """
    shift = tuple(int(v) for v in shift)
    if any(v % stride for v in shift):
        raise ValueError(f"shift {shift} is not a multiple of the feature stride {stride}")
    orig = generate_sample(spec, seed, size=size, heart_present=True)
    moved = generate_sample(spec, seed, size=size, heart_present=True, heart_shift=shift)
    a0, a1 = _activations(model, [orig.image, moved.image])
    return translation_error(a0, a1, [v // stride for v in shift], channels)


# -- evaluation report ---------------------------------------------------------

@dataclass
class EvalReport:
    domains: dict = field(default_factory=dict)
    probes: dict = field(default_factory=dict)
    meta: dict = field(default_factory=lambda: {"hd_unit": "pixels", "dice_unit": "percent"})

    def mean_dice(self, domain=None):
        doms = [domain] if domain else list(self.domains)
        vals = [self.domains[d]["dice_mean"] for d in doms if self.domains[d]["dice_mean"] is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self):
        return {"meta": self.meta, "domains": self.domains, "probes": self.probes}

    def to_json(self, path=None):
        text = json.dumps(_clean(self.to_dict()), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["domain", "class", "metric", "mean", "std", "n", "n_skipped"])
            for d, res in self.domains.items():
                for metric in ("dice", "hd"):
                    for cls, s in res[metric].items():
                        w.writerow([d, cls, metric, s["mean"], s["std"], s["n"], s["n_skipped"]])


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def predict_masks(model, samples, batch_size=16):
    preds = []
    dtype = next(model.parameters()).dtype if hasattr(model, "parameters") else torch.float32
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        x = torch.from_numpy(np.stack([s.image for s in chunk])[:, None].astype(np.float32))
        preds.append(harden_predictions(model.predict(x.to(dtype)).float()))
    return np.concatenate(preds)


def evaluate(model, domains, num_classes=3, probes=True, stride=None):
    """Metrics (and probes) for every ``{domain_id: [Sample]}`` entry."""
    report = EvalReport()
    arch = getattr(model, "arch", None)
    for d, samples in domains.items():
        if not samples:
            continue
        if arch is not None and tuple(samples[0].image.shape) != tuple(arch.input_size):
            raise IncompatibleCheckpoint(
                f"model expects {arch.input_size}, domain {d} has {samples[0].image.shape}")
        labeled = [s for s in samples if s.mask is not None]
        if getattr(model, "seg_head", True) is None:
            labeled = []
        pred = predict_masks(model, labeled) if labeled else []
        dice = np.array([dice_score(p, s.mask, num_classes) for p, s in zip(pred, labeled)])
        hd = np.array([hausdorff(p, s.mask, num_classes) for p, s in zip(pred, labeled)])
        dice = dice.reshape(-1, num_classes)
        hd = hd.reshape(-1, num_classes)
        res = {
            "n_samples": len(labeled),
            "dice": {CLASS_NAMES[k]: _summary(dice[:, k]) for k in range(num_classes)},
            "hd": {CLASS_NAMES[k]: _summary(hd[:, k]) for k in range(num_classes)},
        }
        cls_means = [res["dice"][c]["mean"] for c in CLASS_NAMES[:num_classes]]
        cls_means = [v for v in cls_means if v is not None]
        res["dice_mean"] = float(np.mean(cls_means)) if cls_means else None
        hd_means = [res["hd"][c]["mean"] for c in CLASS_NAMES[:num_classes]]
        hd_means = [v for v in hd_means if v is not None]
        res["hd_mean"] = float(np.mean(hd_means)) if hd_means else None
        report.domains[d] = res
        if probes and getattr(model, "activations", None) is not None and samples[0].factor_masks:
            report.probes[d] = run_probes(model, samples, stride or arch.feature_stride)
    return report


def run_probes(model, samples, stride, max_pairs=32):
    acts = np.concatenate([_activations(model, [s.image for s in samples[i:i + 16]])
                           for i in range(0, len(samples), 16)])
    matrix, assignment, factors = channel_match(acts, [s.factor_masks for s in samples])
    out = {"channel_match": matrix, "factors": factors, "assignment": assignment}
    hearts = [s for s in samples if s.factor_params.get("heart_present")]
    pairs = list(zip(hearts[0::2], hearts[1::2]))[:max_pairs]
    if pairs and "heart" in assignment:
        out["shared_factor_heart"] = shared_factor_probe(model, pairs, "heart", assignment, stride)
    return out


def evaluate_checkpoint(checkpoint, domains, split, probes=True):
    """Evaluate a checkpoint on the split's held-out target domain."""
    from .trainers import Checkpoint, load_checkpoint

    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    try:
        model = checkpoint.build_model()
    except (RuntimeError, KeyError) as exc:
        raise IncompatibleCheckpoint(str(exc)) from exc
    model.eval()
    target = {split.target_domain: split.target_samples(domains)}
    report = evaluate(model, target, checkpoint.config.arch.num_classes, probes=probes)
    report.meta.update({"setting": checkpoint.config.setting, "iteration": checkpoint.iteration,
                        "target_domain": split.target_domain})
    return report
