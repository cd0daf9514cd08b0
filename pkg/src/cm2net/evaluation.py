"""Uni-modal prediction, late fusion, Top-1 / Mean-1 metrics, and
feature export for external visualization."""

from __future__ import annotations

import numpy as np

from . import losses
from .models import ContinualState, EncoderStage
from .tensor import Tape, Tensor


def stage_scores(state: ContinualState, stage: EncoderStage, data, split):
    """N x C cosine scores of a (possibly in-training) stage on a split."""
    idx = data.indices(split)
    tape = Tape()
    obs = Tensor(data.observations[stage.modality_id][idx])
    v = stage.head(tape, stage.encoder(tape, obs))
    class_embeds = state.class_embeddings(tape)
    return losses.similarity_scores(v, class_embeds).data


def predict_unimodal(state: ContinualState, data, modality_id, split="test"):
    """Cosine of each sample's projected embedding against each class's
    projected text embedding, for a completed stage."""
    stage = state.stage_for(modality_id)
    return stage_scores(state, stage, data, split)


def late_fuse(score_list):
    """Elementwise arithmetic mean of per-modality score matrices."""
    if not score_list:
        raise ValueError("late_fuse needs at least one score matrix")
    shape = np.asarray(score_list[0]).shape
    for s in score_list:
        if np.asarray(s).shape != shape:
            raise ValueError(f"score shape mismatch: {np.asarray(s).shape} "
                             f"vs {shape}")
    return np.mean(np.stack([np.asarray(s) for s in score_list]), axis=0)


def _argmax_lowest(scores):
    # np.argmax already returns the lowest index on ties
    return np.argmax(scores, axis=1)


def top1(scores, targets):
    """Fraction of samples whose argmax class (lowest index on ties)
    equals the target."""
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    if scores.shape[0] == 0:
        raise ValueError("top1 on empty prediction set")
    return float(np.mean(_argmax_lowest(scores) == targets))


def mean1(scores, targets):
    """Unweighted mean of per-class recall over classes present in targets."""
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    if scores.shape[0] == 0:
        raise ValueError("mean1 on empty prediction set")
    pred = _argmax_lowest(scores)
    recalls = []
    for c in np.unique(targets):
        mask = targets == c
        recalls.append(np.mean(pred[mask] == c))
    return float(np.mean(recalls))


def per_class_recall(scores, targets, num_classes):
    """Recall per class; NaN for classes absent from targets."""
    pred = _argmax_lowest(np.asarray(scores))
    targets = np.asarray(targets)
    out = np.full(num_classes, np.nan)
    for c in range(num_classes):
        mask = targets == c
        if mask.any():
            out[c] = np.mean(pred[mask] == c)
    return out


def extract_features(state: ContinualState, data, modality_id, split="test"):
    """Frozen-stage feature vectors f_m for every sample of a split."""
    stage = state.stage_for(modality_id)
    idx = data.indices(split)
    obs = Tensor(data.observations[modality_id][idx])
    feats = stage.encoder(Tape(), obs)
    return idx, feats.data


def export_features(state: ContinualState, data, modality_id, path,
                    split="test"):
    """CSV export: sample_id,label,f0..f{d-1}, 17 significant digits, LF."""
    idx, feats = extract_features(state, data, modality_id, split)
    d = feats.shape[1]
    header = "sample_id,label," + ",".join(f"f{k}" for k in range(d))
    lines = [header]
    for row, i in enumerate(idx):
        vals = ",".join(f"{x:.17g}" for x in feats[row])
        lines.append(f"{i},{data.class_names[data.labels[i]]},{vals}")
    body = "\n".join(lines) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(body)
