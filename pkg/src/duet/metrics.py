"""AUC, user-level AUC, RelaImpr and the two evaluation protocols.

``entire`` mode scores every candidate of a request against its sampled
entire-space label; ``exposed`` mode scores only exposed candidates
against their clicks. AUC pools all (score, label) pairs; UAUC groups by
user and averages over users that have both classes.
"""
from collections import defaultdict
from dataclasses import dataclass, asdict

import numpy as np

from . import model as M
from .kernels import rank_sum_auc


class SingleClassError(ValueError):
    """AUC is undefined: the labels contain only one class."""


@dataclass
class MetricsRecord:
    auc_entire: float = None
    auc_exposed: float = None
    uauc: float = None
    n_valid_users: int = 0
    n_users: int = 0
    rela_impr_vs_base: float = None
    mode: str = None

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


def auc(scores, labels):
    """P(random positive outranks random negative), ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores vs {labels.size} labels")
    n_pos = int((labels > 0).sum())
    if n_pos == 0 or n_pos == labels.size:
        raise SingleClassError("AUC needs at least one positive and one negative label")
    return rank_sum_auc(scores, labels > 0)


def uauc(groups, weighting="uniform"):
    """Mean per-user AUC over users with both classes; returns ``(value, n_valid)``.

    ``groups`` maps user -> (scores, labels). ``weighting="impression"``
    weights each user's AUC by its number of scored items.
    """
    vals, weights = [], []
    for scores, labels in groups.values():
        labels = np.asarray(labels)
        if labels.size == 0 or labels.min() == labels.max():
            continue
        vals.append(auc(scores, labels))
        weights.append(labels.size if weighting == "impression" else 1.0)
    if not vals:
        raise SingleClassError("no user has both positive and negative labels")
    if weighting not in ("uniform", "impression"):
        raise ValueError(f"unknown UAUC weighting {weighting!r}")
    return float(np.average(vals, weights=weights)), len(vals)


def rela_impr(auc_measured, auc_base):
    """((measured - 0.5) / (base - 0.5) - 1) * 100, in percent."""
    if auc_base == 0.5:
        raise ZeroDivisionError("RelaImpr is undefined for a base AUC of exactly 0.5")
    return ((auc_measured - 0.5) / (auc_base - 0.5) - 1.0) * 100.0


def score_pairs(scores_per_request, requests, mode):
    """Flatten ``(user, score, label)`` triples for either protocol."""
    users, scores, labels = [], [], []
    for s, r in zip(scores_per_request, requests):
        if mode == "entire":
            if r.eval_labels is None:
                raise ValueError(f"request {r.request_id} has no eval_labels; entire-space mode needs them")
            scores.append(np.asarray(s, dtype=np.float64))
            labels.append(np.asarray(r.eval_labels))
        elif mode == "exposed":
            scores.append(np.asarray(s, dtype=np.float64)[r.exposed_idx])
            labels.append(np.asarray(r.clicks))
        else:
            raise ValueError(f"unknown evaluation mode {mode!r}")
        users.append(np.full(labels[-1].size, r.user_id))
    return np.concatenate(users), np.concatenate(scores), np.concatenate(labels)


def evaluate_scores(scores_per_request, requests, mode="entire", weighting="uniform"):
    users, s, y = score_pairs(scores_per_request, requests, mode)
    groups = defaultdict(lambda: ([], []))
    order = np.argsort(users, kind="stable")
    bounds = np.flatnonzero(np.diff(users[order])) + 1
    for chunk in np.split(order, bounds):
        groups[int(users[chunk[0]])] = (s[chunk], y[chunk])
    value, n_valid = uauc(groups, weighting)
    rec = MetricsRecord(uauc=value, n_valid_users=n_valid, n_users=len(groups), mode=mode)
    if mode == "entire":
        rec.auc_entire = auc(s, y)
    else:
        rec.auc_exposed = auc(s, y)
    return rec


def evaluate_entire_space(params, requests, mode="entire", pointwise=False, ids=None, weighting="uniform"):
    """Score requests with ``params`` and evaluate them under ``mode``."""
    if ids is None:
        ids = M.encode_requests(requests, params.config)
    scores = M.predict(params, ids, pointwise=pointwise)
    return evaluate_scores(scores, requests, mode, weighting)
