"""Synthetic users, items and a retrieval -> exposure cascade.

Every candidate of every simulated request gets a ground-truth click
probability, and a sampled click label, whether or not it was
exposed. Training only uses the exposed labels. The remaining labels let
us measure ranking quality over the whole candidate set.

Conventions:

* ids start at 1; id 0 is reserved by the model for padding / unknowns.
* an item's slate context is the exposed set (minus the item itself). An
  unexposed item is labelled as if it had been shown next to the items
  that really were shown.
* requests are simulated in timestamp order so each user's click history
  grows causally.
"""
import hashlib
import json
import logging
import os
from dataclasses import dataclass, asdict, field

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class WorldConfig:
    n_users: int = 2000
    n_items: int = 10000
    latent_dim: int = 8
    synergy_gamma: float = 0.5
    noise_sigma: float = 0.3
    bias: float = -1.0
    # 4x stretches the unit-scale dot products so an oracle ranker reaches ~0.84 AUC
    affinity_scale: float = 4.0
    n_clusters: int = 20
    retrieval_pool: int = 500
    top_fraction: float = 0.7
    max_seq_len: int = 200
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_items", "latent_dim", "n_clusters", "retrieval_pool", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.synergy_gamma < 0 or self.noise_sigma < 0 or self.affinity_scale < 0:
            raise ValueError("synergy_gamma, noise_sigma and affinity_scale must be >= 0")
        if not 0.0 <= self.top_fraction <= 1.0:
            raise ValueError("top_fraction must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


@dataclass
class World:
    config: WorldConfig
    user_latents: np.ndarray   # (n_users + 1) x L, row 0 unused
    item_latents: np.ndarray   # (n_items + 1) x L, row 0 unused
    clusters: np.ndarray       # n_items + 1, entry 0 is -1

    @property
    def n_users(self):
        return self.config.n_users

    @property
    def n_items(self):
        return self.config.n_items


@dataclass
class Request:
    request_id: int
    user_id: int
    behavior: list
    candidates: list
    exposed_idx: list
    clicks: list
    eval_labels: list = None
    true_ctr: list = None

    def to_json(self):
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: data.get(k) for k in cls.__dataclass_fields__})

    @property
    def exposed_mask(self):
        mask = np.zeros(len(self.candidates), dtype=bool)
        mask[self.exposed_idx] = True
        return mask


def generate_world(config):
    rng = np.random.default_rng([config.seed, 0])
    L = config.latent_dim
    users = np.zeros((config.n_users + 1, L))
    items = np.zeros((config.n_items + 1, L))
    users[1:] = rng.standard_normal((config.n_users, L)) / np.sqrt(L)
    items[1:] = rng.standard_normal((config.n_items, L)) / np.sqrt(L)
    clusters = np.concatenate(([-1], np.arange(config.n_items) % config.n_clusters))
    return World(config, users, items, clusters)


def synergy(world, items, slate):
    """Slate-context term for each item in ``items``.

    With c other slate items in the same cluster the term is
    ``min(c, 3)/3 - min(max(c - 3, 0), 3)/3``: it rises for small
    same-cluster groups and falls again once the group saturates.
    """
    items = np.asarray(items, dtype=np.int64)
    slate = np.asarray(slate, dtype=np.int64)
    if slate.size == 0:
        return np.zeros(items.shape)
    same = world.clusters[items][:, None] == world.clusters[slate][None, :]
    # an item never pairs with its own appearance in the slate
    same &= items[:, None] != slate[None, :]
    c = same.sum(axis=1)
    return np.minimum(c, 3) / 3.0 - np.minimum(np.maximum(c - 3, 0), 3) / 3.0


def _check_ids(world, user_id, items):
    if not 1 <= user_id <= world.n_users:
        raise ValueError(f"user id {user_id} outside [1, {world.n_users}]")
    items = np.asarray(items, dtype=np.int64)
    if items.size and (items.min() < 1 or items.max() > world.n_items):
        raise ValueError(f"item ids must lie in [1, {world.n_items}]")
    return items


def true_logit(world, user_id, items, slate=(), gamma=None):
    items = _check_ids(world, user_id, np.atleast_1d(items))
    _check_ids(world, user_id, slate)
    cfg = world.config
    gamma = cfg.synergy_gamma if gamma is None else gamma
    affinity = world.item_latents[items] @ world.user_latents[user_id]
    return cfg.affinity_scale * affinity + gamma * synergy(world, items, slate) + cfg.bias


def true_ctr(world, user_id, item_id, slate=(), gamma=None):
    """sigmoid(scale * <u, v> + gamma * synergy + bias); vectorised over ``item_id``."""
    p = 1.0 / (1.0 + np.exp(-true_logit(world, user_id, item_id, slate, gamma)))
    return float(p[0]) if np.ndim(item_id) == 0 else p


def simulate_request(world, user_id, m, k, policy="noisy_oracle", seed=0, behavior=(), request_id=0):
    """One pass through retrieval, exposure and click sampling.

    Retrieval: ``round(top_fraction * m)`` items drawn from the user's
    ``retrieval_pool`` best items by dot product, the rest uniformly from
    the remaining catalogue. Exposure (``noisy_oracle``): top-k by
    slate-free true logit plus N(0, noise_sigma) noise; ``uniform`` picks
    a random k-subset.
    """
    cfg = world.config
    if m > world.n_items:
        raise ValueError(f"m={m} candidates requested from a catalogue of {world.n_items} items")
    if not 1 <= k <= m:
        raise ValueError(f"need 1 <= k <= m (k={k}, m={m})")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    scores = world.item_latents[1:] @ world.user_latents[user_id]
    n_top = int(round(cfg.top_fraction * m))
    pool = min(max(cfg.retrieval_pool, n_top), world.n_items)
    if n_top:
        top = np.argpartition(-scores, pool - 1)[:pool] if pool < world.n_items else np.arange(world.n_items)
        top_pick = rng.choice(top, size=n_top, replace=False)
    else:
        top_pick = np.empty(0, dtype=np.int64)
    n_rand = m - n_top
    if n_rand:
        taken = np.zeros(world.n_items, dtype=bool)
        taken[top_pick] = True
        rand_pick = rng.choice(np.flatnonzero(~taken), size=n_rand, replace=False)
    else:
        rand_pick = np.empty(0, dtype=np.int64)
    candidates = np.concatenate([top_pick, rand_pick]) + 1
    candidates = candidates[rng.permutation(m)]

    if policy == "noisy_oracle":
        rank_score = true_logit(world, user_id, candidates) + rng.normal(0.0, cfg.noise_sigma, size=m)
        exposed = np.sort(np.argsort(-rank_score, kind="stable")[:k])
    elif policy == "uniform":
        exposed = np.sort(rng.choice(m, size=k, replace=False))
    else:
        raise ValueError(f"unknown exposure policy {policy!r}")

    slate = candidates[exposed]
    p = true_ctr(world, user_id, candidates, slate)
    labels = (rng.random(m) < p).astype(int)
    return Request(
        request_id=int(request_id),
        user_id=int(user_id),
        behavior=[int(x) for x in list(behavior)[-cfg.max_seq_len:]],
        candidates=[int(x) for x in candidates],
        exposed_idx=[int(x) for x in exposed],
        clicks=[int(x) for x in labels[exposed]],
        eval_labels=[int(x) for x in labels],
        true_ctr=[float(x) for x in p],
    )


def simulate_requests(world, n_requests, m, k, seed=0, policy="noisy_oracle"):
    """Simulate ``n_requests`` in timestamp order; users drawn uniformly at random.

    Each user's stream uses its own generator seeded by
    (seed, user_id, visit number), so per-user output does not depend on
    how other users' requests interleave.
    """
    order_rng = np.random.default_rng([seed, 1])
    users = order_rng.integers(1, world.n_users + 1, size=n_requests)
    histories = {}
    visits = {}
    out = []
    for rid, user in enumerate(users):
        user = int(user)
        visit = visits.get(user, 0)
        visits[user] = visit + 1
        hist = histories.setdefault(user, [])
        rng = np.random.default_rng([seed, 2, user, visit])
        req = simulate_request(world, user, m, k, policy=policy, seed=rng, behavior=hist, request_id=rid)
        hist.extend(req.candidates[i] for i, c in zip(req.exposed_idx, req.clicks) if c)
        del hist[:-world.config.max_seq_len]
        out.append(req)
    return out


def split_requests(requests, fractions, seed=0):
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(requests)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    perm = np.random.default_rng([seed, 3]).permutation(n)
    parts = np.split(perm, [n_train, n_train + n_val])
    return {name: [requests[i] for i in np.sort(idx)] for name, idx in zip(SPLITS, parts)}


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def emit_dataset(world, n_requests, m, k, fractions=(0.8, 0.1, 0.1), seed=0, out_dir=".",
                 policy="noisy_oracle", data_subdir=""):
    """Write train/val/test JSONL plus ``manifest.json``; returns the manifest dict.

    Split files go to ``out_dir/data_subdir``; the manifest sits in
    ``out_dir`` and records paths relative to it.

    Every record carries ``eval_labels``/``true_ctr``. In train and val
    they are held out: the training code never reads them (the manifest
    lists them under ``heldout_fields``).
    """
    requests = simulate_requests(world, n_requests, m, k, seed=seed, policy=policy)
    splits = split_requests(requests, fractions, seed=seed)
    os.makedirs(os.path.join(out_dir, data_subdir), exist_ok=True)
    files = {}
    for name in SPLITS:
        rel = f"{data_subdir}/{name}.jsonl" if data_subdir else f"{name}.jsonl"
        path = os.path.join(out_dir, rel)
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                for req in splits[name]:
                    fh.write(req.to_json() + "\n")
        except OSError as exc:
            raise OSError(f"failed writing dataset split {path}: {exc}") from exc
        files[name] = {"path": rel, "count": len(splits[name]), "sha256": _sha256(path),
                       "heldout_fields": ["eval_labels", "true_ctr"] if name != "test" else []}
    combined = hashlib.sha256("".join(files[s]["sha256"] for s in SPLITS).encode()).hexdigest()
    manifest = {
        "format": "duet-requests/1",
        "world": world.config.to_dict(),
        "n_requests": n_requests,
        "m": m,
        "k": k,
        "policy": policy,
        "seed": seed,
        "fractions": list(fractions),
        "splits": files,
        "checksum": combined,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_requests(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return [Request.from_dict(json.loads(line)) for line in fh if line.strip()]
    except OSError as exc:
        raise OSError(f"cannot read dataset file {path}: {exc}") from exc


def load_dataset(directory):
    """Returns ``(manifest, {split: [Request, ...]})``."""
    mpath = os.path.join(directory, "manifest.json")
    try:
        with open(mpath, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read dataset manifest {mpath}: {exc}") from exc
    data = {s: load_requests(os.path.join(directory, manifest["splits"][s]["path"])) for s in SPLITS}
    return manifest, data
