"""Experiment plumbing: config resolution, dataset preparation, training runs.

A config is one JSON document. Missing keys take the defaults below, unknown
keys are rejected, and ``resolve_config`` returns the fully populated
document that every command writes next to its outputs.
"""
import copy
import json
import logging
import os
import time

import numpy as np

from . import checkpoint
from . import cotrain as C
from . import metrics as E
from . import model as M
from . import sim
from .attention import linear_attention, naive_kernel_attention

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 10.0)
VARIANTS = ("full", "no_set", "no_co", "no_kl")


class ConfigError(ValueError):
    """The experiment config is malformed."""


class MissingInputError(FileNotFoundError):
    """A command needs a file that does not exist."""


def _model_defaults():
    cfg = M.ModelConfig(n_items=1, n_users=1).to_dict()
    del cfg["n_items"], cfg["n_users"]   # derived from the world
    cfg["dtype"] = "float32"
    return cfg


DEFAULTS = {
    "world": sim.WorldConfig().to_dict(),
    "data": {"n_requests": 50000, "m": 50, "k": 5, "fractions": [0.8, 0.1, 0.1], "seed": 1,
             "policy": "noisy_oracle", "dir": None},
    "model": _model_defaults(),
    "train": C.TrainHyper().to_dict(),
    "eval": {"weighting": "uniform", "checkpoint": None},
    "seeds": [0],
    "variants": list(VARIANTS),
    "lambda_grid": list(LAMBDA_GRID),
    "bench": {"sizes": [512, 1024, 2048, 4096], "dim": 64, "trials": 5, "seed": 0},
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and value is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(user=None, seed=None, variant=None, lam=None):
    """Defaults <- user document <- command-line overrides; validated."""
    if user is None:
        user = {}
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, user)
    if seed is not None:
        cfg["seeds"] = [int(seed)]
    if variant is not None:
        cfg["train"]["ablation"] = variant
    if lam is not None:
        cfg["train"]["lam"] = float(lam)
    try:
        world_config(cfg)
        model_config(cfg)
        train_hyper(cfg, cfg["seeds"][0] if cfg["seeds"] else 0)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not cfg["seeds"]:
        raise ConfigError("seeds must list at least one seed")
    bad = set(cfg["variants"]) - set(VARIANTS)
    if bad:
        raise ConfigError(f"unknown variants {sorted(bad)}")
    if cfg["eval"]["weighting"] not in ("uniform", "impression"):
        raise ConfigError("eval.weighting must be 'uniform' or 'impression'")
    return cfg


def load_config(path, **overrides):
    if path is None:
        return resolve_config({}, **overrides)
    if not os.path.exists(path):
        raise MissingInputError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            user = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return resolve_config(user, **overrides)


def world_config(cfg):
    return sim.WorldConfig(**cfg["world"])


def model_config(cfg):
    w = cfg["world"]
    return M.ModelConfig(n_items=w["n_items"] + 1, n_users=w["n_users"] + 1, **cfg["model"])


def train_hyper(cfg, seed, **changes):
    data = dict(cfg["train"], seed=seed)
    data.update(changes)
    return C.TrainHyper(**data)


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- data -----------------------------------------------------------------------

def simulate(cfg, out_dir=None):
    """Simulate the configured dataset; returns ``(manifest or None, splits)``.

    With ``out_dir`` the splits are written under ``out_dir/data`` and the
    manifest to ``out_dir/manifest.json``, then read back from disk so
    every consumer sees exactly the bytes that were written.
    """
    d = cfg["data"]
    world = sim.generate_world(world_config(cfg))
    if out_dir is None:
        reqs = sim.simulate_requests(world, d["n_requests"], d["m"], d["k"], seed=d["seed"], policy=d["policy"])
        return None, sim.split_requests(reqs, d["fractions"], seed=d["seed"])
    sim.emit_dataset(world, d["n_requests"], d["m"], d["k"], fractions=d["fractions"], seed=d["seed"],
                     out_dir=out_dir, policy=d["policy"], data_subdir="data")
    return sim.load_dataset(out_dir)


def prepare_data(cfg, out_dir):
    """Use ``data.dir`` when set, otherwise simulate into ``out_dir``."""
    if cfg["data"]["dir"]:
        src = cfg["data"]["dir"]
        if not os.path.exists(os.path.join(src, "manifest.json")):
            raise MissingInputError(f"no dataset manifest in {src}")
        return sim.load_dataset(src)
    return simulate(cfg, out_dir)


# -- training -------------------------------------------------------------------

def _json_record(rec):
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def score_models(state, split, pointwise, ids=None):
    if ids is None:
        ids = M.encode_requests(split, state.params_a.config)
    return M.predict(state.params_a, ids, pointwise), M.predict(state.params_b, ids, pointwise)


def run_training(cfg, splits, variant, lam, seed, out_dir=None, encoded=None):
    """Train one dual pair and evaluate it on the test split.

    The model that scores higher on the validation split (exposed clicks
    only) is the one reported. Returns ``(row, records, state)`` where
    ``row`` is a flat dict of evaluation results.
    """
    mc = model_config(cfg)
    hyper = train_hyper(cfg, seed, ablation=variant, lam=lam)
    pointwise = variant == "no_set"
    weighting = cfg["eval"]["weighting"]
    if encoded is None:
        encoded = encode_splits(splits, mc)
    data = encoded["train"]

    def hook(state):
        out = {}
        for name, p in (("a", state.params_a), ("b", state.params_b)):
            rec = E.evaluate_entire_space(p, splits["val"], "exposed", pointwise, ids=encoded["val"],
                                          weighting=weighting)
            out[f"auc_{name}"] = rec.auc_exposed
        return out

    state = C.DualState.init(mc, 2 * seed + 1, 2 * seed + 2)
    log_fh = open(os.path.join(out_dir, "train.jsonl"), "w", encoding="utf-8", newline="\n") if out_dir else None
    try:
        state, records, best = C.train(
            state, data, hyper, hook,
            on_record=(lambda r: log_fh.write(_json_record(r) + "\n")) if log_fh else None)
    finally:
        if log_fh:
            log_fh.close()

    test = splits["test"]
    y_a, y_b = score_models(state, test, pointwise, ids=encoded["test"])
    chosen = y_a if best == "a" else y_b
    labels = np.array([r.eval_labels for r in test]).ravel()
    ent = E.evaluate_scores(chosen, test, "entire", weighting)
    exp = E.evaluate_scores(chosen, test, "exposed", weighting)
    row = {
        "variant": variant, "lambda": lam, "seed": seed, "best": best,
        "auc_entire": ent.auc_entire, "uauc_entire": ent.uauc,
        "auc_exposed": exp.auc_exposed, "uauc_exposed": exp.uauc,
        "n_valid_users": ent.n_valid_users, "n_users": ent.n_users,
        "auc_entire_a": E.auc(y_a.ravel(), labels),
        "auc_entire_b": E.auc(y_b.ravel(), labels),
        "val_auc_a": records[-1]["auc_a"], "val_auc_b": records[-1]["auc_b"],
        "gap": float(np.mean(np.abs(y_a.astype(np.float64) - y_b.astype(np.float64)))),
        "steps": state.step,
    }
    if out_dir:
        checkpoint.save(os.path.join(out_dir, "model_a.ckpt"), state.params_a)
        checkpoint.save(os.path.join(out_dir, "model_b.ckpt"), state.params_b)
        write_json(os.path.join(out_dir, "metrics.json"), {"kind": "single", "rows": [row]})
    return row, records, state


def encode_splits(splits, mc):
    return {
        "train": C.make_train_data(splits["train"], mc),
        "val": M.encode_requests(splits["val"], mc),
        "test": M.encode_requests(splits["test"], mc),
    }


def average_rows(rows, key):
    """Mean of numeric fields across seeds, grouped by ``key``; keeps first-seen order."""
    groups = {}
    for row in rows:
        groups.setdefault(row[key], []).append(row)
    out = []
    for label, members in groups.items():
        agg = {key: label, "seeds": [r["seed"] for r in members]}
        for field in ("auc_entire", "uauc_entire", "auc_exposed", "uauc_exposed", "gap", "lambda"):
            agg[field] = float(np.mean([r[field] for r in members]))
        agg["variant"] = members[0]["variant"]
        out.append(agg)
    return out


def run_ablation(cfg, splits, out_dir=None, seeds=None):
    """Every variant on the same data and seeds; returns ``(summary_rows, runs)``."""
    seeds = cfg["seeds"] if seeds is None else seeds
    mc = model_config(cfg)
    encoded = encode_splits(splits, mc)
    runs = []
    for variant in cfg["variants"]:
        for seed in seeds:
            sub = _subdir(out_dir, variant, seed)
            row, _, _ = run_training(cfg, splits, variant, cfg["train"]["lam"], seed, sub, encoded)
            runs.append(row)
    summary = average_rows(runs, "variant")
    if out_dir:
        write_json(os.path.join(out_dir, "metrics.json"), {"kind": "ablation", "rows": summary, "runs": runs})
    return summary, runs


def run_sweep(cfg, splits, out_dir=None, seeds=None, baseline=True):
    """Full DUET over the lambda grid, plus an exposed-only baseline row per seed."""
    seeds = cfg["seeds"] if seeds is None else seeds
    mc = model_config(cfg)
    encoded = encode_splits(splits, mc)
    variant = cfg["train"]["ablation"]
    runs = []
    for lam in sorted(cfg["lambda_grid"]):
        for seed in seeds:
            row, _, _ = run_training(cfg, splits, variant, float(lam), seed,
                                     _subdir(out_dir, f"lambda_{lam:g}", seed), encoded)
            runs.append(row)
    summary = average_rows(runs, "lambda")
    if baseline:
        base_runs = [run_training(cfg, splits, "no_co", cfg["train"]["lam"], seed,
                                  _subdir(out_dir, "no_co", seed), encoded)[0] for seed in seeds]
        base = average_rows(base_runs, "variant")[0]
        base["baseline"] = True
        summary.append(base)
        runs.extend(base_runs)
    if out_dir:
        write_json(os.path.join(out_dir, "metrics.json"), {"kind": "sweep", "rows": summary, "runs": runs})
    return summary, runs


def _subdir(out_dir, label, seed):
    if out_dir is None:
        return None
    path = os.path.join(out_dir, label, f"seed{seed}")
    os.makedirs(path, exist_ok=True)
    return path


def evaluate_checkpoint(cfg, params, splits, pointwise=False):
    test = splits["test"]
    w = cfg["eval"]["weighting"]
    ent = E.evaluate_entire_space(params, test, "entire", pointwise, weighting=w)
    exp = E.evaluate_entire_space(params, test, "exposed", pointwise, weighting=w)
    return {"variant": cfg["train"]["ablation"], "lambda": cfg["train"]["lam"],
            "auc_entire": ent.auc_entire, "uauc_entire": ent.uauc,
            "auc_exposed": exp.auc_exposed, "uauc_exposed": exp.uauc,
            "n_valid_users": ent.n_valid_users, "n_users": ent.n_users}


# -- attention benchmark --------------------------------------------------------

def bench_attention(sizes=(512, 1024, 2048, 4096), dim=64, trials=5, seed=0):
    """Median wall time of both attention implementations at m = n = size."""
    rng = np.random.default_rng(seed)
    # warm up any jit compilation outside the timed region
    q = rng.standard_normal((8, dim))
    naive_kernel_attention(q, q, q)
    linear_attention(q, q, q)
    rows = []
    for n in sizes:
        q, k, v = (rng.standard_normal((n, dim)) for _ in range(3))
        for impl, fn in (("linear", linear_attention), ("naive", naive_kernel_attention)):
            times = []
            for _ in range(trials):
                t0 = time.perf_counter()
                fn(q, k, v)
                times.append(time.perf_counter() - t0)
            rows.append({"impl": impl, "n": n, "dim": dim, "trials": trials,
                         "median_seconds": float(np.median(times))})
    return rows


def timing_ratio(rows, impl):
    t = {r["n"]: r["median_seconds"] for r in rows if r["impl"] == impl}
    return t[max(t)] / t[min(t)]
