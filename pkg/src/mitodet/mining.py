"""Hard-negative mining, bootstrap ensembles and knowledge distillation."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AllZeroScores, EmptyEnsemble
from .nn import (ModelParams, PatchDataset, TrainConfig, build_network, center_crop, forward,
                 prepare_input, train)


@dataclass(frozen=True)
class MiningConfig:
    n_easy_negatives: int = 1000
    n_hard_negatives: int = 1000
    proportional: bool = True

    def __post_init__(self):
        if self.n_easy_negatives < 1 or self.n_hard_negatives < 1:
            raise ValueError("negative counts must be >= 1")


@dataclass
class EnsembleModel:
    members: list
    master_seed: int = 0
    workers: int = 1

    @property
    def spec(self):
        return self.members[0].spec if self.members else None


def hard_negative_sample(scores, n: int, rng: np.random.Generator) -> np.ndarray:
    """n indices drawn with replacement, P(i) proportional to scores[i]."""
    s = np.asarray(scores, dtype=np.float64)
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite and non-negative")
    total = s.sum()
    if total <= 0:
        raise AllZeroScores("at least one score must be positive")
    return rng.choice(len(s), size=n, replace=True, p=s / total)


def uniform_negative_sample(n_negatives: int, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n_negatives, size=min(n, n_negatives), replace=False)


def member_seeds(master_seed: int, k: int) -> list[int]:
    """Independent per-member seeds split from one master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master_seed).spawn(k)]


def build_bootstrap_datasets(n_positives: int, scores, k: int, n: int, master_seed: int):
    """k (positive indices, negative indices) pairs: every positive once plus n
    score-proportional negatives drawn with replacement, one seed per dataset."""
    out = []
    for seed in member_seeds(master_seed, k):
        neg = hard_negative_sample(scores, n, np.random.default_rng(seed))
        out.append((np.arange(n_positives), neg))
    return out


def model_forward(model, x) -> np.ndarray:
    """Forward for a single network or an ensemble (mean of member softmax)."""
    if isinstance(model, EnsembleModel):
        return ensemble_predict(model, x)
    return forward(model, x)


def ensemble_predict(e: EnsembleModel, x) -> np.ndarray:
    if not e.members:
        raise EmptyEnsemble("ensemble has no members")
    if e.workers > 1 and len(e.members) > 1:
        with ThreadPoolExecutor(max_workers=e.workers) as pool:
            outs = list(pool.map(lambda m: forward(m, x), e.members))
    else:
        outs = [forward(m, x) for m in e.members]
    acc = np.zeros_like(outs[0], dtype=np.float64)
    for o in outs:
        acc += o
    return (acc / len(outs)).astype(outs[0].dtype)


def soft_targets(e, patches, batch: int = 256) -> np.ndarray:
    """(p_background, p_mitosis) of the ensemble on center-cropped patches."""
    size = e.spec.input_size
    out = []
    for i in range(0, len(patches), batch):
        x = prepare_input(center_crop(np.asarray(patches[i : i + batch]), size))
        out.append(model_forward(e, x)[:, 0, 0, :].astype(np.float64))
    t = np.concatenate(out)
    return t / t.sum(axis=1, keepdims=True)


def distill(e: EnsembleModel, train_set: PatchDataset, val_set: PatchDataset, student_gamma: float,
            cfg: TrainConfig, augment_cfg=None, on_epoch=None, val_fn=None) -> ModelParams:
    """Train a gamma-scaled student on the ensemble's averaged probabilities.

    Hard labels in ``train_set`` only drive batch balancing; validation
    checkpointing uses hard-label F1.
    """
    if len(train_set) == 0:
        raise ValueError("no patches to distill on")
    soft = PatchDataset(train_set.patches, train_set.labels, soft_targets(e, train_set.patches))
    return train(soft, val_set, build_network(student_gamma), cfg, augment_cfg, on_epoch=on_epoch, val_fn=val_fn)


def write_manifest(path, member_paths, master_seed: int) -> None:
    lines = [f"k = {len(member_paths)}", f"master_seed = {master_seed}"]
    lines += [f"member = {p}" for p in member_paths]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    """(member paths, master seed); relative member paths resolve against the manifest."""
    base = Path(path).parent
    members, k, seed = [], None, 0
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, _, value = (s.strip() for s in line.partition("="))
        if key == "k":
            k = int(value)
        elif key == "master_seed":
            seed = int(value)
        elif key == "member":
            p = Path(value)
            members.append(p if p.is_absolute() else base / p)
        else:
            raise ValueError(f"unknown manifest key {key!r}")
    if k is not None and k != len(members):
        raise ValueError(f"manifest declares k={k} but lists {len(members)} members")
    return members, seed


def load_ensemble(path, workers: int = 1) -> EnsembleModel:
    from .modelio import load_model

    paths, seed = read_manifest(path)
    return EnsembleModel([load_model(p) for p in paths], seed, workers)
