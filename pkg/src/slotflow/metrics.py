"""Evaluation metrics: identity probes, routing summaries, conditioning gaps."""

from dataclasses import dataclass

import numpy as np
import torch

from . import data as data_mod
from .rng import derive_seed, substream


L2_GRID = tuple(10.0 ** k for k in range(-3, 5))


def _loo_l2(U: np.ndarray, s: np.ndarray, Yc: np.ndarray, grid=L2_GRID) -> float:
    """Ridge strength minimizing leave-one-out squared error on the train split."""
    UtY = U.T @ Yc
    best_l2, best_err = grid[0], np.inf
    for lam in grid:
        shrink = s ** 2 / (s ** 2 + lam)
        fitted = U @ (shrink[:, None] * UtY)
        h = np.minimum((U ** 2 @ shrink), 1.0 - 1e-9)
        err = float((((Yc - fitted) / (1.0 - h)[:, None]) ** 2).sum())
        if err < best_err:
            best_l2, best_err = lam, err
    return best_l2


def ridge_r2(features: np.ndarray, targets: np.ndarray, train_frac: float = 0.5,
             l2: float | None = None) -> np.ndarray:
    """Held-out R-squared per target dimension for a ridge linear probe.

    When l2 is None the strength is chosen by leave-one-out cross validation
    on the training split (closed form via the ridge hat matrix).
    """
    n = len(features)
    n_train = max(2, int(n * train_frac))
    X, Y = np.asarray(features, float), np.asarray(targets, float)
    mu, sd = X[:n_train].mean(0), X[:n_train].std(0) + 1e-9
    Xn = (X - mu) / sd
    y_mu = Y[:n_train].mean(0)
    Yc = Y[:n_train] - y_mu
    if l2 is None:
        U, s, _ = np.linalg.svd(Xn[:n_train], full_matrices=False)
        l2 = _loo_l2(U, s, Yc)
    A = np.linalg.solve(Xn[:n_train].T @ Xn[:n_train] + l2 * np.eye(X.shape[1]),
                        Xn[:n_train].T @ Yc)
    pred = Xn[n_train:] @ A + y_mu
    resid = ((pred - Y[n_train:]) ** 2).sum(0)
    total = ((Y[n_train:] - Y[:n_train].mean(0)) ** 2).sum(0)
    return 1.0 - resid / np.maximum(total, 1e-12)


def identity_probe(slot_sets, identities, train_frac: float = 0.5,
                   l2: float | None = None) -> dict:
    """Ridge probe from flattened identity slots to the true identity codes."""
    X = np.asarray(slot_sets, float).reshape(len(slot_sets), -1)
    r2 = ridge_r2(X, identities, train_frac, l2)
    return {"r2": r2, "mean_r2": float(r2.mean())}


def encode_dataset(model, dataset: data_mod.ClipDataset, step: int = 0,
                   reference_mode: str = "ordered", seed: int = 0,
                   dtype=torch.float32):
    """Identity slots and ground-truth codes for every clip in the dataset."""
    rng = substream(seed, "encode-dataset")
    feats, ids = [], []
    with torch.no_grad():
        for rec in dataset.records:
            z = data_mod.reference_latents(rec, dataset, reference_mode, rng)
            slots, _, _ = model.encoder(z[None].to(dtype), step)
            feats.append(slots[0].cpu().numpy())
            ids.append(rec.clip.identity.values)
    return np.array(feats), np.array(ids)


def routing_report(history: list) -> dict:
    """Summarize the routing metrics stream from a training run."""
    ent = [h["slot_entropy"] for h in history if "slot_entropy" in h]
    res = [h["marginal_residual"] for h in history if "marginal_residual" in h]
    if not ent:
        return {"available": False}
    return {
        "available": True,
        "entropy_first": ent[0],
        "entropy_last": ent[-1],
        "entropy_last_mean100": float(np.mean(ent[-100:])),
        "max_marginal_residual": float(np.max(res)),
        "n_steps": len(ent),
    }


@dataclass
class GapStats:
    gaps: np.ndarray

    @property
    def mean(self):
        return float(self.gaps.mean())

    @property
    def stderr(self):
        return float(self.gaps.std(ddof=1) / np.sqrt(len(self.gaps)))

    @property
    def n(self):
        return len(self.gaps)

    def to_record(self):
        return {"mean_gap": self.mean, "stderr": self.stderr, "n_pairs": self.n,
                "significant": bool(self.mean > 3 * self.stderr)}


def matched_vs_mismatched(pair_loss_fn, identity_pairs) -> GapStats:
    """Gap statistics over identity pairs.

    pair_loss_fn(identity_a, identity_b) must return (matched_loss,
    mismatched_loss) for a target of identity_a referenced by identity_a
    vs identity_b, evaluated on identical noise.
    """
    gaps = []
    for a, b in identity_pairs:
        matched, mismatched = pair_loss_fn(a, b)
        gaps.append(mismatched - matched)
    return GapStats(np.array(gaps, float))


def model_identity_gap(model, dataset: data_mod.ClipDataset, n_pairs: int = 20,
                       seed: int = 0, step: int = 10 ** 6,
                       dtype=torch.float32) -> GapStats:
    """Held-out denoising loss gap: correct reference vs wrong-identity reference."""
    from .training import flow_matching_loss, make_flow_sample

    identities = sorted(dataset.by_identity)
    if len(identities) < 2:
        raise ValueError("need at least two identities")
    rng = substream(seed, "identity-gap")

    def clip_of(ident, exclude=None):
        idxs = [i for i in dataset.by_identity[ident] if i != exclude]
        return idxs[int(rng.integers(len(idxs)))]

    def pair_loss(a, b):
        t_idx = clip_of(a)
        target = dataset.records[t_idx]
        matched_ref = dataset.records[clip_of(a, exclude=t_idx)]
        mismatched_ref = dataset.records[clip_of(b)]
        gen = torch.Generator().manual_seed(derive_seed(seed, f"gap/{a}/{b}"))
        sample = make_flow_sample(target.latents[None].to(dtype), gen)
        losses = []
        with torch.no_grad():
            for ref in (matched_ref, mismatched_ref):
                v_pred, _ = model(sample.z_t, sample.t, ref.latents[None].to(dtype),
                                  ref.anchor_latents[None].to(dtype),
                                  target.text_ids[None], step=step, training=False)
                losses.append(flow_matching_loss(v_pred, sample.v_star).item())
        return losses[0], losses[1]

    pairs = []
    for _ in range(n_pairs):
        a, b = rng.choice(len(identities), size=2, replace=False)
        pairs.append((identities[int(a)], identities[int(b)]))
    return matched_vs_mismatched(pair_loss, pairs)
