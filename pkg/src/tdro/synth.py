"""Synthetic interaction data with a controlled temporal feature shift.

Items belong to latent concepts (unit-norm Gaussian centroids); an item's
feature vector is its concept centroid plus isotropic noise. Interactions
arrive in periods. Within a period a uniform random user draws a concept
from that period's mixture and then an item of that concept, softmax-biased
by the user's static preference vector, so user tastes stay fixed while the
concept mixture drifts.

The drift moves probability mass linearly from a dominant concept (0) to a
rising concept (1): period 0 puts ``(1 - drift)/G + drift`` on concept 0,
and each period transfers ``drift/(periods - 1)`` of that surplus to
concept 1, so the final period mirrors the first. ``drift = 0`` keeps the
mixture uniform and stationary.

Items also carry an upload period; an item is only available from its
upload period onward. The first ``G * periods`` item ids cover every
(period, concept) pair so no period lacks any concept.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset
from .seeding import named_rng


@dataclass
class SynthConfig:
    num_users: int = 500
    num_items: int = 2000
    num_concepts: int = 4
    d_feat: int = 16
    periods: int = 10
    interactions_per_period: int = 5000
    drift: float = 0.6
    feature_noise: float = 0.3
    temperature: float = 0.5
    seed: int = 0

    def validate(self):
        if min(self.num_users, self.num_items, self.num_concepts,
               self.d_feat, self.periods, self.interactions_per_period) < 1:
            raise ValueError("counts and dimensions must be >= 1")
        if not 0.0 <= self.drift <= 1.0:
            raise ValueError(f"drift must be in [0, 1], got {self.drift}")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.num_items < self.num_concepts * self.periods:
            raise ValueError(
                "infeasible config: need num_items >= num_concepts * periods "
                f"({self.num_concepts * self.periods}) to cover every "
                "(period, concept) pair")
        return self


def mixture_schedule(config: SynthConfig) -> np.ndarray:
    """Per-period concept mixtures, shape (periods, num_concepts).

    Every row sums to 1; the rising concept's weight is non-decreasing.
    """
    G, T, drift = config.num_concepts, config.periods, config.drift
    base = (1.0 - drift) / G
    mix = np.full((T, G), base)
    if G == 1:
        return np.ones((T, 1))
    for t in range(T):
        moved = drift * t / (T - 1) if T > 1 else 0.0
        mix[t, 0] += drift - moved
        mix[t, 1] += moved
    return mix


@dataclass
class SynthResult:
    dataset: Dataset
    mixtures: np.ndarray      # (periods, num_concepts)
    item_concept: np.ndarray  # (num_items,)
    item_period: np.ndarray   # (num_items,) upload period
    config: SynthConfig

    def provenance(self) -> dict:
        return {
            "config": asdict(self.config),
            "mixtures": self.mixtures.tolist(),
            "num_interactions": int(len(self.dataset.users)),
            "num_users_observed": int(self.dataset.num_users),
            "items_per_concept": np.bincount(
                self.item_concept,
                minlength=self.config.num_concepts).tolist(),
        }


def _unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _sample_rows(cdf_rows, draws):
    """Inverse-CDF sampling, one draw per row of a row-wise CDF matrix."""
    picks = (draws[:, None] > cdf_rows).sum(axis=1)
    return np.minimum(picks, cdf_rows.shape[1] - 1)


def generate(config: SynthConfig) -> SynthResult:
    """Deterministic generation: one seed, one byte-identical dataset."""
    config.validate()
    rng = named_rng(config.seed, "synth")
    G, T = config.num_concepts, config.periods
    M, U = config.num_items, config.num_users
    C = config.interactions_per_period

    centroids = _unit_rows(rng, G, config.d_feat)

    # first G*T ids sweep (period, concept) in period-major order: coverage
    item_concept = np.empty(M, dtype=np.int64)
    item_period = np.empty(M, dtype=np.int64)
    n_cov = G * T
    item_concept[:n_cov] = np.arange(n_cov) % G
    item_period[:n_cov] = np.arange(n_cov) // G
    mixtures = mixture_schedule(config)
    cum = np.cumsum(mixtures, axis=1)
    if M > n_cov:
        rest = M - n_cov
        item_period[n_cov:] = rng.integers(T, size=rest)
        item_concept[n_cov:] = _sample_rows(cum[item_period[n_cov:]],
                                            rng.random(rest))

    noise = rng.normal(size=(M, config.d_feat))
    features = (centroids[item_concept]
                + noise * (config.feature_noise / np.sqrt(config.d_feat)))

    prefs = _unit_rows(rng, U, config.d_feat)
    affinity = prefs @ features.T / config.temperature  # (U, M) softmax logits

    # per concept: item ids ordered by upload period, plus counts available
    # by each period, so avail(c, t) is a prefix of by_concept[c]
    by_concept = []
    avail_counts = []
    for c in range(G):
        ids = np.flatnonzero(item_concept == c)
        ids = ids[np.lexsort((ids, item_period[ids]))]
        by_concept.append(ids)
        avail_counts.append(np.searchsorted(item_period[ids], np.arange(T),
                                            side="right"))

    all_users = []
    all_items = []
    all_times = []
    for t in range(T):
        users_t = rng.integers(U, size=C)
        concepts_t = _sample_rows(np.broadcast_to(cum[t], (C, G)),
                                  rng.random(C))
        items_t = np.empty(C, dtype=np.int64)
        for c in range(G):
            rows = np.flatnonzero(concepts_t == c)
            if len(rows) == 0:
                continue
            avail = by_concept[c][:avail_counts[c][t]]
            logits = affinity[users_t[rows]][:, avail]
            logits = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            picks = _sample_rows(np.cumsum(probs, axis=1), rng.random(len(rows)))
            items_t[rows] = avail[picks]
        perm = rng.permutation(C)  # avoid concept-ordered timestamps
        all_users.append(users_t[perm])
        all_items.append(items_t[perm])
        all_times.append(t * C + np.arange(C, dtype=np.int64))

    users = np.concatenate(all_users)
    items = np.concatenate(all_items)
    times = np.concatenate(all_times)
    dataset = Dataset(users=users, items=items, timestamps=times,
                      features=features, num_users=int(users.max()) + 1,
                      num_items=M)
    return SynthResult(dataset=dataset, mixtures=mixtures,
                       item_concept=item_concept, item_period=item_period,
                       config=config)
