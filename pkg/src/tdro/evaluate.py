"""Full-ranking evaluation: Recall@K and NDCG@K over candidate item sets.

Settings share one protocol. For each evaluated user every candidate item is
scored, the user's training items are masked out, and items are ranked by
score (ties broken by ascending item id). A user's relevant items are their
interactions in the evaluation part that survive the candidate set and the
training mask; users with no relevant items are skipped and counted.

* ``all``: candidates are all items; warm candidates are scored with the
  configured warm mode (hybrid by default), cold candidates from features.
* ``warm``: candidates are the warm items only.
* ``cold``: candidates are the cold items only, scored purely from features;
  no CF embedding is read on this path.

Breakdowns slice the same per-user results: by user feature shift (distance
between mean train and mean test item features) and by item popularity in
the test part (relevance restricted to each popularity group).
"""

import json
from dataclasses import dataclass

import numpy as np

from .data import SplitDataset
from .model import Model, item_reps

SETTINGS = ("all", "warm", "cold")


def _group_by(keys, values, queries):
    """values grouped by key, returned as a list aligned with queries.

    Keys need not be sorted; grouping is stable in input order.
    """
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    sv = values[order]
    starts = np.searchsorted(sk, queries, side="left")
    ends = np.searchsorted(sk, queries, side="right")
    return [sv[a:b] for a, b in zip(starts, ends)]


def _dcg_weights(k):
    return 1.0 / np.log2(np.arange(k) + 2.0)


@dataclass
class SettingEval:
    """Per-user ranking results for one (part, setting) pair.

    ``topk`` holds ranked item ids per user, padded with -1 when the
    candidate set is smaller than k. ``relevant`` aligns with ``user_ids``.
    """

    setting: str
    part: str
    k: int
    user_ids: np.ndarray
    topk: np.ndarray
    relevant: list
    skipped: int

    @property
    def num_users(self):
        return len(self.user_ids)

    def per_user_metrics(self, restrict_to=None):
        """(recall, ndcg, counted) arrays; ``counted`` is False for users
        whose relevant set becomes empty under ``restrict_to``."""
        weights = _dcg_weights(self.k)
        n = self.num_users
        recall = np.zeros(n)
        ndcg = np.zeros(n)
        counted = np.zeros(n, dtype=bool)
        for i in range(n):
            rel = self.relevant[i]
            if restrict_to is not None:
                rel = rel[np.isin(rel, restrict_to)]
            if len(rel) == 0:
                continue
            counted[i] = True
            hits = np.isin(self.topk[i], rel)
            recall[i] = hits.sum() / len(rel)
            dcg = weights[hits].sum()
            idcg = weights[:min(self.k, len(rel))].sum()
            ndcg[i] = dcg / idcg
        return recall, ndcg, counted

    def recall(self):
        r, _, counted = self.per_user_metrics()
        return float(r[counted].mean()) if counted.any() else float("nan")

    def ndcg(self):
        _, n, counted = self.per_user_metrics()
        return float(n[counted].mean()) if counted.any() else float("nan")


def full_rank_metrics(model: Model, features: np.ndarray,
                      eval_users: np.ndarray, eval_items: np.ndarray,
                      candidates: np.ndarray, *, k: int = 20,
                      warm_mask=None, warm_mode: str = "hybrid",
                      train_users=None, train_items=None,
                      setting: str = "custom", part: str = "custom") -> SettingEval:
    """Rank every candidate for every user with at least one relevant item.

    ``warm_mask`` marks which candidates have CF embeddings; unmarked ones
    are scored from features alone. Training interactions, when given, are
    masked out of both the ranking and the relevance sets.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    num_items = model.num_items
    pos_of = np.full(num_items, -1, dtype=np.int64)
    pos_of[candidates] = np.arange(len(candidates))

    reps = np.zeros((len(candidates), model.d))
    if warm_mask is None:
        warm_sel = np.zeros(len(candidates), dtype=bool)
    else:
        warm_sel = np.asarray(warm_mask, dtype=bool)[candidates]
    if warm_sel.any():
        reps[warm_sel] = item_reps(model, features, candidates[warm_sel],
                                   mode=warm_mode)
    if (~warm_sel).any():
        reps[~warm_sel] = item_reps(model, features, candidates[~warm_sel],
                                    mode="feature_only")

    users = np.unique(eval_users)
    rel_by_user = _group_by(eval_users, eval_items, users)
    if train_users is not None:
        excl_by_user = _group_by(np.asarray(train_users),
                                 np.asarray(train_items), users)
    else:
        excl_by_user = [np.empty(0, dtype=np.int64)] * len(users)

    kept_users = []
    kept_topk = []
    kept_rel = []
    skipped = 0
    k_eff = min(k, len(candidates))
    for u, rel_raw, excl in zip(users, rel_by_user, excl_by_user):
        rel = np.unique(rel_raw)
        rel = rel[pos_of[rel] >= 0]
        if len(excl):
            rel = rel[~np.isin(rel, excl)]
        if len(rel) == 0:
            skipped += 1
            continue
        scores = model.user_emb[u] @ reps.T
        excl_pos = pos_of[np.unique(excl)] if len(excl) else np.empty(0, int)
        excl_pos = excl_pos[excl_pos >= 0]
        if len(excl_pos):
            scores[excl_pos] = -np.inf
        order = np.lexsort((candidates, -scores))
        row = np.full(k, -1, dtype=np.int64)
        row[:k_eff] = candidates[order[:k_eff]]
        kept_users.append(u)
        kept_topk.append(row)
        kept_rel.append(rel)

    return SettingEval(
        setting=setting, part=part, k=k,
        user_ids=np.asarray(kept_users, dtype=np.int64),
        topk=(np.stack(kept_topk) if kept_topk
              else np.empty((0, k), dtype=np.int64)),
        relevant=kept_rel, skipped=skipped)


def evaluate_split(model: Model, split: SplitDataset, *, part: str = "test",
                   setting: str = "all", k: int = 20,
                   warm_mode: str = "hybrid") -> SettingEval:
    """Rank and score one evaluation part under one candidate setting."""
    if part == "valid":
        eval_idx = split.valid_idx
    elif part == "test":
        eval_idx = split.test_idx
    else:
        raise ValueError(f"part must be 'valid' or 'test', got {part!r}")
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}, got {setting!r}")

    data = split.data
    if setting == "all":
        candidates = np.arange(data.num_items, dtype=np.int64)
        warm_mask = split.warm_mask
    elif setting == "warm":
        candidates = split.warm_items
        warm_mask = split.warm_mask
    else:
        candidates = split.cold_items
        warm_mask = None  # feature-only scoring for every candidate
    if len(candidates) == 0:
        raise ValueError(f"no candidate items for setting {setting!r}")

    return full_rank_metrics(
        model, data.features,
        eval_users=data.users[eval_idx], eval_items=data.items[eval_idx],
        candidates=candidates, k=k, warm_mask=warm_mask, warm_mode=warm_mode,
        train_users=data.users[split.train_idx],
        train_items=data.items[split.train_idx],
        setting=setting, part=part)


@dataclass
class ShiftGroups:
    """Users bucketed by train-to-test feature shift.

    ``group`` maps user id to a 0-based bucket (0 = smallest shift) or -1
    for users missing from the train or test part.
    """

    group: np.ndarray
    distance: np.ndarray
    n_groups: int
    num_excluded: int


def user_shift_groups(split: SplitDataset, n_groups: int = 3) -> ShiftGroups:
    """Bucket users by distance between mean train and mean test features.

    Distances are L2 norms between each user's average interacted item
    feature in the train and test parts. Users are sorted by distance (ties
    by user id) and cut into equal-count buckets, remainder to the earliest.
    """
    if n_groups < 1:
        raise ValueError("n_groups must be >= 1")
    data = split.data
    feats = data.features
    num_users = data.num_users

    def mean_feats(idx):
        users = data.users[idx]
        items = data.items[idx]
        sums = np.zeros((num_users, data.d_feat))
        np.add.at(sums, users, feats[items])
        counts = np.bincount(users, minlength=num_users).astype(float)
        has = counts > 0
        means = np.zeros_like(sums)
        means[has] = sums[has] / counts[has, None]
        return means, has

    tr_mean, tr_has = mean_feats(split.train_idx)
    te_mean, te_has = mean_feats(split.test_idx)
    both = tr_has & te_has

    distance = np.full(num_users, np.nan)
    distance[both] = np.linalg.norm(tr_mean[both] - te_mean[both], axis=1)
    group = np.full(num_users, -1, dtype=np.int64)
    included = np.flatnonzero(both)
    order = included[np.lexsort((included, distance[included]))]
    for g, chunk in enumerate(np.array_split(order, n_groups)):
        group[chunk] = g
    return ShiftGroups(group=group, distance=distance, n_groups=n_groups,
                       num_excluded=int(num_users - both.sum()))


@dataclass
class PopularityGroups:
    """Test items bucketed by interaction count (0 = most popular)."""

    group: np.ndarray
    count: np.ndarray
    n_groups: int

    def items_in(self, g):
        return np.flatnonzero(self.group == g)


def item_popularity_groups(test_items: np.ndarray, num_items: int,
                           n_groups: int = 4) -> PopularityGroups:
    """Bucket the items of the test part by descending popularity.

    Popularity is the item's interaction count in the test part. Items are
    sorted by count descending (ties by ascending item id) and cut into
    equal-count buckets, remainder to the earliest. Items absent from the
    test part get group -1.
    """
    if n_groups < 1:
        raise ValueError("n_groups must be >= 1")
    count = np.bincount(np.asarray(test_items), minlength=num_items)
    group = np.full(num_items, -1, dtype=np.int64)
    present = np.flatnonzero(count > 0)
    order = present[np.lexsort((present, -count[present]))]
    for g, chunk in enumerate(np.array_split(order, n_groups)):
        group[chunk] = g
    return PopularityGroups(group=group, count=count, n_groups=n_groups)


@dataclass
class EvalReport:
    """Aggregated metrics for one checkpoint, serializable to JSON or CSV."""

    label: str
    part: str
    k: int
    settings: dict
    user_shift: dict
    item_popularity: dict

    def to_dict(self):
        return {"schema": 1, "label": self.label, "part": self.part,
                "k": self.k, "settings": self.settings,
                "user_shift": self.user_shift,
                "item_popularity": self.item_popularity}

    @classmethod
    def from_dict(cls, d):
        return cls(label=d["label"], part=d["part"], k=d["k"],
                   settings=d["settings"], user_shift=d["user_shift"],
                   item_popularity=d["item_popularity"])

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_csv(self, path):
        """Flat rows: section,setting,group,metric,value."""
        rows = []
        for setting in sorted(self.settings):
            agg = self.settings[setting]
            for metric in ("recall", "ndcg", "num_users", "skipped"):
                rows.append(("setting", setting, "", metric, agg[metric]))
        for section, block in (("user_shift", self.user_shift),
                               ("item_popularity", self.item_popularity)):
            if not block:
                continue
            for setting in sorted(block["settings"]):
                for entry in block["settings"][setting]:
                    for metric in ("recall", "ndcg", "num_users"):
                        rows.append((section, setting, entry["group"],
                                     metric, entry[metric]))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("section,setting,group,metric,value\n")
            for section, setting, grp, metric, value in rows:
                fh.write(f"{section},{setting},{grp},{metric},"
                         f"{value if isinstance(value, int) else repr(float(value))}\n")


def _mean_or_nan(values, counted):
    return float(values[counted].mean()) if counted.any() else float("nan")


def build_report(model: Model, split: SplitDataset, *, label: str,
                 part: str = "test", k: int = 20, warm_mode: str = "hybrid",
                 settings=SETTINGS, shift_groups: int = 3,
                 pop_groups: int = 4) -> EvalReport:
    """Evaluate the requested settings and attach both breakdowns.

    The user-shift and item-popularity breakdowns re-slice each setting's
    per-user results; popularity buckets restrict the relevance sets, so a
    user counts toward a bucket only if it holds one of their relevant items.
    """
    evals = {s: evaluate_split(model, split, part=part, setting=s, k=k,
                               warm_mode=warm_mode) for s in settings}
    setting_block = {}
    for s, ev in evals.items():
        recall, ndcg, counted = ev.per_user_metrics()
        setting_block[s] = {
            "recall": _mean_or_nan(recall, counted),
            "ndcg": _mean_or_nan(ndcg, counted),
            "num_users": int(counted.sum()),
            "skipped": int(ev.skipped + (~counted).sum()),
        }

    shift = user_shift_groups(split, n_groups=shift_groups)
    shift_settings = {}
    for s, ev in evals.items():
        recall, ndcg, counted = ev.per_user_metrics()
        entries = []
        for g in range(shift_groups):
            sel = counted & (shift.group[ev.user_ids] == g)
            entries.append({"group": g + 1,
                            "recall": _mean_or_nan(recall, sel),
                            "ndcg": _mean_or_nan(ndcg, sel),
                            "num_users": int(sel.sum())})
        shift_settings[s] = entries
    shift_block = {"n_groups": shift_groups,
                   "num_excluded": shift.num_excluded,
                   "settings": shift_settings}

    test_items = split.data.items[split.test_idx]
    pops = item_popularity_groups(test_items, split.data.num_items,
                                  n_groups=pop_groups)
    pop_settings = {}
    for s, ev in evals.items():
        entries = []
        for g in range(pop_groups):
            members = pops.items_in(g)
            recall, ndcg, counted = ev.per_user_metrics(restrict_to=members)
            entries.append({"group": g,
                            "recall": _mean_or_nan(recall, counted),
                            "ndcg": _mean_or_nan(ndcg, counted),
                            "num_users": int(counted.sum())})
        pop_settings[s] = entries
    pop_block = {"n_groups": pop_groups, "settings": pop_settings}

    return EvalReport(label=label, part=part, k=k, settings=setting_block,
                      user_shift=shift_block, item_popularity=pop_block)
