"""Robust training: group-weighted updates guided by loss and temporal trend.

Four modes share one training loop:

* ``erm``: plain SGD on the mean batch loss.
* ``group_dro``: each step descends the gradient of the group with the worst
  streaming loss.
* ``tdro``: soft group weights on the probability simplex, updated
  multiplicatively from per-group scores that mix the streaming loss
  (worst-case factor) with the alignment between group gradients and a
  period-weighted gradient trend (shifting factor).
* ``sdro``: the loss-only special case of ``tdro`` (shifting factor off).

Streaming losses smooth sparse per-group estimates:
L_j <- (1 - mu) * L_j + mu * L_batch. Per-(group, period) gradients keep an
exponential moving average so the trend stays defined for cells missing from
a mini-batch.
"""

import copy
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import SplitDataset
from .grouping import GroupPeriodIndex
from .model import (Batch, Model, extractor_slice, get_flat_params, loss,
                    loss_gradient, num_params, set_flat_params)
from .seeding import named_rng

MODES = ("erm", "group_dro", "tdro", "sdro")


@dataclass
class TdroConfig:
    mode: str = "tdro"
    K: int = 3                  # item groups
    E: int = 3                  # time periods
    lam: float = 0.3            # shifting factor strength, in [0, 1]
    p: float = 0.2              # period weight steepness
    mu: float = 0.2             # streaming loss step size, in (0, 1]
    eta_w: float = 0.1          # group weight step size
    eta: float = 5.0            # learning rate
    normalize_gradients: bool = False
    ema_decay: float = 0.9      # carry-over for per-cell gradient EMAs
    drop_worst_case: bool = False      # ablation: scores use the trend term only
    inner_extractor_only: bool = False  # inner products over extractor params only

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.K < 1 or self.E < 1:
            raise ValueError("K and E must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.p < 0:
            raise ValueError(f"p must be non-negative, got {self.p}")
        if not 0.0 < self.mu <= 1.0:
            raise ValueError(f"mu must be in (0, 1], got {self.mu}")
        if self.eta_w < 0:
            raise ValueError(f"eta_w must be non-negative, got {self.eta_w}")
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        return self


@dataclass
class TdroState:
    """Mutable optimizer state: simplex weights, streaming losses, gradients."""

    w: np.ndarray            # (K,)
    stream_loss: np.ndarray  # (K,)
    grad_group: np.ndarray   # (K, P), last observed per-group gradient
    grad_cell: np.ndarray    # (K, E, P), EMA per (group, period)
    step: int = 0

    @classmethod
    def initial(cls, num_groups: int, num_periods: int, n_params: int) -> "TdroState":
        return cls(
            w=np.full(num_groups, 1.0 / num_groups),
            stream_loss=np.zeros(num_groups),
            grad_group=np.zeros((num_groups, n_params)),
            grad_cell=np.zeros((num_groups, num_periods, n_params)),
        )


def save_state(path, state: TdroState) -> None:
    np.savez(path, w=state.w, stream_loss=state.stream_loss,
             grad_group=state.grad_group, grad_cell=state.grad_cell,
             step=np.int64(state.step))


def load_state(path) -> TdroState:
    with np.load(path) as data:
        return TdroState(w=data["w"], stream_loss=data["stream_loss"],
                         grad_group=data["grad_group"],
                         grad_cell=data["grad_cell"], step=int(data["step"]))


def stream_update(prev, new, mu):
    """Streaming loss estimate: (1 - mu) * prev + mu * new."""
    return (1.0 - mu) * prev + mu * new


def shifting_trend(grad_cell: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Period-weighted sum of all (group, period) gradients."""
    grad_cell = np.asarray(grad_cell)
    beta = np.asarray(beta, dtype=np.float64)
    if grad_cell.ndim != 3:
        raise ValueError("grad_cell must have shape (K, E, P)")
    if beta.shape != (grad_cell.shape[1],):
        raise ValueError(
            f"beta has length {beta.shape}, expected ({grad_cell.shape[1]},)")
    return np.tensordot(beta, grad_cell.sum(axis=0), axes=(0, 0))


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def group_scores(stream_loss, grad_group, trend, lam, *,
                 normalize_gradients=False, drop_worst_case=False,
                 restrict=None):
    """Per-group selection scores c_j = (1 - lam) * L_j + lam * <g_j, trend>.

    ``normalize_gradients`` turns the inner product into a cosine similarity
    (zero vectors stay zero). ``restrict`` limits the inner product to a slice
    of the flat parameter vector. ``drop_worst_case`` keeps only the trend
    term (ablation).
    """
    stream_loss = np.asarray(stream_loss, dtype=np.float64)
    g = np.asarray(grad_group, dtype=np.float64)
    t = np.asarray(trend, dtype=np.float64)
    if restrict is not None:
        g = g[:, restrict]
        t = t[restrict]
    if normalize_gradients:
        g = _unit_rows(g)
        t_norm = np.linalg.norm(t)
        t = t / t_norm if t_norm > 0 else t
    inner = g @ t
    if drop_worst_case:
        return lam * inner
    return (1.0 - lam) * stream_loss + lam * inner


def weight_update(w, c, eta_w):
    """Multiplicative simplex update w_i ∝ w_i * exp(eta_w * c_i).

    The max of c is subtracted before exponentiating; the shift cancels in
    the ratio, so the result is the exact closed form without overflow.
    """
    w = np.asarray(w, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    scaled = eta_w * (c - c.max())
    unnorm = w * np.exp(scaled)
    return unnorm / unnorm.sum()


def _group_stats(model, batch, state, config, features, *, want_cells):
    """Per-group losses/gradients for groups present in the batch.

    Updates streaming losses and stored group gradients in place; optionally
    refreshes the per-cell gradient EMAs. Returns (present groups, dict of
    fresh per-group gradients).
    """
    fresh = {}
    present = []
    num_groups = state.w.shape[0]
    for j in range(num_groups):
        mask = batch.groups == j
        if not mask.any():
            continue
        sub = batch.take(mask)
        loss_j, _ = loss(model, sub, features)
        grad_j = loss_gradient(model, sub, features)
        state.stream_loss[j] = stream_update(state.stream_loss[j], loss_j,
                                             config.mu)
        state.grad_group[j] = grad_j
        fresh[j] = grad_j
        present.append(j)
        if want_cells:
            keep = config.ema_decay
            for e in np.unique(batch.periods[mask]):
                cell = batch.take(mask & (batch.periods == e))
                grad_cell = loss_gradient(model, cell, features)
                state.grad_cell[j, e] = (keep * state.grad_cell[j, e]
                                         + (1.0 - keep) * grad_cell)
    return present, fresh


def tdro_step(model: Model, batch: Batch, state: TdroState, config: TdroConfig,
              features: np.ndarray, beta: np.ndarray):
    """One group-weighted update (Algorithm: stream losses, refresh cell
    EMAs, score groups, exponentiated weight update, weighted descent)."""
    lam = 0.0 if config.mode == "sdro" else config.lam
    present, fresh = _group_stats(model, batch, state, config, features,
                                  want_cells=True)
    trend = shifting_trend(state.grad_cell, beta)
    restrict = extractor_slice(model) if config.inner_extractor_only else None
    c = group_scores(state.stream_loss, state.grad_group, trend, lam,
                     normalize_gradients=config.normalize_gradients,
                     drop_worst_case=config.drop_worst_case,
                     restrict=restrict)
    w = weight_update(state.w, c, config.eta_w)
    state.w = w / w.sum()

    update = np.zeros(state.grad_group.shape[1])
    for j in present:
        update += state.w[j] * fresh[j]
    set_flat_params(model, get_flat_params(model) - config.eta * update)
    state.step += 1
    return model, state


def group_dro_step(model: Model, batch: Batch, state: TdroState,
                   config: TdroConfig, features: np.ndarray):
    """Hard worst-group update: descend the gradient of the group with the
    largest streaming loss (ties to the lowest index). If that group has no
    samples in the batch, the worst among the present groups is used."""
    present, fresh = _group_stats(model, batch, state, config, features,
                                  want_cells=False)
    j_star = int(np.argmax(state.stream_loss))
    if j_star not in fresh:
        present_arr = np.asarray(present)
        j_star = int(present_arr[np.argmax(state.stream_loss[present_arr])])

    state.w = np.zeros_like(state.w)
    state.w[j_star] = 1.0
    set_flat_params(model, get_flat_params(model) - config.eta * fresh[j_star])
    state.step += 1
    return model, state


def erm_step(model: Model, batch: Batch, config: TdroConfig,
             features: np.ndarray) -> Model:
    """Plain SGD step on the mean batch loss."""
    grad = loss_gradient(model, batch, features)
    set_flat_params(model, get_flat_params(model) - config.eta * grad)
    return model


@dataclass
class TrainLog:
    """Per-epoch training trace.

    Columns: epoch, mode, train_loss, one streaming loss and one weight per
    group, validation recall, wall time. The numeric trajectory (everything
    except mode and wall_ms) is reproducible bit-for-bit for a given seed.
    """

    mode: str
    num_groups: int
    k_metric: int
    rows: list = field(default_factory=list)

    def header(self):
        return (["epoch", "mode", "train_loss"]
                + [f"loss_g{j}" for j in range(self.num_groups)]
                + [f"w_{j}" for j in range(self.num_groups)]
                + [f"val_recall_at_{self.k_metric}", "wall_ms"])

    def append(self, epoch, train_loss, stream_loss, w, val_recall, wall_ms):
        self.rows.append([epoch, self.mode, train_loss, *stream_loss, *w,
                          val_recall, wall_ms])

    def numeric_rows(self):
        """Rows without the mode and wall_ms columns."""
        return [[row[0], *row[2:-1]] for row in self.rows]

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(self.header()) + "\n")
            for row in self.rows:
                fh.write(",".join(
                    v if isinstance(v, str) else repr(v) for v in row) + "\n")


@dataclass
class TrainResult:
    model: Model           # best checkpoint by validation recall
    final_model: Model
    state: TdroState
    log: TrainLog
    best_epoch: int
    best_val_recall: float


def sample_negatives(rng, warm_items, pos_items):
    """One uniform warm negative per positive, resampled on collisions."""
    if len(warm_items) < 2:
        raise ValueError("need at least 2 warm items for negative sampling")
    neg = warm_items[rng.integers(len(warm_items), size=len(pos_items))]
    bad = neg == pos_items
    while np.any(bad):
        neg[bad] = warm_items[rng.integers(len(warm_items), size=int(bad.sum()))]
        bad = neg == pos_items
    return neg


def train(split: SplitDataset, index: GroupPeriodIndex, model: Model,
          config: TdroConfig, epochs: int, batch_size: int, seed: int, *,
          k_metric: int = 20, patience=None, warm_mode: str = "hybrid",
          initial_state: TdroState = None, step_callback=None) -> TrainResult:
    """Mini-batch training with per-epoch validation recall.

    Batches, negative samples and shuffling depend only on the seed, never on
    the mode, so runs in different modes see identical data. The best model
    by validation Recall@k (all setting, earliest epoch on ties) is returned
    together with the final model, optimizer state and log.
    """
    from .evaluate import evaluate_split  # deferred: evaluate imports model

    config.validate()
    if config.mode in ("tdro", "sdro", "group_dro"):
        if config.K != index.num_groups or config.E != index.num_periods:
            raise ValueError(
                f"config K/E ({config.K}/{config.E}) do not match the index "
                f"({index.num_groups}/{index.num_periods})")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")

    data = split.data
    features = data.features
    train_users = data.users[split.train_idx]
    train_pos = data.items[split.train_idx]
    if config.mode == "erm":
        train_groups = np.zeros(len(split.train_idx), dtype=np.int64)
        num_groups = 1
    else:
        train_groups = index.item_group[train_pos]
        num_groups = config.K
    train_periods = index.interaction_period[split.train_idx]

    state = initial_state
    if state is None:
        state = TdroState.initial(num_groups, index.num_periods, num_params(model))

    rng_shuffle = named_rng(seed, "shuffle")
    rng_neg = named_rng(seed, "negatives")
    log = TrainLog(mode=config.mode, num_groups=num_groups, k_metric=k_metric)

    best_model = copy.deepcopy(model)
    best_recall = -np.inf
    best_epoch = -1
    since_best = 0

    n = len(split.train_idx)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        perm = rng_shuffle.permutation(n)
        batch_losses = []
        for start in range(0, n, batch_size):
            sel = perm[start:start + batch_size]
            batch = Batch(
                users=train_users[sel],
                pos_items=train_pos[sel],
                neg_items=sample_negatives(rng_neg, split.warm_items,
                                           train_pos[sel]),
                groups=train_groups[sel],
                periods=train_periods[sel],
            )
            batch_loss, _ = loss(model, batch, features)
            batch_losses.append(batch_loss)

            if config.mode == "erm":
                state.stream_loss[0] = stream_update(state.stream_loss[0],
                                                     batch_loss, config.mu)
                erm_step(model, batch, config, features)
                state.step += 1
            elif config.mode == "group_dro":
                group_dro_step(model, batch, state, config, features)
            else:
                tdro_step(model, batch, state, config, features, index.beta)

            if step_callback is not None:
                step_callback(model, state)

        val = evaluate_split(model, split, part="valid", setting="all",
                             k=k_metric, warm_mode=warm_mode)
        val_recall = val.recall()
        wall_ms = (time.perf_counter() - t0) * 1e3
        log.append(epoch, float(np.mean(batch_losses)), state.stream_loss,
                   state.w, val_recall, wall_ms)

        if val_recall > best_recall:
            best_recall = val_recall
            best_epoch = epoch
            best_model = copy.deepcopy(model)
            since_best = 0
        else:
            since_best += 1
            if patience is not None and since_best > patience:
                break

    if best_epoch < 0:
        best_model = copy.deepcopy(model)
        best_recall = float("nan")

    return TrainResult(model=best_model, final_model=model, state=state,
                       log=log, best_epoch=best_epoch,
                       best_val_recall=best_recall)
