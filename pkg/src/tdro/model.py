"""Two-tower cold-start recommender with hand-derived gradients.

Users and warm items get CF embeddings; a two-layer relu MLP maps raw item
features into the same space. Training scores are a convex mix of the CF and
feature towers; cold items are scored from features alone. The pairwise loss
is BPR plus a squared-distance term pulling each warm item's CF embedding and
feature representation together:

    loss = -ln sigmoid(score_pos - score_neg)
           + gamma * ||q_pos - f(s_pos)||^2

All gradients are analytic (no autodiff) and are checked against central
finite differences in the test suite.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .seeding import named_rng

SIGMOID_EPS = 1e-12

# parameter blocks in flattening order
_BLOCKS = ("user_emb", "item_emb", "W1", "b1", "W2", "b2")

_MAGIC = b"TDRC"
_VERSION = 1


@dataclass
class Model:
    user_emb: np.ndarray          # (num_users, d)
    item_emb: np.ndarray          # (num_warm, d), rows follow warm_item_ids
    W1: np.ndarray                # (h, d_feat)
    b1: np.ndarray                # (h,)
    W2: np.ndarray                # (d, h)
    b2: np.ndarray                # (d,)
    alpha: float                  # hybrid mixing coefficient in [0, 1]
    gamma: float                  # alignment loss weight, >= 0
    warm_item_ids: np.ndarray     # sorted global ids of warm items
    num_items: int                # total items incl. cold
    warm_row: np.ndarray = field(repr=False, default=None)  # id -> row, -1 if cold

    def __post_init__(self):
        if self.warm_row is None:
            lookup = np.full(self.num_items, -1, dtype=np.int64)
            lookup[self.warm_item_ids] = np.arange(len(self.warm_item_ids))
            self.warm_row = lookup

    @property
    def d(self):
        return self.user_emb.shape[1]

    @property
    def h(self):
        return self.b1.shape[0]

    @property
    def d_feat(self):
        return self.W1.shape[1]

    @property
    def num_users(self):
        return self.user_emb.shape[0]


@dataclass
class Batch:
    """Training triples with their group/period annotations.

    Positive items are warm; each negative is a warm item different from its
    positive. ``groups``/``periods`` may be -1 when a sampler has no index.
    """

    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray
    groups: np.ndarray
    periods: np.ndarray

    def __len__(self):
        return len(self.users)

    def take(self, idx) -> "Batch":
        return Batch(self.users[idx], self.pos_items[idx], self.neg_items[idx],
                     self.groups[idx], self.periods[idx])


def init_model(num_users, num_items, warm_item_ids, d_feat, *, d=128, h=256,
               alpha=0.5, gamma=0.1, seed=0) -> Model:
    """Fresh model with all parameters ~ uniform(-0.01, 0.01)."""
    warm_item_ids = np.asarray(warm_item_ids, dtype=np.int64)
    rng = named_rng(seed, "init")

    def u(shape):
        return rng.uniform(-0.01, 0.01, size=shape)

    return Model(
        user_emb=u((num_users, d)),
        item_emb=u((len(warm_item_ids), d)),
        W1=u((h, d_feat)),
        b1=u(h),
        W2=u((d, h)),
        b2=u(d),
        alpha=float(alpha),
        gamma=float(gamma),
        warm_item_ids=warm_item_ids,
        num_items=int(num_items),
    )


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def feature_rep(model: Model, s: np.ndarray) -> np.ndarray:
    """f(s) = W2 relu(W1 s + b1) + b2 for one vector or a batch of rows."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != model.d_feat:
        raise ValueError(
            f"feature dimension {s.shape[-1]} != model d_feat {model.d_feat}")
    hidden = np.maximum(s @ model.W1.T + model.b1, 0.0)
    return hidden @ model.W2.T + model.b2


def score(model: Model, user_id: int, item_id: int, mode: str = "hybrid",
          feature: np.ndarray = None) -> float:
    """Preference score of one user-item pair.

    hybrid: alpha * <p_u, q_i> + (1 - alpha) * <p_u, f(s_i)>
    cf_only: <p_u, q_i>; feature_only: <p_u, f(s_i)>.
    """
    p = model.user_emb[user_id]

    def cf_score():
        row = model.warm_row[item_id]
        if row < 0:
            raise ValueError(f"item {item_id} has no CF embedding (cold item)")
        return float(p @ model.item_emb[row])

    def feat_score():
        if feature is None:
            raise ValueError(f"item {item_id}: feature vector required for "
                             f"mode {mode!r}")
        return float(p @ feature_rep(model, feature))

    if mode == "cf_only":
        return cf_score()
    if mode == "feature_only":
        return feat_score()
    if mode == "hybrid":
        return model.alpha * cf_score() + (1.0 - model.alpha) * feat_score()
    raise ValueError(f"unknown scoring mode {mode!r}")


def item_reps(model: Model, features: np.ndarray, item_ids: np.ndarray,
              mode: str = "hybrid") -> np.ndarray:
    """Combined d-dim representations of the given items for ranking.

    Scores are then ``user_emb @ reps.T``. cf_only/hybrid require all items
    to be warm.
    """
    item_ids = np.asarray(item_ids, dtype=np.int64)
    if mode == "feature_only":
        return feature_rep(model, features[item_ids])
    rows = model.warm_row[item_ids]
    if np.any(rows < 0):
        bad = int(item_ids[rows < 0][0])
        raise ValueError(f"item {bad} has no CF embedding (cold item)")
    if mode == "cf_only":
        return model.item_emb[rows]
    if mode == "hybrid":
        return (model.alpha * model.item_emb[rows]
                + (1.0 - model.alpha) * feature_rep(model, features[item_ids]))
    raise ValueError(f"unknown scoring mode {mode!r}")


def _forward(model: Model, batch: Batch, features: np.ndarray):
    """Shared forward pass for loss and gradient."""
    P = model.user_emb[batch.users]
    pos_rows = model.warm_row[batch.pos_items]
    neg_rows = model.warm_row[batch.neg_items]
    if np.any(pos_rows < 0) or np.any(neg_rows < 0):
        raise ValueError("batch contains a cold item")
    Qp = model.item_emb[pos_rows]
    Qn = model.item_emb[neg_rows]
    Sp = features[batch.pos_items]
    Sn = features[batch.neg_items]

    Hp = Sp @ model.W1.T + model.b1
    Hn = Sn @ model.W1.T + model.b1
    Ap = np.maximum(Hp, 0.0)
    An = np.maximum(Hn, 0.0)
    Fp = Ap @ model.W2.T + model.b2
    Fn = An @ model.W2.T + model.b2

    a = model.alpha
    score_p = a * np.sum(P * Qp, axis=1) + (1.0 - a) * np.sum(P * Fp, axis=1)
    score_n = a * np.sum(P * Qn, axis=1) + (1.0 - a) * np.sum(P * Fn, axis=1)
    margin = score_p - score_n
    sig = _sigmoid(margin)
    return (P, pos_rows, neg_rows, Qp, Qn, Sp, Sn, Hp, Hn, Ap, An, Fp, Fn, sig)


def loss(model: Model, batch: Batch, features: np.ndarray):
    """Mean batch loss and the per-sample losses."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    (_, _, _, Qp, _, _, _, _, _, _, _, Fp, _, sig) = _forward(model, batch, features)
    bpr = -np.log(np.clip(sig, SIGMOID_EPS, 1.0 - SIGMOID_EPS))
    align = model.gamma * np.sum((Qp - Fp) ** 2, axis=1)
    per_sample = bpr + align
    return float(per_sample.mean()), per_sample


def loss_gradient(model: Model, batch: Batch, features: np.ndarray) -> np.ndarray:
    """Gradient of the mean batch loss, flattened over all parameters.

    Flattening order: user_emb, item_emb, W1, b1, W2, b2 (row-major).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    (P, pos_rows, neg_rows, Qp, Qn, Sp, Sn, Hp, Hn, Ap, An, Fp, Fn,
     sig) = _forward(model, batch, features)
    B = len(batch)
    a = model.alpha

    # d(-ln clip(sigmoid))/dmargin; zero where the clamp is active
    inside = (sig > SIGMOID_EPS) & (sig < 1.0 - SIGMOID_EPS)
    t = np.where(inside, sig - 1.0, 0.0) / B

    Zp = a * Qp + (1.0 - a) * Fp
    Zn = a * Qn + (1.0 - a) * Fn
    diff = (2.0 * model.gamma / B) * (Qp - Fp)

    d_user = np.zeros_like(model.user_emb)
    np.add.at(d_user, batch.users, t[:, None] * (Zp - Zn))

    d_item = np.zeros_like(model.item_emb)
    np.add.at(d_item, pos_rows, (a * t)[:, None] * P + diff)
    np.add.at(d_item, neg_rows, (-a * t)[:, None] * P)

    Vp = ((1.0 - a) * t)[:, None] * P - diff
    Vn = (-(1.0 - a) * t)[:, None] * P

    d_W2 = Vp.T @ Ap + Vn.T @ An
    d_b2 = Vp.sum(axis=0) + Vn.sum(axis=0)
    Gp = (Vp @ model.W2) * (Hp > 0.0)
    Gn = (Vn @ model.W2) * (Hn > 0.0)
    d_W1 = Gp.T @ Sp + Gn.T @ Sn
    d_b1 = Gp.sum(axis=0) + Gn.sum(axis=0)

    return np.concatenate([d_user.ravel(), d_item.ravel(), d_W1.ravel(),
                           d_b1, d_W2.ravel(), d_b2])


def num_params(model: Model) -> int:
    return sum(getattr(model, name).size for name in _BLOCKS)


def get_flat_params(model: Model) -> np.ndarray:
    return np.concatenate([getattr(model, name).ravel() for name in _BLOCKS])


def set_flat_params(model: Model, flat: np.ndarray) -> None:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.size != num_params(model):
        raise ValueError(
            f"flat vector has {flat.size} entries, expected {num_params(model)}")
    offset = 0
    for name in _BLOCKS:
        block = getattr(model, name)
        block[...] = flat[offset:offset + block.size].reshape(block.shape)
        offset += block.size


def extractor_slice(model: Model) -> slice:
    """Slice of the flat parameter vector holding W1, b1, W2, b2."""
    start = model.user_emb.size + model.item_emb.size
    return slice(start, num_params(model))


def save_checkpoint(path, model: Model) -> None:
    """Versioned binary checkpoint; round-trips bit-exactly.

    Layout: magic ``TDRC``, u32 version, six u64 dims (d, h, d_feat,
    num_users, num_items, num_warm), two f64 (alpha, gamma), num_warm i64
    warm item ids, then the parameter blocks as row-major little-endian f64
    in flattening order.
    """
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", _MAGIC, _VERSION))
        fh.write(struct.pack("<6Q", model.d, model.h, model.d_feat,
                             model.num_users, model.num_items,
                             len(model.warm_item_ids)))
        fh.write(struct.pack("<2d", model.alpha, model.gamma))
        fh.write(model.warm_item_ids.astype("<i8").tobytes())
        for name in _BLOCKS:
            fh.write(np.ascontiguousarray(getattr(model, name)).astype("<f8").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        magic, version = struct.unpack("<4sI", fh.read(8))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic)")
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        d, h, d_feat, num_users, num_items, num_warm = struct.unpack(
            "<6Q", fh.read(48))
        alpha, gamma = struct.unpack("<2d", fh.read(16))
        warm_ids = np.frombuffer(fh.read(8 * num_warm), dtype="<i8").copy()

        shapes = {
            "user_emb": (num_users, d),
            "item_emb": (num_warm, d),
            "W1": (h, d_feat),
            "b1": (h,),
            "W2": (d, h),
            "b2": (d,),
        }
        blocks = {}
        for name in _BLOCKS:
            shape = shapes[name]
            count = int(np.prod(shape))
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated checkpoint in block {name}")
            blocks[name] = np.frombuffer(raw, dtype="<f8").copy().reshape(shape)

    return Model(alpha=alpha, gamma=gamma, warm_item_ids=warm_ids,
                 num_items=int(num_items), **blocks)
