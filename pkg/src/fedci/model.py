"""Channel-independent MLP forecaster with time/node codebooks and a client bias.

Every operation acts on one (batch, time, node) vector at a time, except the
temporal block which mixes the time axis of each (batch, hidden, node) lane,
so a node's prediction depends only on its own history.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor

NODE_EMB = "node_emb"
PERSONAL_BIAS = "personal_bias"
SECONDS_PER_DAY = 86400


@dataclass
class ModelConfig:
    t_in: int = 12
    t_out: int = 12
    hidden: int = 64
    d_td: int = 32
    d_tw: int = 32
    d_n: int = 32
    k_layers: int = 3
    dropout: float = 0.1
    steps_per_day: int = 288
    days_per_week: int = 7
    use_time_emb: bool = True
    use_node_emb: bool = True
    use_bias: bool = True
    ln_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("t_in", "t_out", "hidden", "k_layers", "steps_per_day", "days_per_week"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if SECONDS_PER_DAY % self.steps_per_day:
            raise ValueError(f"steps_per_day={self.steps_per_day} does not divide a day")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def interval_s(self) -> int:
        return SECONDS_PER_DAY // self.steps_per_day

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @classmethod
    def for_interval(cls, interval_s: int, **kw) -> "ModelConfig":
        if SECONDS_PER_DAY % interval_s:
            raise ValueError(f"interval {interval_s}s does not divide a day")
        return cls(steps_per_day=SECONDS_PER_DAY // interval_s, **kw)


@dataclass
class WindowBatch:
    x: np.ndarray           # (B, T_in, N, 1)
    tod: np.ndarray         # (B, T_in)
    dow: np.ndarray         # (B, T_in)
    node_slots: np.ndarray  # (N,)
    y: Optional[np.ndarray] = None  # (B, T_out, N)

    @property
    def size(self) -> int:
        return self.x.shape[0]


def time_indices(start_epoch_s: int, interval_s: int, offsets):
    """Time-of-day slot and weekday (Monday=0, UTC) for each step offset."""
    if interval_s <= 0 or SECONDS_PER_DAY % interval_s:
        raise ValueError(f"interval {interval_s}s does not divide a day")
    t = int(start_epoch_s) + np.asarray(offsets, dtype=np.int64) * int(interval_s)
    tod = (t % SECONDS_PER_DAY) // interval_s
    # 1970-01-01 was a Thursday
    dow = (t // SECONDS_PER_DAY + 3) % 7
    return tod, dow


# ---------------------------------------------------------------------------
# parameters


def _stack_shapes(prefix: str, d_in: int, d_out: int, k: int):
    shapes = []
    for i in range(k):
        width_in = d_in if i == 0 else d_out
        shapes += [(f"{prefix}.{i}.weight", (width_in, d_out)), (f"{prefix}.{i}.bias", (d_out,)),
                   (f"{prefix}.{i}.gamma", (d_out,)), (f"{prefix}.{i}.beta", (d_out,))]
    return shapes


def _concat_width(cfg: ModelConfig) -> int:
    return cfg.hidden * (2 if (cfg.use_time_emb or cfg.use_node_emb) else 1)


def shared_shapes(cfg: ModelConfig):
    """Ordered (name, shape) of every parameter whose shape is node-count free."""
    H, k = cfg.hidden, cfg.k_layers
    shapes = []
    if cfg.use_time_emb:
        shapes += [("time_day", (cfg.steps_per_day, cfg.d_td)), ("time_week", (cfg.days_per_week, cfg.d_tw))]
    shapes += _stack_shapes("encoder", 1, H, k)
    if cfg.use_time_emb:
        shapes += _stack_shapes("time_mlp", cfg.d_td + cfg.d_tw, H, k)
    if cfg.use_node_emb:
        shapes += _stack_shapes("node_mlp", cfg.d_n, H, k)
    if cfg.use_time_emb or cfg.use_node_emb:
        fuse_in = H * (int(cfg.use_time_emb) + int(cfg.use_node_emb))
        shapes += _stack_shapes("fusion", fuse_in, H, k)
    shapes += _stack_shapes("concat_mlp", _concat_width(cfg), H, k)
    shapes += _stack_shapes("temporal", cfg.t_in, cfg.t_out, k)
    shapes += [("head.weight", (H, 1)), ("head.bias", (1,))]
    return shapes


def _glorot(rng, shape, dtype):
    fan_in, fan_out = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _codebook(rng, shape, dtype):
    # each row is one embedding vector, so fan-in is 1 rather than the table length
    bound = np.sqrt(6.0 / (1 + shape[1]))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_shared(cfg: ModelConfig, seed: int) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 0])
    dtype = cfg.np_dtype
    out = {}
    for name, shape in shared_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if name in ("time_day", "time_week"):
            out[name] = _codebook(rng, shape, dtype)
        elif len(shape) == 2:
            out[name] = _glorot(rng, shape, dtype)
        elif leaf == "gamma":
            out[name] = np.ones(shape, dtype)
        else:
            out[name] = np.zeros(shape, dtype)
    return out


def init_node_rows(cfg: ModelConfig, node_ids: Sequence[int], seed: int) -> np.ndarray:
    """Node codebook rows, each drawn from its own (seed, node id) stream."""
    rows = [_codebook(np.random.default_rng([seed, 1, int(n)]), (1, cfg.d_n), np.float64)[0] for n in node_ids]
    return np.asarray(rows, dtype=cfg.np_dtype).reshape(len(rows), cfg.d_n)


def init_params(cfg: ModelConfig, node_ids: Sequence[int], seed: int) -> Dict[str, np.ndarray]:
    params = init_shared(cfg, seed)
    if cfg.use_node_emb:
        params[NODE_EMB] = init_node_rows(cfg, node_ids, seed)
    if cfg.use_bias:
        params[PERSONAL_BIAS] = np.zeros(cfg.hidden, cfg.np_dtype)
    return params


def param_count(params: Dict[str, np.ndarray], exclude: Iterable[str] = (PERSONAL_BIAS,)) -> int:
    skip = set(exclude)
    return int(sum(v.size for k, v in params.items() if k not in skip))


# ---------------------------------------------------------------------------
# forward


def mlp_blocks(x: Tensor, params: Dict[str, Tensor], prefix: str, k: int,
               rng=None, training: bool = False, p: float = 0.0, eps: float = 1e-5,
               fused: bool = True, start: int = 0) -> Tensor:
    """k x Dropout(ReLU(LayerNorm(x W + b))).

    ``fused=False`` runs the separate reference ops instead of the fused
    kernel; both draw identical dropout masks from ``rng``. ``start`` skips
    the first layers, for callers that ran them some other way.
    """
    for i in range(start, k):
        pre = f"{prefix}.{i}"
        x = tn.linear(x, params[f"{pre}.weight"], params[f"{pre}.bias"])
        gamma, beta = params[f"{pre}.gamma"], params[f"{pre}.beta"]
        if fused:
            x = tn.norm_relu_dropout(x, gamma, beta, p, rng, training, eps)
        else:
            x = tn.dropout(tn.relu(tn.layer_norm(x, gamma, beta, eps)), p, rng, training)
    return x


def embed_time(tod, dow, params: Dict[str, Tensor]) -> Tensor:
    """Concatenated time-of-day / day-of-week codes, shape (B, T, 1, d_td + d_tw).

    The node axis is left at extent 1; callers broadcast it.
    """
    e_day = tn.gather_rows(params["time_day"], np.asarray(tod)[:, :, None])
    e_week = tn.gather_rows(params["time_week"], np.asarray(dow)[:, :, None])
    return tn.concat_last([e_day, e_week])


def embed_nodes(node_slots, params: Dict[str, Tensor]) -> Tensor:
    """Node codes, shape (1, 1, N, d_n); batch and time axes broadcast later."""
    return tn.gather_rows(params[NODE_EMB], np.asarray(node_slots)[None, None, :])


def fuse_time_node(e_time: Optional[Tensor], e_node: Optional[Tensor], params, cfg: ModelConfig,
                   full_shape, rng=None, training=False) -> Tensor:
    """Branch MLPs on each embedding, broadcast to (B, T, N, H), concat, fuse.

    The first fusion layer is applied per branch before broadcasting, which
    equals the linear of the concatenation but skips the full-size concat.
    """
    kw = dict(rng=rng, training=training, p=cfg.dropout, eps=cfg.ln_eps)
    branches = []
    if e_time is not None:
        branches.append(mlp_blocks(e_time, params, "time_mlp", cfg.k_layers, **kw))
    if e_node is not None:
        branches.append(mlp_blocks(e_node, params, "node_mlp", cfg.k_layers, **kw))
    h = tn.linear_concat(branches, params["fusion.0.weight"], params["fusion.0.bias"], full_shape[:-1])
    h = tn.norm_relu_dropout(h, params["fusion.0.gamma"], params["fusion.0.beta"], cfg.dropout, rng, training,
                             cfg.ln_eps)
    return mlp_blocks(h, params, "fusion", cfg.k_layers, start=1, **kw)


def temporal_block(e: Tensor, params, cfg: ModelConfig, rng=None, training=False) -> Tensor:
    """(B, T_in, N, H) -> (B, T_out, N, H) by mixing along time."""
    swapped = tn.swap_time_hidden(e)
    mixed = mlp_blocks(swapped, params, "temporal", cfg.k_layers, rng=rng, training=training,
                       p=cfg.dropout, eps=cfg.ln_eps)
    return tn.swap_time_hidden(mixed)


def forward(batch: WindowBatch, params: Dict[str, Tensor], cfg: ModelConfig,
            rng=None, training: bool = False) -> Tensor:
    """Predictions of shape (B, T_out, N) in normalized units."""
    kw = dict(rng=rng, training=training, p=cfg.dropout, eps=cfg.ln_eps)
    x = Tensor(np.asarray(batch.x, dtype=params["head.weight"].dtype))
    if x.data.ndim != 4 or x.shape[1] != cfg.t_in or x.shape[3] != 1:
        raise tn.DimensionError(f"input batch has shape {x.shape}, expected (B, {cfg.t_in}, N, 1)")
    B, T, N, _ = x.shape
    full = (B, T, N, cfg.hidden)

    e_x = mlp_blocks(x, params, "encoder", cfg.k_layers, **kw)
    if cfg.use_bias:
        e_x = tn.add(e_x, params[PERSONAL_BIAS])

    parts = [e_x]
    if cfg.use_time_emb or cfg.use_node_emb:
        e_time = embed_time(batch.tod, batch.dow, params) if cfg.use_time_emb else None
        e_node = embed_nodes(batch.node_slots, params) if cfg.use_node_emb else None
        parts.append(fuse_time_node(e_time, e_node, params, cfg, full, rng, training))
    e_cat = mlp_blocks(tn.concat_last(parts), params, "concat_mlp", cfg.k_layers, **kw)
    e_fin = temporal_block(e_cat, params, cfg, rng, training)
    y = tn.linear(e_fin, params["head.weight"], params["head.bias"])
    return tn.squeeze_last(y)


def mae_loss(pred: Tensor, target) -> Tensor:
    return tn.mean_abs_error(pred, target)


def predict(params: Dict[str, np.ndarray], batch: WindowBatch, cfg: ModelConfig) -> np.ndarray:
    """Eval-mode forward on plain arrays."""
    return forward(batch, {k: Tensor(v) for k, v in params.items()}, cfg).data


def loss_and_grads(params: Dict[str, np.ndarray], batch: WindowBatch, cfg: ModelConfig,
                   rng=None, training: bool = False):
    lv = tn.leaves(params)
    loss = mae_loss(forward(batch, lv, cfg, rng, training), batch.y)
    loss.backward()
    grads = {k: t.grad for k, t in lv.items() if t.grad is not None}
    return float(loss.data), grads


def hi_predict(x: np.ndarray, t_out: int) -> np.ndarray:
    """Historical inertia: replay the most recent observations.

    ``x`` is (B, T_in, N) or (B, T_in, N, 1); the result is (B, t_out, N).
    """
    x = np.asarray(x)
    if x.ndim == 4:
        x = x[..., 0]
    t_in = x.shape[1]
    if t_in < 1:
        raise ValueError("historical inertia needs at least one input step")
    if t_in >= t_out:
        return x[:, t_in - t_out:, :].copy()
    return np.repeat(x[:, -1:, :], t_out, axis=1)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    local_epochs: int = 2
    batch_size: int = 64
    lr: float = 1e-3


@dataclass
class LocalTrainer:
    """Owns one client's parameters, optimizer state and RNG stream.

    Running ``E`` epochs here in ``R`` chunks gives the same result as one
    run of ``R * E`` epochs, which is what makes single-client federation
    match centralized training bit for bit.
    """

    cfg: ModelConfig
    params: Dict[str, np.ndarray]
    windows: "object"
    rng: np.random.Generator
    train: TrainConfig = field(default_factory=TrainConfig)
    adam: tn.AdamState = field(init=False)
    epochs_done: int = 0
    history: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.adam = tn.AdamState(lr=self.train.lr)

    def train_epoch(self) -> float:
        losses = []
        for batch in self.windows.batches(self.train.batch_size, self.rng):
            loss, grads = loss_and_grads(self.params, batch, self.cfg, self.rng, training=True)
            tn.adam_step(self.params, grads, self.adam)
            losses.append(loss * batch.size)
        self.epochs_done += 1
        mean = float(sum(losses) / max(len(self.windows), 1))
        self.history.append(mean)
        return mean

    def run(self, epochs: int) -> float:
        loss = float("nan")
        for _ in range(epochs):
            loss = self.train_epoch()
        return loss


def make_rng(seed: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 2, int(client_id)])
