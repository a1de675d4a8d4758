"""Learned trajectory scorer.

Per-feature pipeline: batch-norm -> single-layer LSTM -> feedforward ->
token embedding.  The six feature tokens then interact through masked
two-head self-attention (each token attends to every other token but not to
itself; learned additive position embeddings encode which feature is which).
A shared head maps each corrected embedding to a scalar, tanh produces the
feature score, and the reward is the weighted sum of feature scores.

Training differentiates the focal-weighted max-entropy loss through the
whole network with the reverse-mode tape in `autodiff`.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Var, concat, logsumexp, stack
from .features import FEATURE_NAMES, FEATURE_SHAPES, FeatureBundle

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
_MASK_NEG = -1e9
_MASK_CACHE: dict = {}


def _diag_mask(n_tok: int) -> np.ndarray:
    mask = _MASK_CACHE.get(n_tok)
    if mask is None:
        mask = np.where(np.eye(n_tok, dtype=bool), _MASK_NEG, 0.0)
        _MASK_CACHE[n_tok] = mask
    return mask


@dataclass(frozen=True)
class ScorerConfig:
    hidden_size: int = 20
    model_dim: int = 120
    ff_hidden: int = 64
    head_hidden: int = 64
    n_heads: int = 2

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise ValueError("model_dim must divide evenly into heads")


class ScorerParams:
    """Named parameter tensors plus batch-norm running statistics."""

    def __init__(self, config: ScorerConfig, tensors: dict):
        self.config = config
        self.tensors = tensors

    def trainable_names(self):
        return [n for n in self.tensors
                if not (n.endswith("_run_mean") or n.endswith("_run_var"))]

    def n_trainable(self) -> int:
        return sum(self.tensors[n].size for n in self.trainable_names())

    def copy(self) -> "ScorerParams":
        return ScorerParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def __eq__(self, other):
        if not isinstance(other, ScorerParams):
            return NotImplemented
        return (self.config == other.config
                and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(self.tensors[k], other.tensors[k])
                        for k in self.tensors))


def init_params(seed: int, config: ScorerConfig = ScorerConfig()) -> ScorerParams:
    """Deterministic initialization: uniform with fan-in scaling."""
    rng = np.random.default_rng(seed)

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(max(1, fan_in))
        return rng.uniform(-bound, bound, size=shape)

    h, d = config.hidden_size, config.model_dim
    t: dict = {}
    for name in FEATURE_NAMES:
        _, channels = FEATURE_SHAPES[name]
        t[f"{name}_bn_gamma"] = np.ones(channels)
        t[f"{name}_bn_beta"] = np.zeros(channels)
        t[f"{name}_bn_run_mean"] = np.zeros(channels)
        t[f"{name}_bn_run_var"] = np.ones(channels)
        t[f"{name}_lstm_W"] = uniform(channels, (channels, 4 * h))
        t[f"{name}_lstm_U"] = uniform(h, (h, 4 * h))
        t[f"{name}_lstm_b"] = uniform(h, (4 * h,))
        t[f"{name}_ff1_W"] = uniform(h, (h, config.ff_hidden))
        t[f"{name}_ff1_b"] = uniform(h, (config.ff_hidden,))
        t[f"{name}_ff2_W"] = uniform(config.ff_hidden, (config.ff_hidden, d))
        t[f"{name}_ff2_b"] = uniform(config.ff_hidden, (d,))
    t["pos_emb"] = rng.uniform(-0.1, 0.1, size=(len(FEATURE_NAMES), d))
    for proj in ("q", "k", "v"):
        t[f"attn_W{proj}"] = uniform(d, (d, d))
        t[f"attn_b{proj}"] = uniform(d, (d,))
    t["head1_W"] = uniform(d, (d, config.head_hidden))
    t["head1_b"] = uniform(d, (config.head_hidden,))
    t["head2_W"] = uniform(config.head_hidden, (config.head_hidden, 1))
    t["head2_b"] = uniform(config.head_hidden, (1,))
    t["feat_w"] = np.ones(len(FEATURE_NAMES))
    return ScorerParams(config, t)


def _stack_feature(bundles, name) -> np.ndarray:
    return np.stack([getattr(b, name) for b in bundles])  # (N, L, C)


def _batchnorm(x: Var, gamma: Var, beta: Var, run_mean, run_var, train: bool):
    if train:
        m = x.mean(axis=(0, 1))
        var = ((x - m.reshape(1, 1, -1)) ** 2).mean(axis=(0, 1))
        run_mean *= 1.0 - BN_MOMENTUM
        run_mean += BN_MOMENTUM * m.data
        run_var *= 1.0 - BN_MOMENTUM
        run_var += BN_MOMENTUM * var.data
        xhat = (x - m.reshape(1, 1, -1)) / (var.reshape(1, 1, -1) + BN_EPS).sqrt()
    else:
        xhat = (x - Var(run_mean)) / Var(np.sqrt(run_var + BN_EPS))
    return xhat * gamma + beta


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _lstm(x: Var, W: Var, U: Var, b: Var, hidden: int) -> Var:
    """Single-layer LSTM over (N, L, C); returns the final hidden state.

    Fused into a single tape node: the step loop runs in plain numpy and the
    backward pass is analytic backprop-through-time, which keeps the tape
    small for long sequences.
    """
    xd, Wd, Ud, bd = x.data, W.data, U.data, b.data
    n, length, c_in = xd.shape
    H = hidden
    xz = (xd.reshape(n * length, c_in) @ Wd).reshape(n, length, 4 * H)
    h = np.zeros((n, H))
    c = np.zeros((n, H))
    steps = []
    for t in range(length):
        z = xz[:, t, :] + h @ Ud + bd
        i = _sigmoid(z[:, 0 * H:1 * H])
        f = _sigmoid(z[:, 1 * H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:4 * H])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        h = o * np.tanh(c)
        steps.append((i, f, g, o, c_prev, h_prev, c))

    def bw(gh):
        dh = np.asarray(gh, dtype=float)
        dc = np.zeros_like(dh)
        dz_all = np.empty((length, n, 4 * H))
        for t in range(length - 1, -1, -1):
            i, f, g, o, c_prev, _, c_t = steps[t]
            tc = np.tanh(c_t)
            dc = dc + dh * o * (1.0 - tc * tc)
            dz = dz_all[t]
            dz[:, 0 * H:1 * H] = dc * g * i * (1.0 - i)
            dz[:, 1 * H:2 * H] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            dz[:, 3 * H:4 * H] = dh * tc * o * (1.0 - o)
            dh = dz @ Ud.T
            dc = dc * f
        dzf = dz_all.transpose(1, 0, 2).reshape(n * length, 4 * H)
        xf = xd.reshape(n * length, c_in)
        h_prev = np.stack([s[5] for s in steps])  # (L, N, H)
        x._accumulate((dzf @ Wd.T).reshape(n, length, c_in))
        W._accumulate(xf.T @ dzf)
        U._accumulate(np.einsum("tnh,tnz->hz", h_prev, dz_all))
        b._accumulate(dzf.sum(axis=0))

    return Var(h, (x, W, U, b), bw)


def _attention(q_in: Var, k_in: Var, v_in: Var, p: dict, config: ScorerConfig) -> Var:
    """Masked multi-head self-attention over the six feature tokens.

    The diagonal mask excludes each token's own value: token i's context is
    built solely from the other tokens.
    """
    n, n_tok, d = q_in.shape
    heads, dh = config.n_heads, d // config.n_heads

    def split(x):
        return x.reshape(n, n_tok, heads, dh).transpose(0, 2, 1, 3)

    q = split(q_in @ p["attn_Wq"] + p["attn_bq"])
    k = split(k_in @ p["attn_Wk"] + p["attn_bk"])
    v = split(v_in @ p["attn_Wv"] + p["attn_bv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    scores = scores + Var(_diag_mask(n_tok))
    attn = (scores - logsumexp(scores, axis=-1, keepdims=True)).exp()
    return (attn @ v).transpose(0, 2, 1, 3).reshape(n, n_tok, d)


def _forward_graph(bundles, p: dict, config: ScorerConfig, train: bool,
                   raw_tensors: dict):
    """Reward Var (N,) and per-feature scores Var (N, 6) for a bundle list."""
    tokens = []
    for idx, name in enumerate(FEATURE_NAMES):
        x = Var(_stack_feature(bundles, name))
        x = _batchnorm(x, p[f"{name}_bn_gamma"], p[f"{name}_bn_beta"],
                       raw_tensors[f"{name}_bn_run_mean"],
                       raw_tensors[f"{name}_bn_run_var"], train)
        h = _lstm(x, p[f"{name}_lstm_W"], p[f"{name}_lstm_U"],
                  p[f"{name}_lstm_b"], config.hidden_size)
        e = (h @ p[f"{name}_ff1_W"] + p[f"{name}_ff1_b"]).relu()
        e = e @ p[f"{name}_ff2_W"] + p[f"{name}_ff2_b"]
        tokens.append(e + p["pos_emb"][idx, :])
    tok = stack(tokens, axis=1)  # (N, 6, D)
    ctx = _attention(tok, tok, tok, p, config)
    hh = (ctx @ p["head1_W"] + p["head1_b"]).relu()
    scalar = (hh @ p["head2_W"] + p["head2_b"]).reshape(len(bundles), len(FEATURE_NAMES))
    y = scalar.tanh()
    reward = (y * p["feat_w"]).sum(axis=1)
    return reward, y


def _forward_numpy(bundles, t: dict, config: ScorerConfig):
    """Tape-free eval forward; same math as _forward_graph with running
    batch-norm statistics.  Used on the scoring hot path where no gradients
    are needed."""

    def sigmoid(z):
        return 1.0 / (1.0 + np.exp(-z))

    n = len(bundles)
    hs = config.hidden_size
    tokens = []
    for idx, name in enumerate(FEATURE_NAMES):
        x = _stack_feature(bundles, name)
        xhat = (x - t[f"{name}_bn_run_mean"]) / np.sqrt(t[f"{name}_bn_run_var"] + BN_EPS)
        x = xhat * t[f"{name}_bn_gamma"] + t[f"{name}_bn_beta"]
        W, U, b = t[f"{name}_lstm_W"], t[f"{name}_lstm_U"], t[f"{name}_lstm_b"]
        xz = x @ W  # (N, L, 4H) input contribution, hoisted out of the loop
        h = np.zeros((n, hs))
        c = np.zeros((n, hs))
        gate_idx = np.array([0, 1, 3])
        for step in range(x.shape[1]):
            z = (xz[:, step, :] + h @ U + b).reshape(n, 4, hs)
            ifo = sigmoid(z[:, gate_idx, :])  # one exp for i, f, o
            g = np.tanh(z[:, 2, :])
            c = ifo[:, 1] * c + ifo[:, 0] * g
            h = ifo[:, 2] * np.tanh(c)
        e = np.maximum(0.0, h @ t[f"{name}_ff1_W"] + t[f"{name}_ff1_b"])
        e = e @ t[f"{name}_ff2_W"] + t[f"{name}_ff2_b"]
        tokens.append(e + t["pos_emb"][idx])
    tok = np.stack(tokens, axis=1)  # (N, 6, D)
    n_tok, d = tok.shape[1], tok.shape[2]
    heads, dh = config.n_heads, d // config.n_heads

    def split(x):
        return x.reshape(n, n_tok, heads, dh).transpose(0, 2, 1, 3)

    q = split(tok @ t["attn_Wq"] + t["attn_bq"])
    k = split(tok @ t["attn_Wk"] + t["attn_bk"])
    v = split(tok @ t["attn_Wv"] + t["attn_bv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(dh)
    scores = scores + _diag_mask(n_tok)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(n, n_tok, d)
    hh = np.maximum(0.0, ctx @ t["head1_W"] + t["head1_b"])
    scalar = (hh @ t["head2_W"] + t["head2_b"]).reshape(n, n_tok)
    y = np.tanh(scalar)
    reward = (y * t["feat_w"]).sum(axis=1)
    return reward, y


def _param_vars(params: ScorerParams) -> dict:
    return {name: Var(params.tensors[name]) for name in params.trainable_names()}


def forward(bundles, params: ScorerParams, mode: str = "eval"):
    """Rewards and per-feature scores; batch-norm per `mode`.

    In train mode batch statistics are taken across all trajectories passed
    in (and the running statistics are updated); eval mode uses the stored
    running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if isinstance(bundles, FeatureBundle):
        bundles = [bundles]
    if mode == "eval":
        return _forward_numpy(bundles, params.tensors, params.config)
    p = _param_vars(params)
    reward, y = _forward_graph(bundles, p, params.config, True, params.tensors)
    return reward.data.copy(), y.data.copy()


@dataclass(frozen=True)
class ScoreDistribution:
    rewards: np.ndarray
    probabilities: np.ndarray


def softmax_distribution(rewards) -> ScoreDistribution:
    rewards = np.asarray(rewards, dtype=float)
    if rewards.size == 0:
        raise ValueError("empty reward list")
    if not np.all(np.isfinite(rewards)):
        raise ValueError("non-finite rewards")
    shifted = rewards - np.max(rewards)
    e = np.exp(shifted)
    return ScoreDistribution(rewards=rewards, probabilities=e / e.sum())


def focal_nll(dist: ScoreDistribution, demo_index: int, gamma: float = 2.0) -> float:
    """-(1 - P*)^gamma * log P* for the demonstrated trajectory."""
    n = len(dist.probabilities)
    if not 0 <= demo_index < n:
        raise IndexError(f"demo index {demo_index} out of range for {n} trajectories")
    shifted = dist.rewards - np.max(dist.rewards)
    log_p = shifted[demo_index] - np.log(np.sum(np.exp(shifted)))
    p = np.exp(log_p)
    return float(-((1.0 - p) ** gamma) * log_p)


def batch_loss_graph(groups, demo_indices, params: ScorerParams, gamma: float,
                     train: bool = True):
    """Mean focal NLL over a batch of (trajectory-set bundles, demo index).

    Returns (loss Var, dict of parameter Vars) with the whole computation on
    the tape; gradients arrive in the parameter Vars after loss.backward().
    """
    flat = [b for group in groups for b in group]
    offsets = np.cumsum([0] + [len(g) for g in groups])
    p = _param_vars(params)
    reward, _ = _forward_graph(flat, p, params.config, train, params.tensors)
    losses = []
    for gi, demo in enumerate(demo_indices):
        seg = reward[int(offsets[gi]):int(offsets[gi + 1])]
        lse = logsumexp(seg)
        log_p = seg[int(demo)] - lse
        prob = log_p.exp()
        losses.append((1.0 - prob) ** gamma * (-log_p))
    loss = stack(losses).mean()
    return loss, p


def backward(groups, demo_indices, params: ScorerParams, gamma: float = 2.0):
    """Analytic gradients of the mean focal NLL w.r.t. every parameter."""
    loss, p = batch_loss_graph(groups, demo_indices, params, gamma)
    loss.backward()
    grads = {name: (var.grad if var.grad is not None else np.zeros_like(var.data))
             for name, var in p.items()}
    return float(loss.data), grads


# --- parameter file format -------------------------------------------------
# magic "DIRL", u32 version, config header, named float64 tensors

_MAGIC = b"DIRL"
_VERSION = 1


class ParamsFormatError(Exception):
    pass


def save_params(params: ScorerParams, path) -> None:
    cfg = params.config
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<5I", cfg.hidden_size, cfg.model_dim, cfg.ff_hidden,
                            cfg.head_hidden, cfg.n_heads))
        f.write(struct.pack("<I", len(params.tensors)))
        for name in sorted(params.tensors):
            arr = params.tensors[name]
            enc = name.encode()
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_params(path) -> ScorerParams:
    try:
        with open(path, "rb") as f:
            data = f.read()
        buf = io.BytesIO(data)
        if buf.read(4) != _MAGIC:
            raise ParamsFormatError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", buf.read(4))
        if version != _VERSION:
            raise ParamsFormatError(f"{path}: unsupported version {version}")
        cfg = ScorerConfig(*struct.unpack("<5I", buf.read(20)))
        (count,) = struct.unpack("<I", buf.read(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", buf.read(2))
            name = buf.read(name_len).decode()
            (ndim,) = struct.unpack("<B", buf.read(1))
            shape = struct.unpack(f"<{ndim}Q", buf.read(8 * ndim))
            n = int(np.prod(shape)) if shape else 1
            raw = buf.read(8 * n)
            if len(raw) != 8 * n:
                raise ParamsFormatError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        return ScorerParams(cfg, tensors)
    except (struct.error, ValueError) as exc:
        raise ParamsFormatError(f"{path}: corrupt parameter file: {exc}") from exc
