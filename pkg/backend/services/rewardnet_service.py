"""
Learned reward function.

Pipeline per (source, target) pair, with all weights shared between the two
clouds:

    points → EdgeConv × L (dynamic k-NN graph per layer)      N×K
           → cross attention, Φ = F + φ(F, F_other)              N×K
           → column-wise maxpool                                  K
           → fuse(source, target) → shared MLP → rotation head (12)
                                               → translation head (12)

Everything is NumPy float64 with explicit backward passes so gradients can
be checked against central finite differences. The k-NN graphs and max
selections are treated as fixed during differentiation (piecewise-constant).
"""

import logging
import math
from collections import OrderedDict
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from exceptions import NumericalError, ValidationError
from services.action_service import AccumulatedTransform
from services.cloud_service import CloudPair
from services.sampling_service import DEFAULT_SEED, make_rng

logger = logging.getLogger(__name__)

LN_EPS = 1e-5
N_ROTATION_ACTIONS = 12
KNN_BLOCK_ELEMENTS = 1 << 22


class NetConfig(BaseModel):
    knn_k: int = Field(default=8, ge=1)
    edgeconv_widths: List[int] = Field(default_factory=lambda: [16, 16, 32])
    embed_dim: int = Field(default=32, ge=1)
    attn_heads: int = Field(default=2, ge=1)
    ffn_width: Optional[int] = None
    shared_mlp_widths: List[int] = Field(default_factory=lambda: [64])
    head_mlp_widths: List[int] = Field(default_factory=lambda: [32])
    n_actions: int = 24
    fusion: Literal["concat", "difference"] = "concat"
    seed: int = DEFAULT_SEED

    @model_validator(mode="after")
    def _consistent(self) -> "NetConfig":
        if self.embed_dim % self.attn_heads != 0:
            raise ValueError("embed_dim must be divisible by attn_heads")
        if not self.edgeconv_widths or self.edgeconv_widths[-1] != self.embed_dim:
            raise ValueError("the last EdgeConv width must equal embed_dim")
        if self.n_actions != 2 * N_ROTATION_ACTIONS:
            raise ValueError("the reward heads produce 12 rotation and 12 translation rewards")
        return self

    @property
    def ffn_dim(self) -> int:
        return self.ffn_width or 2 * self.embed_dim

    @classmethod
    def desk(cls, seed: int = DEFAULT_SEED) -> "NetConfig":
        return cls(fusion="difference", seed=seed)

    @classmethod
    def tiny(cls, seed: int = DEFAULT_SEED) -> "NetConfig":
        """Gradient-check scale: k 4, widths [8, 8], embed 8, 2 heads"""
        return cls(knn_k=4, edgeconv_widths=[8, 8], embed_dim=8, attn_heads=2,
                   shared_mlp_widths=[16], head_mlp_widths=[8], seed=seed)

    @classmethod
    def full(cls, seed: int = DEFAULT_SEED) -> "NetConfig":
        return cls(knn_k=20, edgeconv_widths=[64, 64, 128, 256, 1024], embed_dim=1024, attn_heads=4,
                   shared_mlp_widths=[512, 256], head_mlp_widths=[128], seed=seed)


class NetworkParameters:
    """Named parameter blocks in a fixed order; flattenable to one vector.

    Source and target branches read the same blocks, so there is a single
    storage for every shared weight.
    """

    def __init__(self, blocks: "OrderedDict[str, np.ndarray]"):
        self.blocks = blocks

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blocks[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if value.shape != self.blocks[name].shape:
            raise ValidationError(f"Block '{name}' expects shape {self.blocks[name].shape}, got {value.shape}")
        self.blocks[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self.blocks)

    def items(self):
        return self.blocks.items()

    @property
    def size(self) -> int:
        return sum(b.size for b in self.blocks.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([b.reshape(-1) for b in self.blocks.values()])

    def restore(self, vector: np.ndarray) -> "NetworkParameters":
        """New parameter set with the same shapes, filled from a flat vector"""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ValidationError(f"Flat vector needs {self.size} entries, got shape {vector.shape}")
        out, offset = OrderedDict(), 0
        for name, block in self.blocks.items():
            out[name] = vector[offset:offset + block.size].reshape(block.shape).copy()
            offset += block.size
        return NetworkParameters(out)

    def copy(self) -> "NetworkParameters":
        return NetworkParameters(OrderedDict((k, v.copy()) for k, v in self.blocks.items()))

    def zeros_like(self) -> "NetworkParameters":
        return NetworkParameters(OrderedDict((k, np.zeros_like(v)) for k, v in self.blocks.items()))

    def squared_norm(self) -> float:
        return float(sum(np.sum(b * b) for b in self.blocks.values()))


Gradients = NetworkParameters


def init_parameters(cfg: NetConfig, seed: Optional[int] = None) -> NetworkParameters:
    """Uniform fan-in initialization; biases zero, LayerNorm scale one.

    Weights feeding a ReLU use the bound √(6/fan_in), linear maps 1/√fan_in.
    """
    rng = make_rng(cfg.seed if seed is None else seed)
    blocks: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def dense(name: str, fan_in: int, fan_out: int, bias: bool = True, relu: bool = False) -> None:
        bound = math.sqrt(6.0 / fan_in) if relu else 1.0 / math.sqrt(fan_in)
        blocks[f"{name}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if bias:
            blocks[f"{name}.b"] = np.zeros(fan_out)

    k_in = 3
    for layer, width in enumerate(cfg.edgeconv_widths):
        bound = math.sqrt(6.0 / (2 * k_in))
        blocks[f"edge{layer}.w"] = rng.uniform(-bound, bound, size=(k_in, width))
        blocks[f"edge{layer}.v"] = rng.uniform(-bound, bound, size=(k_in, width))
        k_in = width

    k = cfg.embed_dim
    blocks["attn.ln1.gamma"] = np.ones(k)
    blocks["attn.ln1.beta"] = np.zeros(k)
    dense("attn.q", k, k)
    dense("attn.k", k, k, bias=False)
    dense("attn.v", k, k)
    blocks["attn.ln2.gamma"] = np.ones(k)
    blocks["attn.ln2.beta"] = np.zeros(k)
    dense("attn.ffn1", k, cfg.ffn_dim, relu=True)
    dense("attn.ffn2", cfg.ffn_dim, k)
    dense("attn.out", k, k)

    width = 2 * k if cfg.fusion == "concat" else k
    for layer, out in enumerate(cfg.shared_mlp_widths):
        dense(f"shared{layer}", width, out, relu=True)
        width = out
    for head in ("rot", "trans"):
        head_in = width
        for layer, out in enumerate(cfg.head_mlp_widths):
            dense(f"{head}{layer}", head_in, out, relu=True)
            head_in = out
        dense(f"{head}{len(cfg.head_mlp_widths)}", head_in, N_ROTATION_ACTIONS)
    return NetworkParameters(blocks)


# --- graph ------------------------------------------------------------------

def knn_graph(embeddings: np.ndarray, k: int) -> np.ndarray:
    """k nearest neighbours of every node (self excluded, ties to the lower index) as an N×k index array"""
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    if k >= n:
        raise ValidationError(f"knn_k ({k}) must be smaller than the number of points ({n})")
    dist = np.empty((n, n))
    rows = max(1, KNN_BLOCK_ELEMENTS // max(n * x.shape[1], 1))
    for start in range(0, n, rows):
        block = x[start:start + rows]
        dist[start:start + rows] = np.sum((block[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(dist, np.inf)
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


# --- EdgeConv ---------------------------------------------------------------

def edgeconv_forward(x: np.ndarray, edges: np.ndarray, w: np.ndarray, v: np.ndarray):
    """x_i,m = max_j ReLU(w_m·x_i + v_m·x_j) over the neighbours j of i"""
    if x.shape[1] != w.shape[0] or w.shape != v.shape:
        raise ValidationError(f"EdgeConv shape mismatch: input {x.shape}, weights {w.shape}/{v.shape}")
    own = x @ w
    other = x @ v
    pre = own[:, None, :] + other[edges]
    act = np.maximum(pre, 0.0)
    choice = np.argmax(act, axis=1)
    out = np.take_along_axis(act, choice[:, None, :], axis=1)[:, 0, :]
    return out, (x, edges, choice, out > 0.0)


def edgeconv_backward(dout: np.ndarray, cache, w: np.ndarray, v: np.ndarray, need_dx: bool = True):
    x, edges, choice, active = cache
    g = dout * active
    n, m = g.shape
    d_own = g
    d_other = np.zeros((n, m))
    rows = edges[np.arange(n)[:, None], choice]
    np.add.at(d_other, (rows, np.broadcast_to(np.arange(m), (n, m))), g)
    dw = x.T @ d_own
    dv = x.T @ d_other
    dx = d_own @ w.T + d_other @ v.T if need_dx else None
    return dx, dw, dv


# --- small building blocks -------------------------------------------------

def _layer_norm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv)


def _layer_norm_backward(dy, cache, gamma):
    xhat, inv = cache
    k = xhat.shape[-1]
    dxhat = dy * gamma
    dx = inv / k * (k * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True))
    return dx, np.sum(dy * xhat, axis=0), np.sum(dy, axis=0)


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, heads):
    n, k = x.shape
    return x.reshape(n, heads, k // heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * d)


def _accumulate(grads: Dict[str, np.ndarray], name: str, value: np.ndarray) -> None:
    grads[name] = grads[name] + value if name in grads else value


# --- cross attention --------------------------------------------------------

def attention_weights(params: NetworkParameters, f_query: np.ndarray, f_key: np.ndarray, heads: int) -> np.ndarray:
    """Softmax attention weights (heads × N_query × N_key) of φ(f_query, f_key)"""
    u, _ = _layer_norm(f_query, params["attn.ln1.gamma"], params["attn.ln1.beta"])
    w, _ = _layer_norm(f_key, params["attn.ln1.gamma"], params["attn.ln1.beta"])
    q = _split_heads(u @ params["attn.q.w"] + params["attn.q.b"], heads)
    k = _split_heads(w @ params["attn.k.w"], heads)
    return _softmax(q @ k.transpose(0, 2, 1) / math.sqrt(q.shape[-1]))


def _phi_forward(params: NetworkParameters, x: np.ndarray, y: np.ndarray, heads: int):
    """φ(x, y): pre-norm multi-head attention (queries x, keys/values y) + position-wise FFN, then the output projection"""
    u, ln_u = _layer_norm(x, params["attn.ln1.gamma"], params["attn.ln1.beta"])
    w, ln_w = _layer_norm(y, params["attn.ln1.gamma"], params["attn.ln1.beta"])
    q = _split_heads(u @ params["attn.q.w"] + params["attn.q.b"], heads)
    k = _split_heads(w @ params["attn.k.w"], heads)
    v = _split_heads(w @ params["attn.v.w"] + params["attn.v.b"], heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    p = _softmax(q @ k.transpose(0, 2, 1) * scale)
    a = _merge_heads(p @ v)
    z, ln_z = _layer_norm(a, params["attn.ln2.gamma"], params["attn.ln2.beta"])
    hidden_pre = z @ params["attn.ffn1.w"] + params["attn.ffn1.b"]
    hidden = np.maximum(hidden_pre, 0.0)
    g = a + hidden @ params["attn.ffn2.w"] + params["attn.ffn2.b"]
    out = g @ params["attn.out.w"] + params["attn.out.b"]
    cache = (u, ln_u, w, ln_w, q, k, v, p, scale, a, z, ln_z, hidden_pre, hidden, g)
    return out, cache


def _phi_backward(params: NetworkParameters, dout: np.ndarray, cache, heads: int, grads: Dict[str, np.ndarray]):
    u, ln_u, w, ln_w, q, k, v, p, scale, a, z, ln_z, hidden_pre, hidden, g = cache
    _accumulate(grads, "attn.out.w", g.T @ dout)
    _accumulate(grads, "attn.out.b", dout.sum(axis=0))
    dg = dout @ params["attn.out.w"].T

    _accumulate(grads, "attn.ffn2.w", hidden.T @ dg)
    _accumulate(grads, "attn.ffn2.b", dg.sum(axis=0))
    dhidden = (dg @ params["attn.ffn2.w"].T) * (hidden_pre > 0.0)
    _accumulate(grads, "attn.ffn1.w", z.T @ dhidden)
    _accumulate(grads, "attn.ffn1.b", dhidden.sum(axis=0))
    dz = dhidden @ params["attn.ffn1.w"].T
    da_ln, dgamma2, dbeta2 = _layer_norm_backward(dz, ln_z, params["attn.ln2.gamma"])
    _accumulate(grads, "attn.ln2.gamma", dgamma2)
    _accumulate(grads, "attn.ln2.beta", dbeta2)
    da = dg + da_ln

    do = _split_heads(da, heads)
    dp = do @ v.transpose(0, 2, 1)
    dv = p.transpose(0, 2, 1) @ do
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 2, 1) @ q
    dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)

    _accumulate(grads, "attn.q.w", u.T @ dq)
    _accumulate(grads, "attn.q.b", dq.sum(axis=0))
    _accumulate(grads, "attn.k.w", w.T @ dk)
    _accumulate(grads, "attn.v.w", w.T @ dv)
    _accumulate(grads, "attn.v.b", dv.sum(axis=0))
    du = dq @ params["attn.q.w"].T
    dw = dk @ params["attn.k.w"].T + dv @ params["attn.v.w"].T

    dx, dgu, dbu = _layer_norm_backward(du, ln_u, params["attn.ln1.gamma"])
    dy, dgw, dbw = _layer_norm_backward(dw, ln_w, params["attn.ln1.gamma"])
    _accumulate(grads, "attn.ln1.gamma", dgu + dgw)
    _accumulate(grads, "attn.ln1.beta", dbu + dbw)
    return dx, dy


def cross_attention(params: NetworkParameters, f_src: np.ndarray, f_tgt: np.ndarray, heads: int):
    """Φ_src = F_src + φ(F_src, F_tgt) and Φ_tgt = F_tgt + φ(F_tgt, F_src)"""
    if f_src.shape[1] != f_tgt.shape[1]:
        raise ValidationError(f"Embedding widths differ: {f_src.shape} vs {f_tgt.shape}")
    phi_src, _ = _phi_forward(params, f_src, f_tgt, heads)
    phi_tgt, _ = _phi_forward(params, f_tgt, f_src, heads)
    return f_src + phi_src, f_tgt + phi_tgt


# --- full network -----------------------------------------------------------

class RewardNetwork:
    """Forward/backward for the reward network of one NetConfig"""

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg

    def init_parameters(self, seed: Optional[int] = None) -> NetworkParameters:
        return init_parameters(self.cfg, seed)

    def _embed(self, params: NetworkParameters, points: np.ndarray):
        h = np.asarray(points, dtype=np.float64)
        if h.shape[0] < self.cfg.knn_k + 1:
            raise ValidationError(f"Cloud has {h.shape[0]} points, needs at least {self.cfg.knn_k + 1}")
        caches = []
        for layer in range(len(self.cfg.edgeconv_widths)):
            edges = knn_graph(h, self.cfg.knn_k)
            h, cache = edgeconv_forward(h, edges, params[f"edge{layer}.w"], params[f"edge{layer}.v"])
            caches.append(cache)
        return h, caches

    def _dense_stack(self, params, x, prefix: str, n_layers: int, last_linear: bool):
        caches = []
        for layer in range(n_layers):
            pre = x @ params[f"{prefix}{layer}.w"] + params[f"{prefix}{layer}.b"]
            linear = last_linear and layer == n_layers - 1
            caches.append((x, pre, linear))
            x = pre if linear else np.maximum(pre, 0.0)
        return x, caches

    def _dense_stack_backward(self, params, dx, caches, prefix: str, grads):
        for layer in reversed(range(len(caches))):
            x, pre, linear = caches[layer]
            if not linear:
                dx = dx * (pre > 0.0)
            _accumulate(grads, f"{prefix}{layer}.w", np.outer(x, dx))
            _accumulate(grads, f"{prefix}{layer}.b", dx)
            dx = dx @ params[f"{prefix}{layer}.w"].T
        return dx

    def forward(self, params: NetworkParameters, source: np.ndarray, target: np.ndarray, keep_cache: bool = False):
        """24-vector of predicted rewards for moving source onto target (canonical action order)"""
        heads = self.cfg.attn_heads
        f_src, edge_src = self._embed(params, source)
        f_tgt, edge_tgt = self._embed(params, target)
        phi_src, attn_src = _phi_forward(params, f_src, f_tgt, heads)
        phi_tgt, attn_tgt = _phi_forward(params, f_tgt, f_src, heads)
        big_src = f_src + phi_src
        big_tgt = f_tgt + phi_tgt
        arg_src = np.argmax(big_src, axis=0)
        arg_tgt = np.argmax(big_tgt, axis=0)
        cols = np.arange(big_src.shape[1])
        g_src = big_src[arg_src, cols]
        g_tgt = big_tgt[arg_tgt, cols]
        fused = np.concatenate([g_src, g_tgt]) if self.cfg.fusion == "concat" else g_src - g_tgt

        shared, shared_cache = self._dense_stack(params, fused, "shared", len(self.cfg.shared_mlp_widths), False)
        n_head = len(self.cfg.head_mlp_widths) + 1
        rot, rot_cache = self._dense_stack(params, shared, "rot", n_head, True)
        trans, trans_cache = self._dense_stack(params, shared, "trans", n_head, True)
        out = np.concatenate([rot, trans])
        if not keep_cache:
            return out
        cache = dict(
            edge_src=edge_src, edge_tgt=edge_tgt, attn_src=attn_src, attn_tgt=attn_tgt,
            shape_src=big_src.shape, shape_tgt=big_tgt.shape, arg_src=arg_src, arg_tgt=arg_tgt,
            shared=shared_cache, rot=rot_cache, trans=trans_cache,
        )
        return out, cache

    def backward_sample(self, params: NetworkParameters, dout: np.ndarray, cache, grads: Dict[str, np.ndarray]) -> None:
        """Accumulate d(loss)/d(params) for one sample given d(loss)/d(output)"""
        heads = self.cfg.attn_heads
        d_shared = self._dense_stack_backward(params, dout[N_ROTATION_ACTIONS:], cache["trans"], "trans", grads)
        d_shared = d_shared + self._dense_stack_backward(params, dout[:N_ROTATION_ACTIONS], cache["rot"], "rot", grads)
        d_fused = self._dense_stack_backward(params, d_shared, cache["shared"], "shared", grads)

        k = cache["shape_src"][1]
        if self.cfg.fusion == "concat":
            dg_src, dg_tgt = d_fused[:k], d_fused[k:]
        else:
            dg_src, dg_tgt = d_fused, -d_fused
        cols = np.arange(k)
        d_big_src = np.zeros(cache["shape_src"])
        d_big_tgt = np.zeros(cache["shape_tgt"])
        d_big_src[cache["arg_src"], cols] = dg_src
        d_big_tgt[cache["arg_tgt"], cols] = dg_tgt

        dx1, dy1 = _phi_backward(params, d_big_src, cache["attn_src"], heads, grads)
        dx2, dy2 = _phi_backward(params, d_big_tgt, cache["attn_tgt"], heads, grads)
        df_src = d_big_src + dx1 + dy2
        df_tgt = d_big_tgt + dx2 + dy1

        for df, edge_caches in ((df_src, cache["edge_src"]), (df_tgt, cache["edge_tgt"])):
            for layer in reversed(range(len(edge_caches))):
                w, v = params[f"edge{layer}.w"], params[f"edge{layer}.v"]
                df, dw, dv = edgeconv_backward(df, edge_caches[layer], w, v, need_dx=layer > 0)
                _accumulate(grads, f"edge{layer}.w", dw)
                _accumulate(grads, f"edge{layer}.v", dv)


def loss(h: np.ndarray, g: np.ndarray, params: NetworkParameters, lam: float) -> float:
    """(1/|A|)·‖g − h‖² + λ‖Θ‖²"""
    h = np.asarray(h, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if h.shape != g.shape:
        raise ValidationError(f"Reward vectors differ in shape: {h.shape} vs {g.shape}")
    return float(np.sum((g - h) ** 2) / h.size) + lam * params.squared_norm()


Sample = Tuple[np.ndarray, np.ndarray, np.ndarray]


def batch_loss(net: RewardNetwork, params: NetworkParameters, batch: Sequence[Sample], lam: float) -> float:
    """Mean over the batch of the per-sample loss"""
    data = np.mean([np.sum((g - net.forward(params, src, tgt)) ** 2) / g.size for src, tgt, g in batch])
    return float(data) + lam * params.squared_norm()


def backward(net: RewardNetwork, params: NetworkParameters, batch: Sequence[Sample], lam: float) -> Tuple[float, Gradients]:
    """Mean batch loss and its gradient with respect to every parameter block"""
    if not batch:
        raise ValidationError("Batch is empty")
    raw: Dict[str, np.ndarray] = {}
    total = 0.0
    for src, tgt, g in batch:
        h, cache = net.forward(params, src, tgt, keep_cache=True)
        total += float(np.sum((g - h) ** 2) / g.size)
        dout = 2.0 * (h - g) / (g.size * len(batch))
        net.backward_sample(params, dout, cache, raw)

    grads = params.zeros_like()
    for name, block in params.items():
        grad = raw.get(name, np.zeros_like(block)) + 2.0 * lam * block
        if not np.all(np.isfinite(grad)):
            raise NumericalError("Non-finite gradient", block=name)
        grads[name] = grad
    return total / len(batch) + lam * params.squared_norm(), grads


def _loss_and_pattern(net: RewardNetwork, params: NetworkParameters, batch: Sequence[Sample], lam: float):
    """Mean batch loss plus the graph edges, max selections and ReLU masks it was computed with.

    The loss is smooth in the parameters for as long as that pattern stays fixed.
    """
    losses, pattern = [], []
    for src, tgt, g in batch:
        h, cache = net.forward(params, src, tgt, keep_cache=True)
        losses.append(np.sum((g - h) ** 2) / g.size)
        for edge_caches in (cache["edge_src"], cache["edge_tgt"]):
            for _, edges, choice, active in edge_caches:
                pattern.extend([edges, choice, active])
        # index 12 of the attention cache is the FFN pre-activation
        pattern.extend([cache["attn_src"][12] > 0.0, cache["attn_tgt"][12] > 0.0])
        pattern.extend([cache["arg_src"], cache["arg_tgt"]])
        for key in ("shared", "rot", "trans"):
            pattern.extend(pre > 0.0 for _, pre, linear in cache[key] if not linear)
    return float(np.mean(losses)) + lam * params.squared_norm(), pattern


def _same_pattern(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(
    net: RewardNetwork,
    params: NetworkParameters,
    batch: Sequence[Sample],
    lam: float = 0.0,
    step: float = 1e-5,
) -> Dict[str, float]:
    """Per-block relative error of the analytic gradient against central differences.

    Relative error of a block is max|analytic − numeric| / max(max|analytic|, max|numeric|).
    Entries whose ±step evaluations cross a kink (a k-NN graph, max selection
    or ReLU mask differs from the unperturbed pass) are left out.
    """
    _, grads = backward(net, params, batch, lam)
    _, base = _loss_and_pattern(net, params, batch, lam)
    errors: Dict[str, float] = {}
    skipped = 0
    for name, block in params.items():
        numeric = np.zeros_like(block)
        smooth = np.ones(block.shape, dtype=bool)
        flat = block.reshape(-1)
        num_flat = numeric.reshape(-1)
        smooth_flat = smooth.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus, plus_pattern = _loss_and_pattern(net, params, batch, lam)
            flat[i] = original - step
            minus, minus_pattern = _loss_and_pattern(net, params, batch, lam)
            flat[i] = original
            num_flat[i] = (plus - minus) / (2.0 * step)
            smooth_flat[i] = _same_pattern(base, plus_pattern) and _same_pattern(base, minus_pattern)
        skipped += int(smooth.size - smooth.sum())
        analytic = grads[name][smooth]
        numeric = numeric[smooth]
        if analytic.size == 0:
            errors[name] = 0.0
            continue
        scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-8)
        errors[name] = float(np.max(np.abs(analytic - numeric))) / scale
        logger.debug(f"Gradient check {name}: relative error {errors[name]:.3e}")
    if skipped:
        logger.info(f"Gradient check skipped {skipped} of {params.size} entries at kinks")
    return errors


class NetworkRewards:
    """Reward source backed by trained parameters (read-only, shareable across threads)"""

    name = "network"

    def __init__(self, net: RewardNetwork, params: NetworkParameters):
        self.net = net
        self.params = params

    def rewards(self, pair: CloudPair, acc: AccumulatedTransform) -> np.ndarray:
        current = acc.as_transform().apply(pair.source.points)
        return self.net.forward(self.params, current, pair.target.points)
