"""Masked Transformer encoder over WK graphs with hand-written backprop.

Each layer is post-norm: masked multi-head self-attention, add & layer norm,
GELU feed-forward, add & layer norm. The additive mask restricts every node
to its 1-hop neighbours, so ``L`` layers see exactly the ``L``-hop ball.

Entity embeddings are not model parameters: the caller passes the rows it
read from the embedding store as :class:`EntityRows`, and gets their
gradients back alongside the dense gradients.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import IdOutOfRange, MissingCandidateRows, NonFiniteLoss, ShapeMismatch, VersionMismatch
from .graph import ENTITY, PAD_KIND, RELATION, WORD

LN_EPS = 1e-5
INIT_STD = 0.02
LAYER_KEYS = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo", "ln1_g", "ln1_b",
              "W1", "b1", "W2", "b2", "ln2_g", "ln2_b")

CKPT_MAGIC = b"WKLM"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    n_words: int
    n_relations: int
    n_entities: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_pos: int = 128
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ShapeMismatch(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_k(self):
        return self.d_model // self.n_heads

    @property
    def relation_mask_id(self):
        return self.n_relations

    @property
    def entity_mask_id(self):
        return self.n_entities


def param_shapes(cfg):
    """Tensor names and shapes in checkpoint order."""
    d, ff = cfg.d_model, cfg.d_ff
    shapes = {
        "word_emb": (cfg.n_words, d),
        "relation_emb": (cfg.n_relations + 1, d),
        "entity_mask": (1, d),
        "type_emb": (3, d),
        "pos_emb": (cfg.max_pos, d),
    }
    for layer in range(cfg.n_layers):
        for key, shape in zip(LAYER_KEYS, [(d, d), (d,), (d, d), (d,), (d, d), (d,), (d, d), (d,),
                                           (d,), (d,), (d, ff), (ff,), (ff, d), (d,), (d,), (d,)]):
            shapes[f"layer{layer}.{key}"] = shape
    shapes.update({
        "word_head.W": (d, cfg.n_words),
        "word_head.b": (cfg.n_words,),
        "relation_head.W": (d, cfg.n_relations),
        "relation_head.b": (cfg.n_relations,),
        "entity_proj.W": (d, d),
        "entity_proj.b": (d,),
    })
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def layer(self, i):
        return {k: self.tensors[f"layer{i}.{k}"] for k in LAYER_KEYS}

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype):
        cfg = ModelConfig(**{**self.config.__dict__, "dtype": np.dtype(dtype).name})
        return ModelParams(cfg, {k: v.astype(dtype) for k, v in self.tensors.items()})


def init_params(cfg, rng):
    dtype = np.dtype(cfg.dtype)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        short = name.rsplit(".", 1)[-1]
        if short.endswith("_g"):
            tensors[name] = np.ones(shape, dtype=dtype)
        elif short.startswith("b") or short.endswith("_b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            tensors[name] = (rng.standard_normal(shape) * INIT_STD).astype(dtype)
    return ModelParams(cfg, tensors)


@dataclass
class EntityRows:
    """Entity vectors read from the store, keyed by sorted unique ids."""

    ids: np.ndarray
    vectors: np.ndarray

    def slots(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        pos = np.searchsorted(self.ids, ids)
        pos = np.minimum(pos, max(len(self.ids) - 1, 0))
        if len(self.ids) == 0 or not np.all(self.ids[pos] == ids):
            missing = sorted(set(ids.ravel().tolist()) - set(self.ids.tolist()))
            raise MissingCandidateRows(f"entity rows not supplied for ids {missing[:10]}")
        return pos


# ---------------------------------------------------------------------------
# primitives


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


def layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, (dy * xhat).reshape(-1, g.shape[0]).sum(0), dy.reshape(-1, g.shape[0]).sum(0)


def masked_softmax(scores, mask):
    s = scores + mask
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


def _split_heads(x, h):
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dk)


def _linear_grads(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1]), dy.reshape(-1, dy.shape[-1]).sum(0)


# ---------------------------------------------------------------------------
# forward


def masked_attention(X, M, p, n_heads, return_cache=False):
    """Multi-head attention ``softmax(QK^T / sqrt(d_k) + M) V`` plus output projection.

    ``X`` is ``(B, n, d)`` (or ``(n, d)``), ``M`` the matching additive mask.
    Returns the projected output and the ``(B, heads, n, n)`` weights.
    """
    squeeze = X.ndim == 2
    if squeeze:
        X, M = X[None], M[None]
    b, n, d = X.shape
    if M.shape != (b, n, n):
        raise ShapeMismatch(f"mask shape {M.shape} does not match states {X.shape}")
    if p["Wq"].shape[0] != d:
        raise ShapeMismatch(f"state width {d} does not match weights {p['Wq'].shape}")
    dk = d // n_heads
    q = _split_heads(X @ p["Wq"] + p["bq"], n_heads)
    k = _split_heads(X @ p["Wk"] + p["bk"], n_heads)
    v = _split_heads(X @ p["Wv"] + p["bv"], n_heads)
    P = masked_softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(dk), M[:, None].astype(X.dtype))
    O = _merge_heads(P @ v)
    out = O @ p["Wo"] + p["bo"]
    if return_cache:
        return out, P, (X, q, k, v, P, O)
    if squeeze:
        return out[0], P[0]
    return out, P


def _block_forward(X, M, p, n_heads):
    attn, _, acache = masked_attention(X, M, p, n_heads, return_cache=True)
    H1, ln1 = layer_norm(X + attn, p["ln1_g"], p["ln1_b"])
    U = H1 @ p["W1"] + p["b1"]
    G = gelu(U)
    F = G @ p["W2"] + p["b2"]
    Y, ln2 = layer_norm(H1 + F, p["ln2_g"], p["ln2_b"])
    return Y, (acache, ln1, H1, U, G, ln2)


def _block_backward(dY, p, cache, n_heads):
    (X, q, k, v, P, O), ln1, H1, U, G, ln2 = cache
    g = {}
    dR2, g["ln2_g"], g["ln2_b"] = layer_norm_backward(dY, p["ln2_g"], ln2)
    g["W2"], g["b2"] = _linear_grads(G, dR2)
    dU = (dR2 @ p["W2"].T) * gelu_grad(U)
    g["W1"], g["b1"] = _linear_grads(H1, dU)
    dH1 = dR2 + dU @ p["W1"].T
    dR1, g["ln1_g"], g["ln1_b"] = layer_norm_backward(dH1, p["ln1_g"], ln1)
    g["Wo"], g["bo"] = _linear_grads(O, dR1)
    dO = _split_heads(dR1 @ p["Wo"].T, n_heads)
    dP = dO @ v.transpose(0, 1, 3, 2)
    dv = P.transpose(0, 1, 3, 2) @ dO
    dS = P * (dP - (dP * P).sum(-1, keepdims=True)) / np.sqrt(q.shape[-1])
    dq = _merge_heads(dS @ k)
    dk = _merge_heads(dS.transpose(0, 1, 3, 2) @ q)
    dv = _merge_heads(dv)
    g["Wq"], g["bq"] = _linear_grads(X, dq)
    g["Wk"], g["bk"] = _linear_grads(X, dk)
    g["Wv"], g["bv"] = _linear_grads(X, dv)
    dX = dR1 + dq @ p["Wq"].T + dk @ p["Wk"].T + dv @ p["Wv"].T
    return dX, g


def _check_ids(batch, cfg):
    k, ids = batch.kinds, batch.ids
    limits = {WORD: cfg.n_words - 1, RELATION: cfg.n_relations, ENTITY: cfg.n_entities}
    for kind, hi in limits.items():
        sel = ids[k == kind]
        if sel.size and (sel.min() < 0 or sel.max() > hi):
            raise IdOutOfRange(f"{('word', 'entity', 'relation')[kind]} id outside [0, {hi}]")
    pos = batch.positions[batch.valid]
    if pos.size and (pos.min() < 0 or pos.max() >= cfg.max_pos):
        raise IdOutOfRange(f"position outside [0, {cfg.max_pos})")


def embed(batch, params, entity_rows=None, return_cache=False):
    """Layer-0 states: token + type + position embedding; PAD slots are zero."""
    cfg = params.config
    _check_ids(batch, cfg)
    kinds, ids = batch.kinds, batch.ids
    X = np.zeros(kinds.shape + (cfg.d_model,), dtype=params["word_emb"].dtype)
    w = kinds == WORD
    r = kinds == RELATION
    e = kinds == ENTITY
    em = e & (ids == cfg.entity_mask_id)
    er = e & ~em
    X[w] = params["word_emb"][ids[w]]
    X[r] = params["relation_emb"][ids[r]]
    X[em] = params["entity_mask"][0]
    slots = None
    if er.any():
        if entity_rows is None:
            raise MissingCandidateRows("batch has entity nodes but no entity rows were supplied")
        slots = entity_rows.slots(ids[er])
        X[er] = entity_rows.vectors[slots]
    valid = batch.valid
    X[valid] += params["type_emb"][kinds[valid]] + params["pos_emb"][batch.positions[valid]]
    if return_cache:
        return X, (w, r, em, er, slots)
    return X


def encode(X, mask, params):
    """Run the layer stack on given layer-0 states."""
    return _encode(X, mask, params)[0]


def _encode(X, mask, params):
    cfg = params.config
    M = np.asarray(mask, dtype=X.dtype)
    caches = []
    for layer in range(cfg.n_layers):
        X, cache = _block_forward(X, M, params.layer(layer), cfg.n_heads)
        caches.append(cache)
    return X, caches


def forward(batch, params, entity_rows=None, return_cache=False):
    """Final node states ``(B, n, d)`` for a padded batch."""
    X0, ecache = embed(batch, params, entity_rows, return_cache=True)
    H, caches = _encode(X0, batch.mask, params)
    if return_cache:
        return H, (ecache, caches)
    return H


def attention_weights(batch, params, entity_rows=None):
    """Per-layer attention weights ``(B, heads, n, n)``."""
    X = embed(batch, params, entity_rows)
    M = batch.mask.astype(X.dtype)
    out = []
    for layer in range(params.config.n_layers):
        p = params.layer(layer)
        out.append(masked_attention(X, M, p, params.config.n_heads)[1])
        X, _ = _block_forward(X, M, p, params.config.n_heads)
    return out


# ---------------------------------------------------------------------------
# backward


@dataclass
class LossOutput:
    """What a loss function hands back to :func:`compute_gradients`.

    ``head_grads`` holds gradients for head parameters the loss used;
    ``row_grads`` is aligned with the batch's :class:`EntityRows`.
    """

    total: float
    d_hidden: np.ndarray
    head_grads: dict
    row_grads: np.ndarray = None
    parts: dict = field(default_factory=dict)


def backward(d_hidden, cache, params, batch, entity_rows=None):
    cfg = params.config
    (w, r, em, er, slots), caches = cache
    grads = {}
    dX = d_hidden
    for layer in reversed(range(cfg.n_layers)):
        dX, g = _block_backward(dX, params.layer(layer), caches[layer], cfg.n_heads)
        for key, val in g.items():
            grads[f"layer{layer}.{key}"] = val
    valid = batch.valid
    d_valid = dX[valid]
    for name in ("word_emb", "relation_emb", "entity_mask", "type_emb", "pos_emb"):
        grads[name] = np.zeros_like(params[name])
    np.add.at(grads["type_emb"], batch.kinds[valid], d_valid)
    np.add.at(grads["pos_emb"], batch.positions[valid], d_valid)
    np.add.at(grads["word_emb"], batch.ids[w], dX[w])
    np.add.at(grads["relation_emb"], batch.ids[r], dX[r])
    grads["entity_mask"][0] = dX[em].sum(0)
    row_grads = None
    if entity_rows is not None:
        row_grads = np.zeros_like(entity_rows.vectors)
        if slots is not None:
            np.add.at(row_grads, slots, dX[er])
    return grads, row_grads


def compute_gradients(batch, params, entity_rows, loss_fn):
    """Forward, loss, and exact reverse-mode gradients.

    ``loss_fn(hidden)`` must return a :class:`LossOutput`. Returns
    ``(loss_output, dense_grads, entity_row_grads)``.
    """
    H, cache = forward(batch, params, entity_rows, return_cache=True)
    out = loss_fn(H)
    if not np.isfinite(out.total):
        raise NonFiniteLoss(f"loss is {out.total}")
    grads, row_grads = backward(out.d_hidden, cache, params, batch, entity_rows)
    for name in params.tensors:
        if name not in grads:
            grads[name] = np.zeros_like(params[name])
    for name, g in out.head_grads.items():
        grads[name] = grads[name] + g
    if out.row_grads is not None:
        row_grads = out.row_grads if row_grads is None else row_grads + out.row_grads
    return out, grads, row_grads


# ---------------------------------------------------------------------------
# checkpoint


def _header_fields(cfg):
    return (cfg.d_model, cfg.d_k, cfg.n_heads, cfg.n_layers, cfg.d_ff, cfg.max_pos,
            cfg.n_words, cfg.n_relations, cfg.n_entities)


def write_tensors(fh, tensors):
    fh.write(struct.pack("<I", len(tensors)))
    for arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensors(fh):
    (count,) = struct.unpack("<I", fh.read(4))
    out = []
    for _ in range(count):
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out.append(np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape).copy())
    return out


def save_checkpoint(path, params):
    """Binary checkpoint: header then float32 tensors in :func:`param_shapes` order."""
    cfg = params.config
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H9I", CKPT_VERSION, *_header_fields(cfg)))
        write_tensors(fh, [params[name] for name in param_shapes(cfg)])


def load_checkpoint(path, dtype="float32"):
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise VersionMismatch(f"{path} is not a model checkpoint")
        version, d, dk, heads, layers, ff, max_pos, nw, nr, ne = struct.unpack("<H9I", fh.read(38))
        if version != CKPT_VERSION:
            raise VersionMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}")
        cfg = ModelConfig(n_words=nw, n_relations=nr, n_entities=ne, d_model=d, n_heads=heads,
                          n_layers=layers, d_ff=ff, max_pos=max_pos, dtype=np.dtype(dtype).name)
        if cfg.d_k != dk:
            raise VersionMismatch(f"header d_k={dk} inconsistent with d={d}, heads={heads}")
        arrays = read_tensors(fh)
    shapes = param_shapes(cfg)
    if len(arrays) != len(shapes):
        raise VersionMismatch(f"checkpoint has {len(arrays)} tensors, expected {len(shapes)}")
    tensors = {}
    for (name, shape), arr in zip(shapes.items(), arrays):
        if arr.shape != shape:
            raise VersionMismatch(f"tensor {name} has shape {arr.shape}, expected {shape}")
        tensors[name] = arr.astype(dtype)
    return ModelParams(cfg, tensors)
