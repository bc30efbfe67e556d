"""Layered sequence recommender with LoRA adapters and hand-written backprop.

Every layer is a single-head attention block followed by a two-layer ReLU
feed-forward network, each wrapped in a residual connection and layer norm.
Layer 1 additionally performs the item/position embedding lookup; layer N
mean-pools over positions and applies a linear output head.  Only the LoRA
adapters on the query and value projections are trainable.

All contractions go through ``np.einsum`` rather than BLAS ``matmul``: the
einsum loops are independent of batch size, so a sequence produces the same
bits whether it is run alone or inside a batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ContractViolation, NotFoundError, NumericError

ADAPTED_PROJECTIONS = ("q", "v")


@dataclass(frozen=True)
class ModelConfig:
    num_items: int
    hidden_dim: int = 16
    num_layers: int = 6
    lora_rank: int = 4
    lora_scale: float = 1.0
    ffn_dim: int = 0  # 0 means 2 * hidden_dim
    max_len: int = 10
    layer_norm: bool = True
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_items < 1:
            raise ContractViolation("num_items must be >= 1")
        if self.num_layers < 3:
            raise ContractViolation("num_layers must be >= 3 (input, middle, output)")
        if self.hidden_dim < 2:
            raise ContractViolation("hidden_dim must be >= 2")
        if not 1 <= self.lora_rank < self.hidden_dim:
            raise ContractViolation("lora_rank must satisfy 1 <= r < hidden_dim")
        if self.max_len < 1:
            raise ContractViolation("max_len must be >= 1")
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 2 * self.hidden_dim)

    def to_dict(self) -> dict:
        return {
            "num_items": self.num_items,
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "lora_rank": self.lora_rank,
            "lora_scale": self.lora_scale,
            "ffn_dim": self.ffn_dim,
            "max_len": self.max_len,
            "layer_norm": self.layer_norm,
            "ln_eps": self.ln_eps,
            "seed": self.seed,
        }


@dataclass
class LoraAdapter:
    """Low-rank delta ``scale * down @ up`` added to a d x d projection."""

    down: np.ndarray
    up: np.ndarray
    scale: float = 1.0

    def __post_init__(self) -> None:
        self.down = np.asarray(self.down, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if self.down.ndim != 2 or self.up.ndim != 2:
            raise ContractViolation("adapter matrices must be 2-D")
        d, r = self.down.shape
        if self.up.shape != (r, d):
            raise ContractViolation(
                f"adapter up has shape {self.up.shape}, expected {(r, d)}"
            )
        if not 1 <= r < d:
            raise ContractViolation(f"adapter rank {r} must satisfy 1 <= r < {d}")

    @property
    def rank(self) -> int:
        return self.down.shape[1]

    def delta(self) -> np.ndarray:
        return self.scale * (self.down @ self.up)

    def copy(self) -> LoraAdapter:
        return LoraAdapter(self.down.copy(), self.up.copy(), self.scale)


class LoraGrad(NamedTuple):
    down: np.ndarray
    up: np.ndarray


@dataclass
class LayerParams:
    frozen: dict[str, np.ndarray]
    adapters: dict[str, LoraAdapter]


@dataclass(frozen=True)
class HistorySequence:
    user_id: int
    item_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.item_ids) == 0:
            raise ContractViolation("history must be non-empty")
        object.__setattr__(self, "item_ids", tuple(int(i) for i in self.item_ids))

    def truncated(self, max_len: int) -> HistorySequence:
        if len(self.item_ids) <= max_len:
            return self
        return replace(self, item_ids=self.item_ids[-max_len:])


class ActivationTape:
    """Per-layer forward caches consumed by the backward pass."""

    def __init__(self) -> None:
        self._records: dict[int, dict] = {}
        self.plan = None  # set by split execution

    def record(self, layer_index: int, cache: dict) -> None:
        self._records[layer_index] = cache

    def get(self, layer_index: int) -> dict:
        try:
            return self._records[layer_index]
        except KeyError:
            raise ContractViolation(f"no forward record for layer {layer_index}") from None

    def pop(self, layer_index: int) -> dict:
        cache = self.get(layer_index)
        del self._records[layer_index]
        return cache

    def layers(self) -> list[int]:
        return sorted(self._records)

    def clear(self) -> None:
        self._records.clear()

    def __contains__(self, layer_index: object) -> bool:
        return layer_index in self._records

    def __len__(self) -> int:
        return len(self._records)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _init_frozen(cfg: ModelConfig, layer_index: int, rng: np.random.Generator) -> dict:
    d, f = cfg.hidden_dim, cfg.ffn_dim
    bound = 1.0 / math.sqrt(d)

    def u(*shape: int) -> np.ndarray:
        return rng.uniform(-bound, bound, size=shape)

    frozen: dict[str, np.ndarray] = {}
    if layer_index == 1:
        frozen["item_emb"] = u(cfg.num_items, d)
        # positions get a small scale so single-item sequences do not share a dominant direction
        frozen["pos_emb"] = 0.1 * u(cfg.max_len, d)
    for name in ("q", "k", "v", "o"):
        frozen["w" + name] = u(d, d)
        frozen["b" + name] = np.zeros(d)
    frozen["w1"], frozen["b1"] = u(d, f), np.zeros(f)
    frozen["w2"], frozen["b2"] = u(f, d), np.zeros(d)
    frozen["ln1_g"], frozen["ln1_b"] = np.ones(d), np.zeros(d)
    frozen["ln2_g"], frozen["ln2_b"] = np.ones(d), np.zeros(d)
    if layer_index == cfg.num_layers:
        frozen["head_w"], frozen["head_b"] = u(d, d), np.zeros(d)
    return {k: _readonly(v) for k, v in frozen.items()}


def _init_adapters(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, LoraAdapter]:
    d, r = cfg.hidden_dim, cfg.lora_rank
    bound = 1.0 / math.sqrt(d)
    return {
        name: LoraAdapter(rng.uniform(-bound, bound, size=(d, r)), np.zeros((r, d)), cfg.lora_scale)
        for name in ADAPTED_PROJECTIONS
    }


class LayeredModel:
    """Frozen layer weights plus per-layer LoRA adapters.

    Copies made with :meth:`copy` share the (read-only) frozen arrays and own
    their adapters.  Adapters should be changed through the methods here so the
    cached item-embedding table stays coherent.
    """

    def __init__(self, config: ModelConfig, layers: Sequence[LayerParams]) -> None:
        if len(layers) != config.num_layers:
            raise ContractViolation(
                f"expected {config.num_layers} layers, got {len(layers)}"
            )
        self.config = config
        self.layers = list(layers)
        self._item_table: np.ndarray | None = None
        self.version = 0

    @classmethod
    def initialize(cls, config: ModelConfig, adapter_seed: int | None = None) -> LayeredModel:
        frozen_rng = np.random.default_rng(config.seed)
        frozen = [_init_frozen(config, i, frozen_rng) for i in range(1, config.num_layers + 1)]
        model = cls(config, [LayerParams(f, {}) for f in frozen])
        model.reset_adapters(config.seed if adapter_seed is None else adapter_seed)
        return model

    def reset_adapters(self, adapter_seed: int) -> None:
        """Fresh adapters: random ``down``, zero ``up`` (zero initial delta)."""
        rng = np.random.default_rng([adapter_seed, 7919])
        for p in self.layers:
            p.adapters = _init_adapters(self.config, rng)
        self.invalidate()

    @property
    def hidden_dim(self) -> int:
        return self.config.hidden_dim

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    @property
    def num_items(self) -> int:
        return self.config.num_items

    def layer(self, layer_index: int) -> LayerParams:
        if not 1 <= layer_index <= self.num_layers:
            raise ContractViolation(f"layer index {layer_index} outside 1..{self.num_layers}")
        return self.layers[layer_index - 1]

    def copy(self) -> LayeredModel:
        layers = [
            LayerParams(p.frozen, {k: a.copy() for k, a in p.adapters.items()})
            for p in self.layers
        ]
        return LayeredModel(self.config, layers)

    # -- adapter vector view -------------------------------------------------

    def adapter_layout(self, layers: Iterable[int] | None = None) -> list[tuple[int, str, str, tuple]]:
        """Order used by ``adapter_vector``: layer, projection, down then up."""
        idx = range(1, self.num_layers + 1) if layers is None else sorted(layers)
        out = []
        for i in idx:
            for name in ADAPTED_PROJECTIONS:
                a = self.layer(i).adapters[name]
                out.append((i, name, "down", a.down.shape))
                out.append((i, name, "up", a.up.shape))
        return out

    def adapter_vector(self, layers: Iterable[int] | None = None) -> np.ndarray:
        parts = [
            getattr(self.layer(i).adapters[name], part).ravel()
            for i, name, part, _ in self.adapter_layout(layers)
        ]
        return np.concatenate(parts)

    def load_adapter_vector(self, vec: np.ndarray, layers: Iterable[int] | None = None) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        layout = self.adapter_layout(layers)
        total = sum(int(np.prod(shape)) for *_, shape in layout)
        if vec.shape != (total,):
            raise ContractViolation(f"adapter vector has shape {vec.shape}, expected ({total},)")
        offset = 0
        for i, name, part, shape in layout:
            n = int(np.prod(shape))
            setattr(self.layer(i).adapters[name], part, vec[offset : offset + n].reshape(shape).copy())
            offset += n
        self.invalidate()

    def apply_adapter_grads(self, grads: dict[int, dict[str, LoraGrad]], lr: float) -> None:
        """Plain SGD step on the adapters named in ``grads``."""
        for i, per_layer in grads.items():
            for name, g in per_layer.items():
                a = self.layer(i).adapters[name]
                a.down = a.down - lr * g.down
                a.up = a.up - lr * g.up
        self.invalidate()

    def invalidate(self) -> None:
        self._item_table = None
        self.version += 1

    def item_table(self) -> np.ndarray:
        """Embeddings of every single-item sequence, computed once per adapter state."""
        if self._item_table is None:
            ids = np.arange(self.num_items, dtype=np.int64).reshape(-1, 1)
            table, _ = model_forward(ids, self)
            table.setflags(write=False)
            self._item_table = table
        return self._item_table


# -- primitives -------------------------------------------------------------


def _mm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(B, L, a) x (a, b) -> (B, L, b)."""
    return np.einsum("bla,ac->blc", x, w)


def _mm_t(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(B, L, b) x (a, b)^T -> (B, L, a)."""
    return np.einsum("blc,ac->bla", x, w)


def _outer_sum(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """sum over batch and positions of x^T g: (B, L, a), (B, L, b) -> (a, b)."""
    return np.einsum("bla,blc->ac", x, g)


def _layer_norm(h: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float):
    mu = h.mean(axis=-1, keepdims=True)
    centered = h - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(gout: np.ndarray, g: np.ndarray, cache) -> np.ndarray:
    xhat, inv = cache
    gx = gout * g
    return inv * (
        gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
    )


def _adapted(x: np.ndarray, w: np.ndarray, b: np.ndarray, adapter: LoraAdapter) -> tuple:
    xd = _mm(x, adapter.down)
    return _mm(x, w) + adapter.scale * _mm(xd, adapter.up) + b, xd


def _block_forward(x: np.ndarray, p: LayerParams, cfg: ModelConfig) -> tuple[np.ndarray, dict]:
    f = p.frozen
    aq, av = p.adapters["q"], p.adapters["v"]
    q, xq = _adapted(x, f["wq"], f["bq"], aq)
    k = _mm(x, f["wk"]) + f["bk"]
    v, xv = _adapted(x, f["wv"], f["bv"], av)
    scale = 1.0 / math.sqrt(cfg.hidden_dim)
    scores = np.einsum("bid,bjd->bij", q, k) * scale
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=-1, keepdims=True)
    att = np.einsum("bij,bjd->bid", probs, v)
    h = x + _mm(att, f["wo"]) + f["bo"]
    if cfg.layer_norm:
        n1, ln1 = _layer_norm(h, f["ln1_g"], f["ln1_b"], cfg.ln_eps)
    else:
        n1, ln1 = h, None
    pre = _mm(n1, f["w1"]) + f["b1"]
    hidden = np.maximum(pre, 0.0)
    h2 = n1 + _mm(hidden, f["w2"]) + f["b2"]
    if cfg.layer_norm:
        y, ln2 = _layer_norm(h2, f["ln2_g"], f["ln2_b"], cfg.ln_eps)
    else:
        y, ln2 = h2, None
    cache = {
        "x": x, "q": q, "k": k, "v": v, "xq": xq, "xv": xv, "probs": probs,
        "att": att, "ln1": ln1, "n1": n1, "pre": pre, "hidden": hidden, "ln2": ln2,
    }
    return y, cache


def _block_backward(gy: np.ndarray, p: LayerParams, c: dict, cfg: ModelConfig):
    f = p.frozen
    aq, av = p.adapters["q"], p.adapters["v"]
    gh2 = _layer_norm_backward(gy, f["ln2_g"], c["ln2"]) if cfg.layer_norm else gy
    ghidden = _mm_t(gh2, f["w2"])
    gpre = ghidden * (c["pre"] > 0.0)
    gn1 = gh2 + _mm_t(gpre, f["w1"])
    gh = _layer_norm_backward(gn1, f["ln1_g"], c["ln1"]) if cfg.layer_norm else gn1
    gatt = _mm_t(gh, f["wo"])
    probs = c["probs"]
    gprobs = np.einsum("bid,bjd->bij", gatt, c["v"])
    gv = np.einsum("bij,bid->bjd", probs, gatt)
    gscores = probs * (gprobs - (gprobs * probs).sum(axis=-1, keepdims=True))
    scale = 1.0 / math.sqrt(cfg.hidden_dim)
    gscores = gscores * scale
    gq = np.einsum("bij,bjd->bid", gscores, c["k"])
    gk = np.einsum("bij,bid->bjd", gscores, c["q"])
    x = c["x"]
    gx = gh + _mm_t(gk, f["wk"])
    grads: dict[str, LoraGrad] = {}
    for name, gproj, w, adapter, xd in (
        ("q", gq, f["wq"], aq, c["xq"]),
        ("v", gv, f["wv"], av, c["xv"]),
    ):
        gxd = _mm_t(gproj, adapter.up) * adapter.scale
        gx = gx + _mm_t(gproj, w) + _mm_t(gxd, adapter.down)
        grads[name] = LoraGrad(
            down=_outer_sum(x, gxd),
            up=adapter.scale * _outer_sum(xd, gproj),
        )
    return gx, grads


def _check_finite(a: np.ndarray, layer_index: int) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite output in layer {layer_index}", layer_index=layer_index)


def _as_ids(inp, cfg: ModelConfig) -> tuple[np.ndarray, bool]:
    if isinstance(inp, HistorySequence):
        inp = np.asarray(inp.truncated(cfg.max_len).item_ids, dtype=np.int64)
    ids = np.asarray(inp)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractViolation("layer 1 expects integer item ids")
    batched = ids.ndim == 2
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ContractViolation(f"item id array has invalid shape {np.shape(inp)}")
    if ids.shape[1] > cfg.max_len:
        ids = ids[:, -cfg.max_len :]
    if ids.min() < 0 or ids.max() >= cfg.num_items:
        raise NotFoundError(f"item id outside catalog [0, {cfg.num_items})")
    return ids, batched


def layer_forward(
    layer_index: int,
    inp,
    model: LayeredModel,
    tape: ActivationTape | None = None,
) -> np.ndarray:
    """Run one layer.

    Layer 1 takes item ids (a ``HistorySequence``, an (L,) or a (B, L) integer
    array); other layers take (L, d) or (B, L, d) activations.  Layer N returns
    the pooled (1, d) or (B, d) output embedding.
    """
    cfg = model.config
    params = model.layer(layer_index)
    d = cfg.hidden_dim
    if layer_index == 1:
        ids, batched = _as_ids(inp, cfg)
        lookup = params.frozen["item_emb"][ids]
        x = lookup + params.frozen["pos_emb"][: ids.shape[1]]
    else:
        x = np.asarray(inp, dtype=np.float64)
        batched = x.ndim == 3
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[-1] != d:
            raise ContractViolation(
                f"layer {layer_index} expects (L, {d}) or (B, L, {d}) input, got {np.shape(inp)}"
            )
        lookup = None
    x = np.ascontiguousarray(x)
    y, cache = _block_forward(x, params, cfg)
    cache["batched"] = batched
    if layer_index == 1:
        cache["lookup"] = lookup
    if layer_index == cfg.num_layers:
        cache["block_out"] = y
        pooled = y.mean(axis=1)
        out = np.einsum("ba,ac->bc", pooled, params.frozen["head_w"]) + params.frozen["head_b"]
        cache["pooled"] = pooled
    else:
        out = y if batched else y[0]
    _check_finite(out, layer_index)
    if tape is not None:
        tape.record(layer_index, cache)
    return out


def layer_backward(
    layer_index: int,
    grad_out: np.ndarray,
    model: LayeredModel,
    tape: ActivationTape,
) -> tuple[np.ndarray, dict[str, LoraGrad]]:
    """Backpropagate through one layer, consuming its tape record.

    Returns the gradient with respect to the layer's input activations (for
    layer 1, the looked-up embeddings) and the gradients of its two adapters.
    """
    cfg = model.config
    params = model.layer(layer_index)
    cache = tape.pop(layer_index)
    batched = cache["batched"]
    g = np.asarray(grad_out, dtype=np.float64)
    if layer_index == cfg.num_layers:
        if g.ndim == 1:
            g = g[None]
        length = cache["block_out"].shape[1]
        gpooled = np.einsum("bc,ac->ba", g, params.frozen["head_w"])
        gy = np.repeat(gpooled[:, None, :] / length, length, axis=1)
    else:
        gy = g if batched else g[None]
    if gy.shape != cache["x"].shape:
        raise ContractViolation(
            f"gradient shape {np.shape(grad_out)} does not match layer {layer_index} output"
        )
    gx, grads = _block_backward(np.ascontiguousarray(gy), params, cache, cfg)
    return (gx if batched else gx[0]), grads


def model_forward(h, model: LayeredModel) -> tuple[np.ndarray, ActivationTape]:
    """Compose layers 1..N; returns the (1, d) or (B, d) output embedding."""
    tape = ActivationTape()
    out = h
    for i in range(1, model.num_layers + 1):
        out = layer_forward(i, out, model, tape)
    return out, tape


def model_backward(
    grad_embedding: np.ndarray, model: LayeredModel, tape: ActivationTape
) -> dict[int, dict[str, LoraGrad]]:
    grads: dict[int, dict[str, LoraGrad]] = {}
    g = grad_embedding
    for i in range(model.num_layers, 0, -1):
        g, grads[i] = layer_backward(i, g, model, tape)
    tape.clear()
    return grads


def item_embedding(item_id: int, model: LayeredModel) -> np.ndarray:
    if not 0 <= int(item_id) < model.num_items:
        raise NotFoundError(f"item {item_id} not in catalog")
    return model.item_table()[int(item_id)][None, :].copy()


def _normalize_rows(a: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise NumericError(f"zero-norm or non-finite {what}")
    return a / norms, norms


def batch_loss(
    embeddings: np.ndarray,
    targets: np.ndarray,
    item_table: np.ndarray,
    tau: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-example cosine-softmax cross-entropy and its gradient.

    The item table is treated as a constant.  ``grads[b]`` is the derivative
    of ``losses[b]`` with respect to ``embeddings[b]``.
    """
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if targets.shape[0] != e.shape[0]:
        raise ContractViolation("one target per embedding required")
    if targets.min() < 0 or targets.max() >= item_table.shape[0]:
        raise NotFoundError("target item not in catalog")
    e_hat, e_norm = _normalize_rows(e, "user embedding")
    v_hat, _ = _normalize_rows(item_table, "item embedding")
    sims = e_hat @ v_hat.T
    z = sims / tau
    z_max = z.max(axis=1, keepdims=True)
    ez = np.exp(z - z_max)
    denom = ez.sum(axis=1, keepdims=True)
    rows = np.arange(e.shape[0])
    losses = (np.log(denom) + z_max)[:, 0] - z[rows, targets]
    gs = ez / denom
    gs[rows, targets] -= 1.0
    gs /= tau
    grads = (gs @ v_hat - (gs * sims).sum(axis=1, keepdims=True) * e_hat) / e_norm
    return np.maximum(losses, 0.0), grads


def recommendation_loss(
    embedding: np.ndarray,
    target: int,
    model: LayeredModel,
    tau: float = 0.1,
    item_table: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Cross-entropy of the target under softmax(cosine / tau) over the catalog."""
    table = model.item_table() if item_table is None else item_table
    losses, grads = batch_loss(np.atleast_2d(embedding), np.array([target]), table, tau)
    return float(losses[0]), grads
