"""Encoder supernet with a maskable serial and parallel adapter per layer.

The backbone (embeddings, attention, feed-forward, layer norms) is frozen;
only adapter projections and the classifier head train. Every layer output
is ``base + mask_sa * serial_term + mask_pa * parallel_term``, so masking
both adapters reproduces the plain backbone bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

KIND_SA = "SA"
KIND_PA = "PA"
KINDS = (KIND_SA, KIND_PA)
_KIND_ORDER = {KIND_SA: 0, KIND_PA: 1}


@dataclass(frozen=True)
class PeftModuleId:
    layer: int
    kind: str

    def sort_key(self):
        return (self.layer, _KIND_ORDER[self.kind])

    def __str__(self):
        return f"L{self.layer}/{self.kind}"


@dataclass(frozen=True)
class SupernetConfig:
    num_layers: int
    d_model: int
    num_heads: int
    d_ff: int
    sa_bottleneck: int
    pa_rank: int
    vocab_size: int
    num_classes: int
    max_seq_len: int
    pa_linear: bool = False  # drop the nonlinearity on the parallel branch
    activation: str = "gelu"

    def __post_init__(self):
        if min(self.num_layers, self.d_model, self.num_heads, self.d_ff) < 1:
            raise ValueError("all supernet dimensions must be positive")
        if self.d_model % self.num_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by num_heads={self.num_heads}"
            )
        if not (0 < self.sa_bottleneck < self.d_model):
            raise ValueError(f"sa_bottleneck must lie in (0, d_model), got {self.sa_bottleneck}")
        if not (0 < self.pa_rank < self.d_model):
            raise ValueError(f"pa_rank must lie in (0, d_model), got {self.pa_rank}")
        if min(self.vocab_size, self.num_classes, self.max_seq_len) < 1:
            raise ValueError("vocab_size, num_classes and max_seq_len must be positive")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unsupported activation {self.activation!r}")

    def module_ids(self):
        return [
            PeftModuleId(layer, kind)
            for layer in range(self.num_layers)
            for kind in KINDS
        ]

    def head_param_count(self):
        return self.d_model * self.num_classes + self.num_classes


class PeftModule:
    """Bottleneck pair W_down (d_model x b) and W_up (b x d_model)."""

    def __init__(self, module_id: PeftModuleId, d_model: int, bottleneck: int, rng):
        self.id = module_id
        self.d_model = d_model
        self.bottleneck = bottleneck
        self.w_down = Tensor(np.zeros((d_model, bottleneck)), requires_grad=True)
        self.w_up = Tensor(np.zeros((bottleneck, d_model)), requires_grad=True)
        reinitialize(self, rng)

    @property
    def param_count(self):
        return self.w_down.size + self.w_up.size

    def params(self):
        return [self.w_down, self.w_up]

    def flat_weights(self) -> np.ndarray:
        return np.concatenate([self.w_down.data.ravel(), self.w_up.data.ravel()])

    def flat_grads(self) -> np.ndarray:
        gd = self.w_down.grad
        gu = self.w_up.grad
        gd = np.zeros_like(self.w_down.data) if gd is None else gd
        gu = np.zeros_like(self.w_up.data) if gu is None else gu
        return np.concatenate([gd.ravel(), gu.ravel()])


def reinitialize(module: PeftModule, rng) -> PeftModule:
    """Fresh Normal(0, 1/sqrt(dim)) draws for both projections.

    The scale is read as a standard deviation, using each projection's
    output dimension.
    """
    d_down = module.w_down.data.shape[1]
    d_up = module.w_up.data.shape[1]
    module.w_down.data = rng.normal(0.0, 1.0 / math.sqrt(d_down), module.w_down.data.shape)
    module.w_up.data = rng.normal(0.0, 1.0 / math.sqrt(d_up), module.w_up.data.shape)
    return module


class MaskState:
    """Boolean activation flag per adapter module. Flags only ever go off."""

    def __init__(self, ids, flags=None):
        self._flags = {}
        for mid in sorted(ids, key=PeftModuleId.sort_key):
            self._flags[mid] = True if flags is None else bool(flags[mid])

    def __len__(self):
        return len(self._flags)

    def __contains__(self, mid):
        return mid in self._flags

    def ids(self):
        return list(self._flags.keys())

    def is_active(self, mid: PeftModuleId) -> bool:
        return self._flags[mid]

    def active_ids(self):
        return [mid for mid, on in self._flags.items() if on]

    def num_active(self):
        return sum(self._flags.values())

    def deactivate(self, mid: PeftModuleId):
        if mid not in self._flags:
            raise KeyError(f"unknown module {mid}")
        self._flags[mid] = False

    def copy(self) -> "MaskState":
        return MaskState(self._flags.keys(), self._flags)

    def flags(self):
        return dict(self._flags)

    def __eq__(self, other):
        return isinstance(other, MaskState) and self._flags == other._flags


def _proj(x: Tensor, w: Tensor) -> Tensor:
    """(b, s, d) @ (d, n) as one flat GEMM."""
    b, s, d = x.shape
    return T.reshape(T.matmul(T.reshape(x, (b * s, d)), w), (b, s, w.shape[1]))


@dataclass
class EncoderLayer:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def params(self):
        return [self.wq, self.wk, self.wv, self.wo, self.ln1_g, self.ln1_b,
                self.w1, self.b1, self.w2, self.b2, self.ln2_g, self.ln2_b]


class Supernet:
    def __init__(self, config: SupernetConfig, embedding, pos, layers, modules, head_w, head_b):
        self.config = config
        self.embedding = embedding
        self.pos = pos
        self.layers = layers
        self.modules = modules  # PeftModuleId -> PeftModule
        self.head_w = head_w
        self.head_b = head_b
        self.mask = MaskState(modules.keys())

    # -- parameters -----------------------------------------------------

    def backbone_params(self):
        out = [self.embedding, self.pos]
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def head_params(self):
        return [self.head_w, self.head_b]

    def trainable_params(self, mask: MaskState | None = None):
        mask = mask or self.mask
        out = []
        for mid in mask.active_ids():
            out.extend(self.modules[mid].params())
        out.extend(self.head_params())
        return out

    def module_size(self, mid: PeftModuleId) -> int:
        return self.modules[mid].param_count

    # -- masking --------------------------------------------------------

    def apply_mask(self, mask: MaskState) -> "Supernet":
        if set(mask.ids()) != set(self.modules.keys()):
            raise ValueError("mask does not cover every module id")
        self.mask = mask.copy()
        return self

    # -- forward --------------------------------------------------------

    def layer_forward(self, h_in: Tensor, layer_index: int, mask: MaskState | None = None,
                      record: dict | None = None) -> Tensor:
        """One encoder layer plus its (possibly masked) adapter terms."""
        cfg = self.config
        mask = mask or self.mask
        layer = self.layers[layer_index]
        x = h_in

        # attention sublayer, post-LN
        a = self._attention(x, layer)
        a = T.layer_norm(T.add(x, a), layer.ln1_g, layer.ln1_b)

        # feed-forward sublayer, post-LN
        f = T.add(_proj(a, layer.w1), layer.b1)
        f = T.activation(f, cfg.activation)
        f = T.add(_proj(f, layer.w2), layer.b2)
        base = T.layer_norm(T.add(a, f), layer.ln2_g, layer.ln2_b)

        out = base
        sa_id = PeftModuleId(layer_index, KIND_SA)
        if mask.is_active(sa_id):
            m = self.modules[sa_id]
            term = _proj(T.activation(_proj(base, m.w_down), cfg.activation), m.w_up)
            if record is not None:
                _record_activation(record, sa_id, term.data)
            out = T.add(out, term)
        pa_id = PeftModuleId(layer_index, KIND_PA)
        if mask.is_active(pa_id):
            m = self.modules[pa_id]
            term = _proj(_proj(h_in, m.w_down), m.w_up)
            if not cfg.pa_linear:
                term = T.activation(term, cfg.activation)
            if record is not None:
                _record_activation(record, pa_id, term.data)
            out = T.add(out, term)
        return out

    def _attention(self, x: Tensor, layer: EncoderLayer) -> Tensor:
        cfg = self.config
        b, s, d = x.shape
        nh = cfg.num_heads
        dh = d // nh

        def split_heads(t):
            return T.transpose(T.reshape(t, (b, s, nh, dh)), (0, 2, 1, 3))

        q = split_heads(_proj(x, layer.wq))
        k = split_heads(_proj(x, layer.wk))
        v = split_heads(_proj(x, layer.wv))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
        return _proj(ctx, layer.wo)

    def forward(self, tokens: np.ndarray, mask: MaskState | None = None,
                record: dict | None = None) -> Tensor:
        """Token ids (batch x seq) to class logits."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError("tokens must be batch x seq")
        seq = tokens.shape[1]
        if seq > self.config.max_seq_len:
            raise ValueError(f"sequence length {seq} exceeds max_seq_len")
        x = T.embedding(self.embedding, tokens)
        pos = Tensor(self.pos.data[:seq], _parents=(self.pos,),
                     _backward_fn=lambda g, needs: (None,))
        x = T.add(x, pos)
        for i in range(self.config.num_layers):
            x = self.layer_forward(x, i, mask=mask, record=record)
        pooled = T.mean(x, axis=1)
        return T.add(T.matmul(pooled, self.head_w), self.head_b)

    def predict(self, tokens: np.ndarray, mask: MaskState | None = None) -> np.ndarray:
        return self.forward(tokens, mask=mask).data.argmax(axis=1)

    def snapshot_trainable(self):
        """Copies of every adapter and head array, for later restore."""
        params = []
        for mid in sorted(self.modules, key=PeftModuleId.sort_key):
            params.extend(self.modules[mid].params())
        params.extend(self.head_params())
        return [p.data.copy() for p in params]

    def restore_trainable(self, snapshot):
        params = []
        for mid in sorted(self.modules, key=PeftModuleId.sort_key):
            params.extend(self.modules[mid].params())
        params.extend(self.head_params())
        if len(snapshot) != len(params):
            raise ValueError("snapshot does not match parameter list")
        for p, s in zip(params, snapshot):
            p.data = s.copy()


def _record_activation(record, mid, data):
    prev_sum, prev_n = record.get(mid, (0.0, 0))
    record[mid] = (prev_sum + float(np.abs(data).sum()), prev_n + data.size)


def trainable_param_count(supernet: Supernet, mask: MaskState | None = None) -> int:
    mask = mask or supernet.mask
    count = supernet.config.head_param_count()
    for mid in mask.active_ids():
        count += supernet.module_size(mid)
    return count


def init_head(supernet: Supernet, rng):
    d = supernet.config.d_model
    supernet.head_w.data = rng.normal(0.0, 1.0 / math.sqrt(d), supernet.head_w.data.shape)
    supernet.head_b.data = np.zeros_like(supernet.head_b.data)


def build_supernet(config: SupernetConfig, seed: int) -> Supernet:
    """Fresh supernet: frozen random backbone, all adapters active."""
    ss = np.random.SeedSequence([int(seed), 0x5EED])
    backbone_rng, adapter_rng, head_rng = [np.random.default_rng(c) for c in ss.spawn(3)]
    cfg = config
    d = cfg.d_model
    sd = 1.0 / math.sqrt(d)

    def frozen(shape, scale=sd):
        return Tensor(backbone_rng.normal(0.0, scale, shape))

    emb = frozen((cfg.vocab_size, d))
    pos = frozen((cfg.max_seq_len, d))
    layers = []
    for _ in range(cfg.num_layers):
        layers.append(EncoderLayer(
            wq=frozen((d, d)), wk=frozen((d, d)), wv=frozen((d, d)), wo=frozen((d, d)),
            ln1_g=Tensor(np.ones(d)), ln1_b=Tensor(np.zeros(d)),
            w1=frozen((d, cfg.d_ff)), b1=Tensor(np.zeros(cfg.d_ff)),
            w2=frozen((cfg.d_ff, d), scale=1.0 / math.sqrt(cfg.d_ff)), b2=Tensor(np.zeros(d)),
            ln2_g=Tensor(np.ones(d)), ln2_b=Tensor(np.zeros(d)),
        ))
    modules = {}
    for mid in cfg.module_ids():
        bottleneck = cfg.sa_bottleneck if mid.kind == KIND_SA else cfg.pa_rank
        modules[mid] = PeftModule(mid, d, bottleneck, adapter_rng)
    head_w = Tensor(np.zeros((d, cfg.num_classes)), requires_grad=True)
    head_b = Tensor(np.zeros(cfg.num_classes), requires_grad=True)
    net = Supernet(cfg, emb, pos, layers, modules, head_w, head_b)
    init_head(net, head_rng)
    return net


# ---------------------------------------------------------------------------
# architecture documents


def config_to_dict(config: SupernetConfig) -> dict:
    return {
        "num_layers": config.num_layers,
        "d_model": config.d_model,
        "num_heads": config.num_heads,
        "d_ff": config.d_ff,
        "sa_bottleneck": config.sa_bottleneck,
        "pa_rank": config.pa_rank,
        "vocab_size": config.vocab_size,
        "num_classes": config.num_classes,
        "max_seq_len": config.max_seq_len,
        "pa_linear": config.pa_linear,
        "activation": config.activation,
    }


def config_from_dict(doc: dict) -> SupernetConfig:
    return SupernetConfig(**doc)


def architecture_to_doc(supernet: Supernet, mask: MaskState | None = None,
                        include_weights: bool = False) -> dict:
    mask = mask or supernet.mask
    doc = {
        "config": config_to_dict(supernet.config),
        "modules": [
            {"layer": mid.layer, "kind": mid.kind, "active": mask.is_active(mid)}
            for mid in sorted(supernet.modules, key=PeftModuleId.sort_key)
        ],
    }
    if include_weights:
        doc["weights"] = {
            str(mid): {
                "w_down": supernet.modules[mid].w_down.data.tolist(),
                "w_up": supernet.modules[mid].w_up.data.tolist(),
            }
            for mid in sorted(supernet.modules, key=PeftModuleId.sort_key)
        }
    return doc


def architecture_from_doc(doc: dict):
    """Returns (config, flags dict, weights-or-None)."""
    config = config_from_dict(doc["config"])
    expected = set(config.module_ids())
    flags = {}
    for entry in doc["modules"]:
        mid = PeftModuleId(int(entry["layer"]), str(entry["kind"]))
        if mid not in expected:
            raise ValueError(f"module {mid} does not fit a {config.num_layers}-layer model")
        flags[mid] = bool(entry["active"])
    if set(flags) != expected:
        raise ValueError("architecture document does not cover every module")
    return config, flags, doc.get("weights")
