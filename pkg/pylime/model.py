# -*- coding: utf-8 -*-
'''
Model submodule.

A LLaMa-style decoder-only transformer (pre-norm residual blocks, RMSNorm,
SwiGLU MLP, rotary positions, grouped-query attention) whose attention layers
read their keys and values through a key-value buffer. Every layer appends its
own per-head keys (post-rotary) and values to the buffer; from the second layer
on, a trainable router mixes all buffered heads of the current and earlier
layers into the heads the layer attends with.

Layers are numbered from 1. Tensors are laid out head-major: queries are
[H, b, t, d_h], buffered keys and values [H_kv, b, t, d_h].
'''

import logging
import numpy as np
from scipy.stats import truncnorm
from . import tensor as T
from .tensor import TensorNode
from .config import LimeConfig, normalize_variant
from .exceptions import ConfigError, KvBufferError, ShapeError

__all__ = [
    "KvBuffer", "RouterBank", "ModelParams", "LimeModel",
    "make_variant_mask", "init_params", "rope_tables", "apply_rope",
    "route_kv", "attend", "causal_mask",
]

INIT_STD = 0.02


class KvBuffer(object):
    '''
    Per-layer store of key and value heads.

    Attributes:
        keys (list[TensorNode]): post-rotary keys per filled layer, [H_kv, b, t, d_h]
        values (list[TensorNode]): raw value projections per filled layer
    '''

    def __init__(self, num_layers:int):
        '''
        Constructor.

        Args:
            num_layers (int): capacity in layers
        '''
        self.num_layers = num_layers
        self.keys = []
        self.values = []

    @property
    def filled_layers(self) -> int:
        return len(self.keys)

    def append(self, layer:int, keys:TensorNode, values:TensorNode) -> None:
        '''
        Add one layer's heads.

        Args:
            layer (int): layer number, must be filled_layers + 1
            keys (TensorNode): keys [H_kv, b, t, d_h]
            values (TensorNode): values [H_kv, b, t, d_h]

        Raises:
            KvBufferError: if the layer is already buffered, out of order, or past capacity.
        '''
        if layer != self.filled_layers + 1 or layer > self.num_layers:
            raise KvBufferError("Cannot buffer layer {}: {} of {} layers filled.".format(layer, self.filled_layers, self.num_layers))
        if keys.shape != values.shape:
            raise ShapeError("Key shape {} differs from value shape {}.".format(keys.shape, values.shape))
        self.keys.append(keys)
        self.values.append(values)

    def stacked(self, layer:int) -> 'tuple[TensorNode, TensorNode]':
        '''
        Concatenate buffered heads of layers 1..layer along the head axis.

        Returns:
            tuple[TensorNode, TensorNode]: keys and values [layer * H_kv, b, t, d_h]
        '''
        if layer != self.filled_layers:
            raise KvBufferError("Routing layer {} needs exactly {} buffered layers, found {}.".format(layer, layer, self.filled_layers))
        return T.concat(self.keys[:layer], axis=0), T.concat(self.values[:layer], axis=0)


def make_variant_mask(variant:str, layer:int, num_kv_heads:int, j:int|None=None) -> np.ndarray:
    '''
    Build the {0,1} mask of a router matrix [H_kv, layer * H_kv].

    Column block k (k = 1..layer) holds the weights of buffered layer k.

    - full / average: every block.
    - last_j: the most recent min(layer, j) layers.
    - first_j: layers 1..min(layer, j), plus the preceding layer and the layer itself.
    - baseline: the layer itself.

    Args:
        variant (str): routing variant
        layer (int): destination layer number (>= 1)
        num_kv_heads (int): H_kv
        j (int or None): window for last_j / first_j

    Returns:
        np.ndarray: mask of 0.0 / 1.0

    Raises:
        ConfigError: if the variant is unknown or j is missing or smaller than 1.
    '''
    variant = normalize_variant(variant)
    if variant in ("last_j", "first_j") and (j is None or j < 1):
        raise ConfigError("Routing variant '{}' needs j >= 1.".format(variant))
    if variant in ("full", "average"):
        enabled = set(range(1, layer + 1))
    elif variant == "baseline":
        enabled = {layer}
    elif variant == "last_j":
        enabled = set(range(layer - min(layer, j) + 1, layer + 1))
    elif variant == "first_j":
        enabled = set(range(1, min(layer, j) + 1)) | {max(layer - 1, 1), layer}
    else:
        raise ConfigError("Unknown routing variant '{}'.".format(variant))
    mask = np.zeros((num_kv_heads, layer * num_kv_heads))
    for k in enabled:
        mask[:, (k - 1) * num_kv_heads:k * num_kv_heads] = 1.0
    return mask


class RouterBank(object):
    '''
    Router matrices of layers 2..L.

    Learned variants (full, last_j, first_j) store one dense trainable matrix per
    layer with a constant mask; masked entries are zero and receive zero gradient.
    The average variant stores frozen uniform weights. The baseline has no router.

    Attributes:
        variant (str): routing variant
        weights (dict[int, TensorNode]): router matrix per layer
        masks (dict[int, np.ndarray]): constant mask per layer
    '''

    def __init__(self, cfg:LimeConfig, weights:dict, masks:dict):
        self.variant = cfg.routing_variant
        self.num_kv_heads = cfg.num_kv_heads
        self.num_layers = cfg.num_layers
        self.weights = weights
        self.masks = masks

    @classmethod
    def initialize(cls, cfg:LimeConfig, seed:int, dtype=T.DEFAULT_DTYPE) -> 'RouterBank':
        '''
        Create routers with the current layer's block set to the identity.

        Other entries of learned routers are uniform in +-sqrt(3 / layer * H_kv);
        masked entries are then zeroed.

        Args:
            cfg (LimeConfig): architecture
            seed (int): run seed (routers draw from their own stream)
            dtype (np.dtype): storage type

        Returns:
            RouterBank: routers of layers 2..L
        '''
        weights, masks = {}, {}
        if cfg.routing_variant == "baseline":
            return cls(cfg, weights, masks)
        rng = T.make_stream(seed, "router")
        h = cfg.num_kv_heads
        for layer in range(2, cfg.num_layers + 1):
            mask = make_variant_mask(cfg.routing_variant, layer, h, cfg.routing_j)
            if cfg.routing_variant == "average":
                weights[layer] = T.constant(np.full((h, layer * h), 1.0 / (layer * h)), dtype=dtype)
            else:
                bound = np.sqrt(3.0 / layer * h)
                w = rng.uniform(-bound, bound, size=(h, layer * h))
                w[:, -h:] = np.eye(h)
                weights[layer] = T.parameter(w * mask, dtype=dtype)
            masks[layer] = mask
        return cls(cfg, weights, masks)

    @property
    def trainable(self) -> bool:
        return self.variant not in ("baseline", "average")

    def named_parameters(self) -> dict:
        if not self.trainable:
            return {}
        return {"router.{}".format(layer): w for layer, w in sorted(self.weights.items())}

    def effective(self, layer:int) -> TensorNode:
        '''
        Router matrix used by a layer, with its mask applied.
        '''
        w = self.weights[layer]
        if not self.trainable:
            return w
        return T.mul(w, T.constant(self.masks[layer], dtype=w.dtype))

    def dense(self, layer:int) -> np.ndarray:
        '''
        Current masked router values of a layer, as a plain array.
        '''
        w = self.weights[layer].data
        return w * self.masks[layer] if self.trainable else w.copy()


class ModelParams(object):
    '''
    Named model parameters, in a fixed order.

    Names: "embed", "layers.<l>.{attn_norm,wq,wk,wv,wo,mlp_norm,w_gate,w_up,w_down}",
    "final_norm" and, without tied embeddings, "lm_head".
    '''

    def __init__(self, tensors:dict):
        self.tensors = tensors

    def __getitem__(self, name:str) -> TensorNode:
        return self.tensors[name]

    def __contains__(self, name:str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def layer(self, layer:int, name:str) -> TensorNode:
        return self.tensors["layers.{}.{}".format(layer, name)]

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.tensors.values()]))


def _param_shapes(cfg:LimeConfig) -> 'list[tuple[str, tuple]]':
    d, hd = cfg.hidden_size, cfg.head_dim
    shapes = [("embed", (cfg.vocab_size, d))]
    for layer in range(1, cfg.num_layers + 1):
        prefix = "layers.{}.".format(layer)
        shapes += [
            (prefix + "attn_norm", (d,)),
            (prefix + "wq", (d, cfg.num_heads * hd)),
            (prefix + "wk", (d, cfg.num_kv_heads * hd)),
            (prefix + "wv", (d, cfg.num_kv_heads * hd)),
            (prefix + "wo", (cfg.num_heads * hd, d)),
            (prefix + "mlp_norm", (d,)),
            (prefix + "w_gate", (d, cfg.intermediate_size)),
            (prefix + "w_up", (d, cfg.intermediate_size)),
            (prefix + "w_down", (cfg.intermediate_size, d)),
        ]
    shapes.append(("final_norm", (d,)))
    if not cfg.tie_embeddings:
        shapes.append(("lm_head", (d, cfg.vocab_size)))
    return shapes


def init_params(cfg:LimeConfig, seed:int, dtype=T.DEFAULT_DTYPE) -> 'tuple[ModelParams, RouterBank]':
    '''
    Initialize model weights and routers.

    Matrices are drawn from a normal distribution with std 0.02 truncated at two
    standard deviations; norm gains start at 1. Projections and routers use
    separate random streams, so variants sharing a seed share every non-router
    weight.

    Args:
        cfg (LimeConfig): architecture
        seed (int): run seed
        dtype (np.dtype): storage type

    Returns:
        tuple[ModelParams, RouterBank]: parameters and routers
    '''
    rng = T.make_stream(seed, "init")
    tensors = {}
    for name, shape in _param_shapes(cfg):
        if len(shape) == 1:
            tensors[name] = T.parameter(np.ones(shape), dtype=dtype)
        else:
            values = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=INIT_STD, size=shape, random_state=rng)
            tensors[name] = T.parameter(values, dtype=dtype)
    return ModelParams(tensors), RouterBank.initialize(cfg, seed, dtype=dtype)


def rope_tables(positions, head_dim:int, theta:float) -> 'tuple[np.ndarray, np.ndarray]':
    '''
    Rotary cosine and sine tables.

    Args:
        positions (array-like of int): token positions [t]
        head_dim (int): d_h, even
        theta (float): rotary base

    Returns:
        tuple[np.ndarray, np.ndarray]: cos and sin [t, d_h / 2], 64-bit
    '''
    if head_dim % 2:
        raise ShapeError("Rotary embeddings need an even head dimension, got {}.".format(head_dim))
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.outer(np.asarray(positions, dtype=np.float64), inv_freq)
    return np.cos(angles), np.sin(angles)


def apply_rope(x:TensorNode, positions, theta:float=10000.0) -> TensorNode:
    '''
    Rotate interleaved feature pairs of x by position-dependent angles.

    Args:
        x (TensorNode): heads [..., t, d_h]
        positions (array-like of int): positions of the t tokens
        theta (float): rotary base

    Returns:
        TensorNode: rotated heads, same shape

    Raises:
        ShapeError: if d_h is odd.
    '''
    cos, sin = rope_tables(positions, x.shape[-1], theta)
    return T.rotate_pairs(x, cos, sin)


def route_kv(buf:KvBuffer, router:TensorNode, layer:int) -> 'tuple[TensorNode, TensorNode]':
    '''
    Mix all buffered heads into the heads of a layer.

    Output head h is sum over buffered (layer', h') of router[h, (layer'-1) * H_kv + h']
    times the buffered head; keys and values share the router.

    Args:
        buf (KvBuffer): buffer filled up to this layer
        router (TensorNode): mixing weights [H_kv, layer * H_kv]
        layer (int): destination layer (>= 2)

    Returns:
        tuple[TensorNode, TensorNode]: routed keys and values [H_kv, b, t, d_h]

    Raises:
        KvBufferError: if the buffer does not hold exactly `layer` layers.
    '''
    keys, values = buf.stacked(layer)
    if router.shape[1] != keys.shape[0]:
        raise ShapeError("Router shape {} does not match {} buffered heads.".format(router.shape, keys.shape[0]))
    tail = keys.shape[1:]
    heads = router.shape[0]
    mixed_k = T.matmul(router, keys.reshape(keys.shape[0], -1)).reshape((heads,) + tail)
    mixed_v = T.matmul(router, values.reshape(values.shape[0], -1)).reshape((heads,) + tail)
    return mixed_k, mixed_v


def causal_mask(t:int) -> np.ndarray:
    return np.triu(np.full((t, t), T.MASK_VALUE), k=1)


def attend(q:TensorNode, k:TensorNode, v:TensorNode, mask:np.ndarray|None=None) -> TensorNode:
    '''
    Causal scaled dot-product attention with grouped key-value heads.

    Query head i reads key/value head i // (H / H_kv).

    Args:
        q (TensorNode): queries [H, b, t, d_h]
        k (TensorNode): keys [H_kv, b, t, d_h]
        v (TensorNode): values [H_kv, b, t, d_h]
        mask (np.ndarray or None): additive mask [t, t]; causal when None

    Returns:
        TensorNode: concatenated heads [b, t, H * d_h]
    '''
    heads, b, t, hd = q.shape
    kv_heads = k.shape[0]
    if heads % kv_heads:
        raise ShapeError("{} query heads cannot share {} key/value heads.".format(heads, kv_heads))
    group = heads // kv_heads
    if mask is None:
        mask = causal_mask(t)
    qg = q.reshape(kv_heads, group, b, t, hd)
    kt = k.reshape(kv_heads, 1, b, t, hd).transpose(0, 1, 2, 4, 3)
    scores = T.scale(T.matmul(qg, kt), 1.0 / np.sqrt(hd))
    probs = T.rowwise_softmax(scores, mask)
    out = T.matmul(probs, v.reshape(kv_heads, 1, b, t, hd))
    return out.reshape(heads, b, t, hd).transpose(1, 2, 0, 3).reshape(b, t, heads * hd)


class LimeModel(object):
    '''
    Decoder-only transformer with layer-integrated key-value routing.

    Attributes:
        cfg (LimeConfig): architecture
        params (ModelParams): weights
        router (RouterBank): routers of layers 2..L
    '''

    def __init__(self, cfg:LimeConfig, params:ModelParams|None=None, router:RouterBank|None=None, seed:int=0, dtype=T.DEFAULT_DTYPE):
        '''
        Constructor.

        Args:
            cfg (LimeConfig): architecture
            params (ModelParams or None): weights; initialized from seed when None
            router (RouterBank or None): routers; initialized from seed when None
            seed (int): initialization seed
            dtype (np.dtype): storage type of freshly initialized weights
        '''
        self.cfg = cfg
        if params is None or router is None:
            fresh_params, fresh_router = init_params(cfg, seed, dtype=dtype)
            params = params if params is not None else fresh_params
            router = router if router is not None else fresh_router
        self.params = params
        self.router = router

    def named_parameters(self) -> dict:
        '''
        Every trainable tensor, model weights first, then routers.
        '''
        named = dict(self.params.items())
        named.update(self.router.named_parameters())
        return named

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.named_parameters().values()]))

    def project_and_buffer(self, x:TensorNode, layer:int, buf:KvBuffer, positions) -> 'tuple[TensorNode, TensorNode]':
        '''
        Project normalized hidden states and buffer this layer's keys and values.

        Args:
            x (TensorNode): normalized hidden states [b, t, d]
            layer (int): layer number
            buf (KvBuffer): buffer holding layer - 1 layers
            positions (np.ndarray): token positions [t]

        Returns:
            tuple[TensorNode, TensorNode]: rotated queries [H, b, t, d_h], raw values [b, t, H_kv * d_h]
        '''
        cfg = self.cfg
        if buf.filled_layers != layer - 1:
            raise KvBufferError("Layer {} expects {} buffered layers, found {}.".format(layer, layer - 1, buf.filled_layers))
        b, t, _ = x.shape
        hd = cfg.head_dim
        q = T.matmul(x, self.params.layer(layer, "wq")).reshape(b, t, cfg.num_heads, hd).transpose(2, 0, 1, 3)
        k = T.matmul(x, self.params.layer(layer, "wk")).reshape(b, t, cfg.num_kv_heads, hd).transpose(2, 0, 1, 3)
        v_flat = T.matmul(x, self.params.layer(layer, "wv"))
        v = v_flat.reshape(b, t, cfg.num_kv_heads, hd).transpose(2, 0, 1, 3)
        q = apply_rope(q, positions, cfg.rope_theta)
        k = apply_rope(k, positions, cfg.rope_theta)
        buf.append(layer, k, v)
        return q, v_flat

    def routed_kv(self, buf:KvBuffer, layer:int) -> 'tuple[TensorNode, TensorNode]':
        '''
        Keys and values a layer attends with: its own for layer 1 and the
        baseline, router mixtures otherwise.
        '''
        if layer == 1 or self.cfg.routing_variant == "baseline":
            return buf.keys[layer - 1], buf.values[layer - 1]
        return route_kv(buf, self.router.effective(layer), layer)

    def decoder_layer(self, x:TensorNode, layer:int, buf:KvBuffer, positions, capture=None) -> TensorNode:
        '''
        Pre-norm residual block: attention through the buffer, then SwiGLU MLP.

        Args:
            x (TensorNode): hidden states [b, t, d]
            layer (int): layer number
            buf (KvBuffer): shared buffer
            positions (np.ndarray): token positions
            capture (object or None): receives record(kind, layer, array) calls

        Returns:
            TensorNode: updated hidden states
        '''
        p = self.params
        h = T.rmsnorm(x, p.layer(layer, "attn_norm"))
        q, v_flat = self.project_and_buffer(h, layer, buf, positions)
        k_mix, v_mix = self.routed_kv(buf, layer)
        attn = attend(q, k_mix, v_mix, causal_mask(x.shape[1]))
        x = T.add(x, T.matmul(attn, p.layer(layer, "wo")))
        h = T.rmsnorm(x, p.layer(layer, "mlp_norm"))
        gate = T.silu(T.matmul(h, p.layer(layer, "w_gate")))
        x = T.add(x, T.matmul(T.mul(gate, T.matmul(h, p.layer(layer, "w_up"))), p.layer(layer, "w_down")))
        if capture is not None:
            capture.record("values", layer, v_flat.data)
            capture.record("routed", layer, v_mix.data.transpose(1, 2, 0, 3).reshape(v_flat.shape))
            capture.record("hiddens", layer, x.data)
        return x

    def forward(self, ids, capture=None) -> TensorNode:
        '''
        Compute next-token logits.

        Args:
            ids (array-like of int): token ids [t] or [b, t]
            capture (object or None): representation recorder

        Returns:
            TensorNode: logits [t, V] or [b, t, V]

        Raises:
            ShapeError: if the sequence is longer than max_seq.
            VocabularyError: if an id is outside the vocabulary.
        '''
        ids = np.asarray(ids, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        t = ids.shape[1]
        if t < 1 or t > self.cfg.max_seq:
            raise ShapeError("Sequence length {} outside [1, {}].".format(t, self.cfg.max_seq))
        positions = np.arange(t)
        x = T.embedding_lookup(self.params["embed"], ids)
        buf = KvBuffer(self.cfg.num_layers)
        for layer in range(1, self.cfg.num_layers + 1):
            x = self.decoder_layer(x, layer, buf, positions, capture)
        x = T.rmsnorm(x, self.params["final_norm"])
        if self.cfg.tie_embeddings:
            head = self.params["embed"].transpose(1, 0)
        else:
            head = self.params["lm_head"]
        logits = T.matmul(x, head)
        if single:
            logits = logits.reshape(t, self.cfg.vocab_size)
        return logits

    def loss(self, ids, targets, ignore_index:int=-100) -> TensorNode:
        '''
        Mean cross-entropy of next-token predictions.
        '''
        return T.cross_entropy_logits(self.forward(ids), targets, ignore_index)

    def generate(self, prompts:'list[list[int]]', max_new_tokens:int, eos_id:int) -> 'list[list[int]]':
        '''
        Greedy decoding of a batch of prompts.

        Sequences are right-padded, so causality keeps padded positions from
        affecting real ones. Decoding of a sequence stops at eos, after
        max_new_tokens tokens, or at max_seq.

        Args:
            prompts (list[list[int]]): prompt ids
            max_new_tokens (int): length cap of each continuation
            eos_id (int): end-of-sequence id (kept in the output)

        Returns:
            list[list[int]]: generated continuations
        '''
        seqs = [list(p) for p in prompts]
        outputs = [[] for _ in prompts]
        active = [i for i, p in enumerate(seqs) if 0 < len(p) < self.cfg.max_seq]
        with T.no_grad():
            for _ in range(max_new_tokens):
                if not active:
                    break
                width = max(len(seqs[i]) for i in active)
                batch = np.zeros((len(active), width), dtype=np.int64)
                for row, i in enumerate(active):
                    batch[row, :len(seqs[i])] = seqs[i]
                logits = self.forward(batch).data
                still = []
                for row, i in enumerate(active):
                    token = int(np.argmax(logits[row, len(seqs[i]) - 1]))
                    seqs[i].append(token)
                    outputs[i].append(token)
                    if token != eos_id and len(seqs[i]) < self.cfg.max_seq:
                        still.append(i)
                active = still
        logging.debug("Generated %d continuations", len(prompts))
        return outputs
