# -*- coding: utf-8 -*-
'''
Tensor submodule. A small define-by-run reverse-mode autodiff engine.

Every operation returns a TensorNode holding a dense numpy array. When at least
one operand requires a gradient (and gradient recording is enabled), the node
keeps a reference to its parents and a closure that propagates the upstream
gradient to them. The graph is rebuilt on every forward pass.

Storage defaults to 32-bit floats. Operations keep the dtype of their operands,
so the same code runs in 64-bit for reference checks.
'''

import zlib
import numpy as np
from scipy.special import expit, logsumexp
from .exceptions import ShapeError, GraphError, VocabularyError

__all__ = [
    "DEFAULT_DTYPE", "MASK_VALUE", "TensorNode", "GradGraph", "no_grad", "is_grad_enabled",
    "make_stream", "parameter", "constant", "zero_grad",
    "add", "sub", "mul", "scale", "neg", "silu", "sum", "mean",
    "matmul", "reshape", "transpose", "concat",
    "rowwise_softmax", "rmsnorm", "rotate_pairs", "embedding_lookup", "cross_entropy_logits",
    "backward",
]

DEFAULT_DTYPE = np.float32
# additive sentinel for masked attention scores; anything at or below it counts as masked
MASK_VALUE = -1e9
RMSNORM_EPS = 1e-6

_grad_enabled = True


class no_grad(object):
    '''
    Context manager disabling graph recording.

    Operations executed inside the block return plain nodes without parents,
    which is what inference and diagnostics need.
    '''
    def __enter__(self):
        global _grad_enabled
        self._previous = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *args):
        global _grad_enabled
        _grad_enabled = self._previous
        return False


def is_grad_enabled() -> bool:
    '''
    Tell whether operations currently record a gradient graph.

    Returns:
        bool: True if recording is enabled
    '''
    return _grad_enabled


def make_stream(seed:int, name:str) -> np.random.Generator:
    '''
    Create a named random stream.

    Streams are Philox (counter-based) generators keyed by the run seed and a
    stable hash of the stream name, so that two streams never share state and
    the same (seed, name) always reproduces the same draws.

    Args:
        seed (int): non-negative run seed
        name (str): stream name, e.g. "init" or "batches"

    Returns:
        np.random.Generator: generator for this stream

    Raises:
        ValueError: if seed is negative.
    '''
    if seed < 0:
        raise ValueError("Seed must be non-negative.")
    key = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return np.random.Generator(np.random.Philox(key))


class TensorNode(object):
    '''
    Shape-tagged dense array participating in a reverse-mode gradient graph.

    Attributes:
        data (np.ndarray): values, row-major
        grad (np.ndarray or None): accumulated gradient, same shape as data
        requires_grad (bool): whether gradients flow into this node
        op_tag (str): label of the operation that produced the node
    '''

    def __init__(self, data, requires_grad:bool=False, op_tag:str="leaf", dtype=None):
        '''
        Constructor.

        Args:
            data (array-like): values
            requires_grad (bool): whether this node collects gradients
            op_tag (str): provenance label
            dtype (np.dtype or None): storage type; keeps a floating input's own
                type when None, 32-bit otherwise
        '''
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.op_tag = op_tag
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return len(self._parents) == 0

    def numpy(self) -> np.ndarray:
        '''
        Get underlying values.

        Returns:
            np.ndarray: data array (not a copy)
        '''
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return "TensorNode(shape={}, op={}, requires_grad={})".format(self.shape, self.op_tag, self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class GradGraph(object):
    '''
    Topologically ordered view of the graph ending at a root node.

    Attributes:
        nodes (list[TensorNode]): nodes requiring gradients, parents before children
        leaves (list[TensorNode]): nodes without parents (parameters and inputs)
    '''

    def __init__(self, root:TensorNode):
        '''
        Constructor.

        Args:
            root (TensorNode): last node of the graph
        '''
        self.root = root
        self.nodes = []
        visited = set()
        # iterative post-order DFS; deep models overflow the recursion limit
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

    @property
    def leaves(self) -> 'list[TensorNode]':
        return [node for node in self.nodes if node.is_leaf]


def parameter(data, dtype=None) -> TensorNode:
    '''
    Create a trainable leaf.

    Args:
        data (array-like): initial values
        dtype (np.dtype or None): storage type

    Returns:
        TensorNode: leaf with requires_grad set
    '''
    return TensorNode(data, requires_grad=True, op_tag="param", dtype=dtype)


def constant(data, dtype=None) -> TensorNode:
    return TensorNode(data, requires_grad=False, op_tag="const", dtype=dtype)


def zero_grad(params) -> None:
    '''
    Reset gradients of the given parameters.

    Args:
        params (iterable[TensorNode]): parameters
    '''
    for p in params:
        p.grad = None


def _as_node(x, like:TensorNode|None=None) -> TensorNode:
    if isinstance(x, TensorNode):
        return x
    dtype = like.dtype if like is not None else None
    return constant(np.asarray(x), dtype=dtype)


def _make(data:np.ndarray, parents:tuple, op_tag:str, backward_fn) -> TensorNode:
    requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out = TensorNode(data, requires_grad=requires_grad, op_tag=op_tag, dtype=data.dtype)
    if requires_grad:
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(node:TensorNode, grad:np.ndarray) -> None:
    if not node.requires_grad:
        return
    grad = np.asarray(grad, dtype=node.dtype)
    if node.grad is None:
        node.grad = grad.copy()
    else:
        node.grad = node.grad + grad


def _unbroadcast(grad:np.ndarray, shape:tuple) -> np.ndarray:
    '''
    Sum a broadcast gradient back down to an operand's shape.
    '''
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a:TensorNode, b:TensorNode, op:str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("Cannot {} shapes {} and {}.".format(op, a.shape, b.shape))


def add(x, y) -> TensorNode:
    x = _as_node(x, y if isinstance(y, TensorNode) else None)
    y = _as_node(y, x)
    _broadcast_shape(x, y, "add")

    def _backward(g):
        _accumulate(x, _unbroadcast(g, x.shape))
        _accumulate(y, _unbroadcast(g, y.shape))
    return _make(x.data + y.data, (x, y), "add", _backward)


def sub(x, y) -> TensorNode:
    x = _as_node(x, y if isinstance(y, TensorNode) else None)
    y = _as_node(y, x)
    _broadcast_shape(x, y, "subtract")

    def _backward(g):
        _accumulate(x, _unbroadcast(g, x.shape))
        _accumulate(y, _unbroadcast(-g, y.shape))
    return _make(x.data - y.data, (x, y), "sub", _backward)


def mul(x, y) -> TensorNode:
    x = _as_node(x, y if isinstance(y, TensorNode) else None)
    y = _as_node(y, x)
    _broadcast_shape(x, y, "multiply")

    def _backward(g):
        if x.requires_grad:
            _accumulate(x, _unbroadcast(g * y.data, x.shape))
        if y.requires_grad:
            _accumulate(y, _unbroadcast(g * x.data, y.shape))
    return _make(x.data * y.data, (x, y), "mul", _backward)


def scale(x:TensorNode, factor:float) -> TensorNode:
    factor = x.dtype.type(factor)

    def _backward(g):
        _accumulate(x, g * factor)
    return _make(x.data * factor, (x,), "scale", _backward)


def neg(x:TensorNode) -> TensorNode:
    return scale(x, -1.0)


def silu(x:TensorNode) -> TensorNode:
    '''
    Sigmoid-weighted linear unit, x * sigmoid(x).
    '''
    s = expit(x.data)

    def _backward(g):
        _accumulate(x, g * s * (1 + x.data * (1 - s)))
    return _make(x.data * s, (x,), "silu", _backward)


def sum(x:TensorNode, axis=None) -> TensorNode:
    def _backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))
    return _make(np.asarray(x.data.sum(axis=axis)), (x,), "sum", _backward)


def mean(x:TensorNode, axis=None) -> TensorNode:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis), 1.0 / count)


def matmul(a:TensorNode, b:TensorNode) -> TensorNode:
    '''
    Batched matrix product [..., m, k] x [..., k, n] -> [..., m, n].

    Args:
        a (TensorNode): left operand, at least 2-d
        b (TensorNode): right operand, at least 2-d

    Returns:
        TensorNode: product, batch extents broadcast

    Raises:
        ShapeError: if inner extents differ or batch extents do not broadcast.
    '''
    a = _as_node(a)
    b = _as_node(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("Cannot multiply shapes {} and {}.".format(a.shape, b.shape))
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("Batch extents of {} and {} do not broadcast.".format(a.shape, b.shape))

    def _backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))
    return _make(np.matmul(a.data, b.data), (a, b), "matmul", _backward)


def reshape(x:TensorNode, shape:tuple) -> TensorNode:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("Cannot reshape {} into {}.".format(x.shape, shape))

    def _backward(g):
        _accumulate(x, g.reshape(x.shape))
    return _make(data, (x,), "reshape", _backward)


def transpose(x:TensorNode, axes:tuple|None=None) -> TensorNode:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)

    def _backward(g):
        _accumulate(x, np.transpose(g, inverse))
    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), "transpose", _backward)


def concat(nodes:'list[TensorNode]', axis:int=0) -> TensorNode:
    '''
    Concatenate nodes along an axis.
    '''
    nodes = list(nodes)
    try:
        data = np.concatenate([n.data for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("Cannot concatenate shapes {}.".format([n.shape for n in nodes]))
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def _backward(g):
        for node, part in zip(nodes, np.split(g, bounds, axis=axis)):
            _accumulate(node, part)
    return _make(data, tuple(nodes), "concat", _backward)


def rowwise_softmax(x:TensorNode, additive_mask:np.ndarray|None=None) -> TensorNode:
    '''
    Softmax over the last axis.

    Args:
        x (TensorNode): scores
        additive_mask (np.ndarray or None): array broadcastable to x with entries 0
            (kept) or MASK_VALUE / -inf (dropped)

    Returns:
        TensorNode: probabilities; dropped entries are exactly 0

    Raises:
        ValueError: if a row has every entry masked.
    '''
    if x.shape[-1] < 1:
        raise ShapeError("Softmax needs a non-empty last axis, got {}.".format(x.shape))
    z = x.data
    masked = None
    if additive_mask is not None:
        mask = np.asarray(additive_mask)
        try:
            np.broadcast_shapes(mask.shape, x.shape)
        except ValueError:
            raise ShapeError("Mask shape {} does not match scores {}.".format(mask.shape, x.shape))
        masked = np.broadcast_to(mask <= MASK_VALUE, x.shape)
        if np.any(masked.all(axis=-1)):
            raise ValueError("Softmax row is fully masked; the distribution is undefined.")
        z = np.where(masked, -np.inf, z)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype)

    def _backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))
    return _make(y, (x,), "softmax", _backward)


def rmsnorm(x:TensorNode, gain:TensorNode, eps:float=RMSNORM_EPS) -> TensorNode:
    '''
    Root-mean-square normalization of the last axis followed by an elementwise gain.

    Args:
        x (TensorNode): input [..., d]
        gain (TensorNode): gain [d]
        eps (float): regularizer added to the mean of squares

    Returns:
        TensorNode: normalized values

    Raises:
        ShapeError: if the last extent of x is not the gain length.
    '''
    if gain.ndim != 1 or x.shape[-1] != gain.shape[0]:
        raise ShapeError("Cannot normalize shape {} with gain {}.".format(x.shape, gain.shape))
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * r

    def _backward(g):
        if x.requires_grad:
            gy = g * gain.data
            _accumulate(x, r * (gy - xhat * (gy * xhat).mean(axis=-1, keepdims=True)))
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, gain.shape[0]).sum(axis=0))
    return _make(xhat * gain.data, (x, gain), "rmsnorm", _backward)


def rotate_pairs(x:TensorNode, cos:np.ndarray, sin:np.ndarray) -> TensorNode:
    '''
    Rotate interleaved pairs (x[2i], x[2i+1]) of the last axis by fixed angles.

    Args:
        x (TensorNode): input [..., t, d]
        cos (np.ndarray): cosines [t, d/2]
        sin (np.ndarray): sines [t, d/2]

    Returns:
        TensorNode: rotated input
    '''
    cos = cos.astype(x.dtype)
    sin = sin.astype(x.dtype)
    even, odd = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def _backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = go * cos - ge * sin
        _accumulate(x, gx)
    return _make(out, (x,), "rotate_pairs", _backward)


def embedding_lookup(table:TensorNode, ids) -> TensorNode:
    '''
    Gather rows of an embedding table.

    Args:
        table (TensorNode): table [V, d]
        ids (array-like of int): row indices, any shape

    Returns:
        TensorNode: gathered rows [*ids.shape, d]

    Raises:
        VocabularyError: if an id is outside [0, V).
    '''
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabularyError("Token id out of range [0, {}).".format(table.shape[0]))

    def _backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accumulate(table, gt)
    return _make(table.data[ids], (table,), "embedding", _backward)


def cross_entropy_logits(logits:TensorNode, targets, ignore_index:int=-100) -> TensorNode:
    '''
    Mean negative log-likelihood of targets under softmax(logits).

    Args:
        logits (TensorNode): scores [..., V]
        targets (array-like of int): target ids with the leading shape of logits
        ignore_index (int): target value excluded from the mean

    Returns:
        TensorNode: scalar loss

    Raises:
        ShapeError: if targets and logits disagree.
        ValueError: if every position is ignored.
        VocabularyError: if a target is outside the vocabulary.
    '''
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError("Targets shape {} does not match logits {}.".format(targets.shape, logits.shape))
    vocab = logits.shape[-1]
    flat_logits = logits.data.reshape(-1, vocab)
    flat_targets = targets.reshape(-1)
    valid = flat_targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("Every target position is ignored.")
    picked = flat_targets[valid]
    if picked.min() < 0 or picked.max() >= vocab:
        raise VocabularyError("Target id out of range [0, {}).".format(vocab))
    lse = logsumexp(flat_logits[valid], axis=-1)
    loss = (lse - flat_logits[valid, picked]).sum() / n_valid

    def _backward(g):
        probs = np.zeros_like(flat_logits)
        rows = np.exp(flat_logits[valid] - lse[:, None])
        rows[np.arange(n_valid), picked] -= 1.0
        probs[valid] = rows
        _accumulate(logits, (probs * (g / n_valid)).reshape(logits.shape))
    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy", _backward)


def backward(loss:TensorNode) -> GradGraph:
    '''
    Propagate gradients from a scalar root to every leaf requiring them.

    Gradients accumulate into leaves; intermediate gradients and closures are
    released afterwards, so a graph can only be traversed once.

    Args:
        loss (TensorNode): scalar root

    Returns:
        GradGraph: the traversed graph

    Raises:
        GraphError: if the root is not a scalar, does not require gradients, or
            was already traversed.
    '''
    if loss.size != 1:
        raise GraphError("Backward needs a scalar root, got shape {}.".format(loss.shape))
    if loss._consumed:
        raise GraphError("Graph was already traversed; run a new forward pass first.")
    if not loss.requires_grad:
        raise GraphError("Root does not depend on any parameter.")
    graph = GradGraph(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in graph.nodes:
        if not node.is_leaf:
            node.grad = None
            node._backward = None
            node._parents = ()
    loss._consumed = True
    return graph
