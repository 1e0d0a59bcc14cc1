# -*- coding: utf-8 -*-
'''
Diagnostics submodule: representation collapse and router analysis.

- matrix-based Renyi entropy of value and hidden states,
- layer-wise token separability with cross-validated linear probes,
- router magnitude heatmaps, overall and per destination head,
- CSV export of raw representations.
'''

import csv
import logging
from dataclasses import dataclass, field
import numpy as np
from scipy.linalg import eigh
from scipy.optimize import minimize
from scipy.special import logsumexp
from . import tensor as T
from .model import LimeModel, RouterBank
from .tasks import TaskVocab, PAD
from .exceptions import ProbeError

__all__ = [
    "RepresentationDump", "ProbeDataset", "RouterHeatmap", "RouterHeadReport",
    "renyi_entropy", "entropy_profile", "collect_representations", "probe_patterns",
    "linear_probe_cv", "probe_profile", "router_heatmap", "per_head_router_report", "export_embeddings",
]

PROBE_WORDS = ("is", "are", "was", "were")
KINDS = ("values", "hiddens", "routed")


def renyi_entropy(z:np.ndarray, alpha:float=2.0) -> float:
    '''
    Matrix-based Renyi entropy of a set of representations.

    The Gram matrix K = Z Z^T is diagonalized; eigenvalues are clamped at 0 and
    divided by tr(K). The entropy is log(sum p^alpha) / (1 - alpha).

    Args:
        z (np.ndarray): representations [t, d'], t >= 2
        alpha (float): order, > 0 and != 1

    Returns:
        float: entropy in [0, log t]

    Raises:
        ValueError: on fewer than two rows, an invalid order, or an all-zero Z.
    '''
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("Entropy needs at least two representations, got shape {}.".format(z.shape))
    if alpha <= 0 or alpha == 1:
        raise ValueError("Renyi order must be positive and different from 1.")
    gram = z @ z.T
    trace = float(np.trace(gram))
    if trace <= 0:
        raise ValueError("Representations are all zero.")
    eigenvalues = np.clip(eigh(gram, eigvals_only=True), 0.0, None)
    p = eigenvalues / trace
    entropy = float(np.log(np.sum(p ** alpha)) / (1.0 - alpha))
    return float(np.clip(entropy, 0.0, np.log(z.shape[0])))


@dataclass
class RepresentationDump:
    '''
    Per-position representations recorded during forward passes.

    Attributes:
        token_ids (np.ndarray): token of each position [P]
        sequence (np.ndarray): source sequence of each position [P]
        position (np.ndarray): index within its sequence [P]
        values (dict[int, np.ndarray]): W^(V) outputs per layer, before routing [P, H_kv * d_h]
        hiddens (dict[int, np.ndarray]): residual stream after each layer [P, d]
        routed (dict[int, np.ndarray]): routed values per layer (only when requested)
    '''
    token_ids: np.ndarray
    sequence: np.ndarray
    position: np.ndarray
    values: dict = field(default_factory=dict)
    hiddens: dict = field(default_factory=dict)
    routed: dict = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return len(self.hiddens)

    def __len__(self) -> int:
        return len(self.token_ids)

    def layer_states(self, layer:int, kind:str="hiddens") -> np.ndarray:
        '''
        Representations of one layer.

        Raises:
            ValueError: if the kind is unknown or the layer was not recorded.
        '''
        if kind not in KINDS:
            raise ValueError("Unknown representation kind '{}'.".format(kind))
        states = getattr(self, kind)
        if layer not in states:
            raise ValueError("Layer {} has no recorded {} (layers {}).".format(layer, kind, sorted(states)))
        return states[layer]


@dataclass
class ProbeDataset:
    '''
    Class-balanced probe occurrences.

    Attributes:
        classes (list[str]): class names, label i is classes[i]
        labels (np.ndarray): label of each occurrence [N]
        rows (np.ndarray): dump position of each occurrence [N]
        features (dict[str, dict[int, np.ndarray]]): kind -> layer -> [N, d']
    '''
    classes: list
    labels: np.ndarray
    rows: np.ndarray
    features: dict = field(default_factory=dict)

    def layer_features(self, layer:int, kind:str="hiddens") -> np.ndarray:
        try:
            return self.features[kind][layer]
        except KeyError:
            raise ValueError("No {} features for layer {}.".format(kind, layer))

    @property
    def class_counts(self) -> 'list[int]':
        return [int(np.sum(self.labels == c)) for c in range(len(self.classes))]


class _Recorder(object):
    def __init__(self, include_routed:bool):
        self.include_routed = include_routed
        self.arrays = {}

    def record(self, kind:str, layer:int, array:np.ndarray) -> None:
        if kind == "routed" and not self.include_routed:
            return
        self.arrays[(kind, layer)] = array


def probe_patterns(vocab:TaskVocab, words=PROBE_WORDS) -> 'dict[str, tuple[list[int], int]]':
    '''
    Token patterns locating probe words.

    With a byte-level vocabulary a word is matched with a leading and trailing
    space and probed at its final byte; with a word-level vocabulary it is a
    single token.

    Returns:
        dict[str, tuple[list[int], int]]: word -> (pattern, offset of the probed token)
    '''
    patterns = {}
    for word in words:
        if vocab.kind == "bytes":
            patterns[word] = (vocab.encode(" {} ".format(word)), len(word.encode("utf-8")))
        else:
            patterns[word] = (vocab.encode(word), 0)
    return patterns


def _as_sequences(sequences) -> 'list[list[int]]':
    out = []
    for s in sequences:
        if hasattr(s, "prompt"):
            out.append(list(s.prompt) + list(s.solution))
        else:
            out.append([int(i) for i in s])
    return out


def collect_representations(model:LimeModel, sequences, patterns:dict|None=None, batch_size:int=16, max_per_class:int=1668, include_routed:bool=False) -> 'tuple[RepresentationDump, ProbeDataset|None]':
    '''
    Record value and hidden states of every layer and gather probe occurrences.

    Args:
        model (LimeModel): model
        sequences (iterable): token id lists, or samples (prompt + solution)
        patterns (dict or None): probe patterns from probe_patterns; no probe set when None
        batch_size (int): sequences per forward pass
        max_per_class (int): occurrences kept per class at most
        include_routed (bool): also record routed values

    Returns:
        tuple[RepresentationDump, ProbeDataset or None]: dump and balanced probe set

    Raises:
        ProbeError: if a probe word never occurs.
    '''
    sequences = [s[:model.cfg.max_seq] for s in _as_sequences(sequences) if len(s) > 0]
    if not sequences:
        raise ValueError("No sequences to record.")
    chunks = {}
    tokens, seq_index, positions = [], [], []
    for start in range(0, len(sequences), batch_size):
        batch = sequences[start:start + batch_size]
        width = max(len(s) for s in batch)
        ids = np.full((len(batch), width), PAD, dtype=np.int64)
        for row, s in enumerate(batch):
            ids[row, :len(s)] = s
        recorder = _Recorder(include_routed)
        with T.no_grad():
            model.forward(ids, capture=recorder)
        for row, s in enumerate(batch):
            n = len(s)
            for key, array in recorder.arrays.items():
                chunks.setdefault(key, []).append(np.asarray(array[row, :n], dtype=np.float32))
            tokens.append(np.asarray(s, dtype=np.int64))
            seq_index.append(np.full(n, start + row, dtype=np.int64))
            positions.append(np.arange(n, dtype=np.int64))
    dump = RepresentationDump(np.concatenate(tokens), np.concatenate(seq_index), np.concatenate(positions))
    for (kind, layer), parts in sorted(chunks.items()):
        getattr(dump, kind)[layer] = np.concatenate(parts, axis=0)
    logging.info("Recorded %d positions over %d layers", len(dump), dump.num_layers)
    if patterns is None:
        return dump, None
    return dump, _probe_dataset(dump, sequences, patterns, max_per_class)


def _probe_dataset(dump:RepresentationDump, sequences:list, patterns:dict, max_per_class:int) -> ProbeDataset:
    offsets = np.concatenate([[0], np.cumsum([len(s) for s in sequences])])
    found = {word: [] for word in patterns}
    for i, s in enumerate(sequences):
        for word, (pattern, anchor) in patterns.items():
            m = len(pattern)
            for p in range(len(s) - m + 1):
                if s[p:p + m] == pattern:
                    found[word].append(offsets[i] + p + anchor)
    missing = [w for w, rows in found.items() if not rows]
    if missing:
        raise ProbeError("Probe words never occur in the corpus: {}.".format(", ".join(missing)))
    count = min(max_per_class, min(len(rows) for rows in found.values()))
    classes = list(patterns)
    rows = np.array([r for word in classes for r in found[word][:count]], dtype=np.int64)
    labels = np.repeat(np.arange(len(classes)), count)
    features = {}
    for kind in KINDS:
        states = getattr(dump, kind)
        if states:
            features[kind] = {layer: array[rows] for layer, array in states.items()}
    logging.info("Probe set: %d occurrences per class", count)
    return ProbeDataset(classes, labels, rows, features)


def entropy_profile(dump:RepresentationDump, alpha:float=2.0, kinds=("values", "hiddens")) -> 'dict[str, dict[int, float]]':
    '''
    Mean per-sequence Renyi entropy of every layer.

    Sequences shorter than two positions are skipped.

    Returns:
        dict[str, dict[int, float]]: kind -> layer -> entropy
    '''
    profile = {}
    groups = [np.nonzero(dump.sequence == s)[0] for s in np.unique(dump.sequence)]
    groups = [g for g in groups if len(g) >= 2]
    for kind in kinds:
        profile[kind] = {}
        for layer, states in sorted(getattr(dump, kind).items()):
            scores = [renyi_entropy(states[g], alpha) for g in groups if np.any(states[g])]
            profile[kind][layer] = float(np.mean(scores)) if scores else float("nan")
    return profile


def _softmax_regression(x:np.ndarray, y:np.ndarray, n_classes:int, l2:float, tol:float, max_iter:int) -> 'tuple[np.ndarray, np.ndarray]':
    n, d = x.shape
    onehot = np.eye(n_classes)[y]

    def objective(theta):
        w = theta[:d * n_classes].reshape(d, n_classes)
        b = theta[d * n_classes:]
        logits = x @ w + b
        lse = logsumexp(logits, axis=1)
        loss = np.mean(lse - np.sum(logits * onehot, axis=1)) + 0.5 * l2 * np.sum(w * w)
        probs = np.exp(logits - lse[:, None])
        diff = (probs - onehot) / n
        grad_w = x.T @ diff + l2 * w
        grad_b = diff.sum(axis=0)
        return loss, np.concatenate([grad_w.reshape(-1), grad_b])

    theta0 = np.zeros(d * n_classes + n_classes)
    result = minimize(objective, theta0, jac=True, method="L-BFGS-B", options={"maxiter": max_iter, "gtol": tol})
    theta = result.x
    return theta[:d * n_classes].reshape(d, n_classes), theta[d * n_classes:]


def _stratified_folds(labels:np.ndarray, folds:int, seed:int) -> np.ndarray:
    rng = T.make_stream(seed, "probe-folds")
    assignment = np.empty(len(labels), dtype=np.int64)
    for c in np.unique(labels):
        members = np.nonzero(labels == c)[0]
        members = members[rng.permutation(len(members))]
        assignment[members] = np.arange(len(members)) % folds
    return assignment


def linear_probe_cv(probe:ProbeDataset, layer:int, folds:int=5, seed:int=0, kind:str="hiddens", l2:float=1e-3, tol:float=1e-6, max_iter:int=5000) -> 'tuple[float, float]':
    '''
    Cross-validated accuracy of a multinomial logistic-regression probe.

    Folds are stratified by class. Features are standardized with statistics
    of the training folds only.

    Args:
        probe (ProbeDataset): balanced occurrences
        layer (int): layer to probe
        folds (int): number of folds
        seed (int): fold assignment seed
        kind (str): "hiddens", "values" or "routed"
        l2 (float): weight penalty
        tol (float): solver gradient tolerance
        max_iter (int): solver iteration cap

    Returns:
        tuple[float, float]: mean and standard deviation of held-out accuracy

    Raises:
        ProbeError: if a class has fewer than `folds` occurrences or a training fold lacks a class.
    '''
    x = np.asarray(probe.layer_features(layer, kind), dtype=np.float64)
    y = np.asarray(probe.labels, dtype=np.int64)
    n_classes = len(probe.classes)
    if folds < 2:
        raise ValueError("Cross-validation needs at least two folds.")
    if min(probe.class_counts) < folds:
        raise ProbeError("Every class needs at least {} occurrences, counts are {}.".format(folds, probe.class_counts))
    assignment = _stratified_folds(y, folds, seed)
    scores = []
    for k in range(folds):
        train, test = assignment != k, assignment == k
        if len(np.unique(y[train])) < n_classes:
            raise ProbeError("Training folds of split {} miss a class.".format(k))
        mean = x[train].mean(axis=0)
        std = x[train].std(axis=0)
        std[std == 0] = 1.0
        w, b = _softmax_regression((x[train] - mean) / std, y[train], n_classes, l2, tol, max_iter)
        predicted = np.argmax(((x[test] - mean) / std) @ w + b, axis=1)
        scores.append(float(np.mean(predicted == y[test])))
    return float(np.mean(scores)), float(np.std(scores))


def probe_profile(probe:ProbeDataset, folds:int=5, seed:int=0, kind:str="hiddens") -> 'dict[int, tuple[float, float]]':
    '''
    Probe accuracy of every recorded layer.
    '''
    return {layer: linear_probe_cv(probe, layer, folds, seed, kind) for layer in sorted(probe.features[kind])}


@dataclass
class RouterHeatmap:
    '''
    Normalized router magnitudes.

    Attributes:
        matrix (np.ndarray): [L - 1, L]; row r is layer r + 2, column j - 1 is buffered layer j
    '''
    matrix: np.ndarray

    @property
    def layers(self) -> 'list[int]':
        return list(range(2, self.matrix.shape[0] + 2))

    def row(self, layer:int) -> np.ndarray:
        return self.matrix[layer - 2]


@dataclass
class RouterHeadReport:
    '''
    Router magnitudes per destination head.

    Attributes:
        magnitudes (np.ndarray): [L - 1, H_kv, L] mean |weight| over source heads
    '''
    magnitudes: np.ndarray

    @property
    def normalized(self) -> np.ndarray:
        '''
        Magnitudes normalized over buffered layers for every (layer, head).
        '''
        sums = self.magnitudes.sum(axis=-1, keepdims=True)
        return np.divide(self.magnitudes, sums, out=np.zeros_like(self.magnitudes), where=sums > 0)


def _block_magnitudes(router:RouterBank, layer:int) -> np.ndarray:
    h = router.num_kv_heads
    out = np.zeros((h, router.num_layers))
    if not router.weights:
        # no router: every layer reads its own heads only
        out[:, layer - 1] = 1.0
        return out
    w = np.abs(np.asarray(router.dense(layer), dtype=np.float64))
    for j in range(1, layer + 1):
        out[:, j - 1] = w[:, (j - 1) * h:j * h].mean(axis=1)
    return out


def per_head_router_report(router:RouterBank) -> RouterHeadReport:
    '''
    Mean absolute router weight of every (layer, destination head, buffered layer).
    '''
    blocks = [_block_magnitudes(router, layer) for layer in range(2, router.num_layers + 1)]
    if not blocks:
        return RouterHeadReport(np.zeros((0, router.num_kv_heads, router.num_layers)))
    return RouterHeadReport(np.stack(blocks))


def router_heatmap(router:RouterBank) -> RouterHeatmap:
    '''
    Average contribution of every buffered layer to every routed layer.

    m(l, j) is the mean of |W_l| over the column block of buffered layer j,
    normalized so that each row sums to one. Entries j > l are 0.

    Args:
        router (RouterBank): routers

    Returns:
        RouterHeatmap: [L - 1, L] matrix
    '''
    magnitudes = per_head_router_report(router).magnitudes.mean(axis=1)
    sums = magnitudes.sum(axis=-1, keepdims=True)
    matrix = np.divide(magnitudes, sums, out=np.zeros_like(magnitudes), where=sums > 0)
    return RouterHeatmap(matrix)


def export_embeddings(dump:RepresentationDump, layer:int, kind:str, path:str, labels:dict|None=None) -> int:
    '''
    Write one layer's representations as CSV.

    The header is token,label,layer,v0..v{d'-1}; values use 9 significant
    digits, which round-trip 32-bit floats exactly.

    Args:
        dump (RepresentationDump): recorded representations
        layer (int): layer number
        kind (str): "values", "hiddens" or "routed"
        path (str): destination
        labels (dict[int, str] or None): label of dump rows (e.g. probe occurrences)

    Returns:
        int: number of rows written
    '''
    states = dump.layer_states(layer, kind)
    labels = labels or {}
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["token", "label", "layer"] + ["v{}".format(i) for i in range(states.shape[1])])
        for row in range(states.shape[0]):
            values = ["{:.9g}".format(float(v)) for v in states[row].astype(np.float32)]
            writer.writerow([int(dump.token_ids[row]), labels.get(row, ""), layer] + values)
    logging.info("Exported %d %s rows of layer %d to %s", states.shape[0], kind, layer, path)
    return states.shape[0]
