# -*- coding: utf-8 -*-
'''
Data submodule: dataset files, plain-text corpora and batching.

A dataset file holds one JSON object per line ({prompt, solution, answer, meta}).
The vocabulary lives next to it in a `vocab.json` sidecar.
'''

import os
import json
import logging
from dataclasses import dataclass
import numpy as np
from .tasks import SyntheticSample, TaskVocab, task_vocab, PAD, BOS
from .tensor import make_stream
from .exceptions import DatasetError

__all__ = ["Dataset", "Batch", "write_dataset", "read_dataset", "load_corpus", "batch_iter", "batches_per_epoch"]

VOCAB_FILE = "vocab.json"


class Dataset(object):
    '''
    Samples of one task together with their vocabulary.

    Attributes:
        samples (list[SyntheticSample]): samples
        vocab (TaskVocab): vocabulary the ids refer to
    '''

    def __init__(self, samples:'list[SyntheticSample]', vocab:TaskVocab):
        self.samples = list(samples)
        self.vocab = vocab

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index:int) -> SyntheticSample:
        return self.samples[index]

    def __iter__(self):
        return iter(self.samples)

    @property
    def kind(self) -> str:
        '''
        Task kind ("aet", "prosqa" or "corpus").
        '''
        if not self.samples:
            return "corpus" if self.vocab.kind == "bytes" else self.vocab.kind
        return self.samples[0].meta.get("task", "corpus")

    @property
    def max_solution_length(self) -> int:
        return max((len(s.solution) for s in self.samples), default=0)

    def subset(self, count:int) -> 'Dataset':
        return Dataset(self.samples[:count], self.vocab)


def write_dataset(path:str, dataset:Dataset) -> None:
    '''
    Write samples as JSON lines and the vocabulary as a sidecar.

    Args:
        path (str): dataset file; `vocab.json` is written in the same directory
        dataset (Dataset): samples and vocabulary
    '''
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for sample in dataset:
            f.write(json.dumps(sample.to_dict(), sort_keys=True, ensure_ascii=False))
            f.write("\n")
    with open(os.path.join(folder, VOCAB_FILE), "w", encoding="utf-8") as f:
        json.dump(dataset.vocab.to_dict(), f, ensure_ascii=False)
    logging.info("Wrote %d samples to %s", len(dataset), path)


def read_dataset(path:str) -> Dataset:
    '''
    Read a dataset file and its vocabulary sidecar.

    Args:
        path (str): dataset file

    Returns:
        Dataset: samples and vocabulary

    Raises:
        DatasetError: if a line is malformed, the sidecar is missing, or ids exceed the vocabulary.
    '''
    sidecar = os.path.join(os.path.dirname(os.path.abspath(path)), VOCAB_FILE)
    if not os.path.exists(sidecar):
        raise DatasetError("Missing vocabulary sidecar {}.".format(sidecar))
    with open(sidecar, "r", encoding="utf-8") as f:
        vocab = TaskVocab.from_dict(json.load(f))
    samples = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                sample = SyntheticSample.from_dict(json.loads(line))
            except json.JSONDecodeError as e:
                raise DatasetError("{}:{}: invalid JSON ({}).".format(path, lineno, e))
            if max(sample.prompt + sample.solution, default=0) >= len(vocab):
                raise DatasetError("{}:{}: token id outside the vocabulary.".format(path, lineno))
            samples.append(sample)
    return Dataset(samples, vocab)


def load_corpus(path:str, seq_len:int, stride:int|None=None) -> Dataset:
    '''
    Cut a UTF-8 text file into byte-level training sequences.

    Each sequence is [bos] followed by up to seq_len bytes, so that inputs and
    next-token targets both fit seq_len positions.

    Args:
        path (str): plain-text file
        seq_len (int): positions per sequence
        stride (int or None): start offset between sequences; seq_len when None

    Returns:
        Dataset: corpus samples ([bos] prompt, bytes as solution)

    Raises:
        DatasetError: if the file is empty.
    '''
    vocab = task_vocab("bytes")
    with open(path, "rb") as f:
        blob = f.read()
    if not blob:
        raise DatasetError("Corpus {} is empty.".format(path))
    ids = np.frombuffer(blob, dtype=np.uint8).astype(np.int64) + len(vocab.tokens) - 256
    stride = stride or seq_len
    samples = []
    for index, start in enumerate(range(0, len(ids), stride)):
        chunk = [int(i) for i in ids[start:start + seq_len]]
        if len(chunk) < 2:
            break
        samples.append(SyntheticSample([BOS], chunk, "", {"task": "corpus", "offset": start, "index": index}))
    logging.info("Loaded corpus %s: %d bytes, %d sequences", path, len(blob), len(samples))
    return Dataset(samples, vocab)


@dataclass
class Batch:
    '''
    Right-padded training batch.

    Attributes:
        ids (np.ndarray): inputs [b, seq_len]
        targets (np.ndarray): next tokens [b, seq_len], pad id past the end
        mask (np.ndarray): 1 where the target counts in the loss [b, seq_len]
        epoch (int): epoch the batch belongs to
        index (int): batch index within the epoch
    '''
    ids: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    epoch: int = 0
    index: int = 0

    def loss_targets(self, ignore_index:int=-100) -> np.ndarray:
        '''
        Targets with masked positions replaced by ignore_index.
        '''
        return np.where(self.mask > 0, self.targets, ignore_index)

    @property
    def width(self) -> int:
        '''
        Positions up to the last unmasked or non-pad input.
        '''
        used = np.nonzero((self.ids != PAD).any(axis=0) | (self.mask > 0).any(axis=0))[0]
        return int(used[-1]) + 1 if used.size else 1


def batches_per_epoch(n_samples:int, batch_size:int) -> int:
    return -(-n_samples // batch_size)


def _pack(samples:list, indices, seq_len:int, mode:str, pad_id:int) -> 'tuple[np.ndarray, np.ndarray, np.ndarray]':
    ids = np.full((len(indices), seq_len), pad_id, dtype=np.int64)
    targets = np.full((len(indices), seq_len), pad_id, dtype=np.int64)
    mask = np.zeros((len(indices), seq_len), dtype=np.float32)
    for row, i in enumerate(indices):
        sample = samples[i]
        seq = list(sample.prompt) + list(sample.solution)
        n = len(seq) - 1
        if n > seq_len:
            raise DatasetError("Sample {} has {} positions, more than seq_len {}.".format(i, n, seq_len))
        ids[row, :n] = seq[:-1]
        targets[row, :n] = seq[1:]
        if mode == "finetune":
            # target i is token i + 1: solution tokens start at len(prompt)
            mask[row, max(len(sample.prompt) - 1, 0):n] = 1.0
        else:
            mask[row, :n] = 1.0
    return ids, targets, mask


def batch_iter(samples, batch_size:int, seq_len:int, mode:str="finetune", seed:int=0, epochs:int|None=None, start:int=0, shuffle:bool=True, pad_id:int=PAD):
    '''
    Stream right-padded batches, reshuffling every epoch.

    The order of epoch e is a permutation drawn from the stream
    ("batches/<e>", seed); it does not depend on earlier epochs, which lets a
    resumed run skip directly to its position.

    Args:
        samples (Dataset or list[SyntheticSample]): samples
        batch_size (int): samples per batch; the last batch of an epoch may be smaller
        seq_len (int): padded positions
        mode (str): "finetune" masks the prompt, "lm" keeps every real token
        seed (int): shuffling seed
        epochs (int or None): number of epochs; endless when None
        start (int): number of batches to skip from the beginning
        shuffle (bool): shuffle within epochs
        pad_id (int): padding id

    Yields:
        Batch: next batch

    Raises:
        ValueError: if batch_size is below 1 or the mode is unknown.
        DatasetError: if the dataset is empty or a sample does not fit seq_len.
    '''
    if batch_size < 1:
        raise ValueError("Batch size must be at least 1.")
    if mode not in ("finetune", "lm"):
        raise ValueError("Unknown batching mode '{}'.".format(mode))
    samples = list(samples)
    if not samples:
        raise DatasetError("Cannot batch an empty dataset.")
    per_epoch = batches_per_epoch(len(samples), batch_size)
    epoch, index = divmod(start, per_epoch)
    while epochs is None or epoch < epochs:
        if shuffle:
            order = make_stream(seed, "batches/{}".format(epoch)).permutation(len(samples))
        else:
            order = np.arange(len(samples))
        for index in range(index, per_epoch):
            chunk = order[index * batch_size:(index + 1) * batch_size]
            ids, targets, mask = _pack(samples, chunk, seq_len, mode, pad_id)
            yield Batch(ids, targets, mask, epoch, index)
        epoch += 1
        index = 0
