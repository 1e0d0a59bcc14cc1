# -*- coding: utf-8 -*-
'''
Trainer submodule.

The optimization recipe: two parameter groups (routers get their own learning
rate and no weight decay), linear warmup followed by cosine or linear decay,
global-norm clipping and AdamW. Batches are prepared ahead of the optimizer on a
bounded asyncio queue; they are consumed in the order they were produced.
'''

import os
import json
import math
import time
import asyncio
import logging
from dataclasses import dataclass, field
import numpy as np
from tqdm import tqdm
from . import tensor as T
from .config import TrainConfig
from .model import LimeModel
from .optim import AdamW, AdamWState, ParamGroup, global_grad_norm, clip_global_norm
from .data import Dataset, Batch, batch_iter, batches_per_epoch
from .tasks import extract_answer, EOS
from .checkpoint import save_checkpoint, load_checkpoint
from .exceptions import ConfigError, DatasetError, NonFiniteLossError

__all__ = ["TrainState", "Trainer", "param_groups", "lr_at", "evaluate"]

IGNORE_INDEX = -100


def param_groups(model:LimeModel, cfg:TrainConfig) -> 'list[ParamGroup]':
    '''
    Split model parameters into the base group and the router group.

    Args:
        model (LimeModel): model
        cfg (TrainConfig): recipe

    Returns:
        list[ParamGroup]: base group, plus a router group when the variant learns routers
    '''
    router = model.router.named_parameters()
    base = {name: p for name, p in model.named_parameters().items() if name not in router}
    betas = (cfg.beta1, cfg.beta2)
    groups = [ParamGroup("base", base, lr=cfg.lr, weight_decay=cfg.weight_decay, betas=betas, eps=cfg.eps)]
    if router:
        # router weights are never decayed
        groups.append(ParamGroup("router", router, lr=cfg.router_lr, weight_decay=0.0, betas=betas, eps=cfg.eps))
    return groups


def lr_at(step:int, cfg:TrainConfig, total_steps:int|None=None, warmup_steps:int|None=None) -> 'dict[str, float]':
    '''
    Learning rates of both groups at a given step.

    Linear warmup from 0 to the peak, then cosine decay to min_lr or linear decay
    to 0. The router schedule has the same shape, scaled to its own peak. Steps
    past the end are clamped to the final value.

    Args:
        step (int): optimizer step (0 is the start of warmup)
        cfg (TrainConfig): recipe
        total_steps (int or None): schedule length; cfg.max_steps when None
        warmup_steps (int or None): warmup length; cfg.warmup_steps when None

    Returns:
        dict[str, float]: {"base": lr, "router": lr}

    Raises:
        ValueError: if step is negative.
        ConfigError: if the schedule length is unknown.
    '''
    if step < 0:
        raise ValueError("Step must be non-negative.")
    total = total_steps if total_steps is not None else cfg.max_steps
    warmup = warmup_steps if warmup_steps is not None else cfg.warmup_steps
    if total is None or warmup is None or warmup < 0:
        raise ConfigError("Schedule needs explicit total and warmup steps when they depend on the dataset.")
    step = min(step, total)
    if warmup > 0 and step < warmup:
        factor = step / warmup
        return {"base": cfg.lr * factor, "router": cfg.router_lr * factor}
    ratio = cfg.router_lr / cfg.lr
    if step >= total:
        base = cfg.min_lr if cfg.schedule == "cosine" else 0.0
        return {"base": base, "router": base * ratio}
    progress = (step - warmup) / (total - warmup)
    if cfg.schedule == "cosine":
        base = cfg.min_lr + (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress)) / 2.0
    else:
        base = cfg.lr * (1.0 - progress)
    return {"base": base, "router": base * ratio}


@dataclass
class TrainState:
    '''
    Resumable training state.

    Attributes:
        step (int): completed optimizer steps
        optimizer (AdamWState): moments per parameter
        best (dict or None): best evaluation so far ({"step", "loss"})
    '''
    step: int = 0
    optimizer: AdamWState = field(default_factory=AdamWState)
    best: dict|None = None

    def to_dict(self) -> dict:
        return {"step": self.step, "best": self.best}

    @classmethod
    def from_dict(cls, values:dict, optimizer:AdamWState|None=None) -> 'TrainState':
        return cls(int(values.get("step", 0)), optimizer or AdamWState(), values.get("best"))


def _loss_mode(dataset:Dataset, mode:str|None) -> str:
    if mode is not None:
        return mode
    return "lm" if dataset.kind == "corpus" else "finetune"


def evaluate(model:LimeModel, dataset:Dataset, mode:str="ppl", batch_size:int=32, loss_mode:str|None=None, max_new_tokens:int|None=None) -> dict:
    '''
    Evaluate a model on a dataset.

    Args:
        model (LimeModel): model
        dataset (Dataset): evaluation samples
        mode (str): "ppl" (perplexity of the masked targets) or "accuracy"
            (greedy open generation scored with extract_answer)
        batch_size (int): samples per forward pass
        loss_mode (str or None): "finetune" or "lm" masking for "ppl";
            "lm" for corpora and "finetune" for tasks when None
        max_new_tokens (int or None): generation cap; twice the longest solution when None

    Returns:
        dict: {"loss", "ppl", "tokens"} or {"accuracy", "correct", "total"}

    Raises:
        DatasetError: if the dataset is empty.
        ValueError: if the mode is unknown or accuracy is asked for a corpus.
    '''
    if len(dataset) == 0:
        raise DatasetError("Cannot evaluate on an empty dataset.")
    if mode == "ppl":
        seq_len = max(len(s) for s in dataset) - 1
        total, count = 0.0, 0
        with T.no_grad():
            for batch in batch_iter(dataset, batch_size, seq_len, _loss_mode(dataset, loss_mode), epochs=1, shuffle=False):
                n = int(batch.mask.sum())
                if n == 0:
                    continue
                width = batch.width
                loss = model.loss(batch.ids[:, :width], batch.loss_targets(IGNORE_INDEX)[:, :width], IGNORE_INDEX)
                total += loss.item() * n
                count += n
        mean = total / max(count, 1)
        return {"loss": mean, "ppl": float(np.exp(mean)), "tokens": count}
    if mode == "accuracy":
        if dataset.kind == "corpus":
            raise ValueError("Accuracy needs a task dataset with answers.")
        cap = max_new_tokens or 2 * dataset.max_solution_length
        correct = 0
        for start in range(0, len(dataset), batch_size):
            chunk = dataset.samples[start:start + batch_size]
            outputs = model.generate([s.prompt for s in chunk], cap, EOS)
            for sample, output in zip(chunk, outputs):
                if extract_answer(output, dataset.kind, dataset.vocab) == sample.answer:
                    correct += 1
        return {"accuracy": correct / len(dataset), "correct": correct, "total": len(dataset)}
    raise ValueError("Unknown evaluation mode '{}'.".format(mode))


class Trainer(object):
    '''
    Training loop owning a model and its optimizer.

    Attributes:
        model (LimeModel): model being trained
        cfg (TrainConfig): recipe
        train_data (Dataset): training samples
        eval_data (Dataset or None): evaluation samples
        optimizer (AdamW): grouped optimizer
        state (TrainState): resumable state
        metrics (list[dict]): per-step records of this session
    '''

    def __init__(self, model:LimeModel, cfg:TrainConfig, train_data:Dataset, eval_data:Dataset|None=None, out_dir:str|None=None, state:TrainState|None=None):
        '''
        Constructor.

        Args:
            model (LimeModel): model to train
            cfg (TrainConfig): recipe
            train_data (Dataset): training samples
            eval_data (Dataset or None): samples for periodic evaluation
            out_dir (str or None): run directory for metrics and checkpoints
            state (TrainState or None): state to resume from

        Raises:
            DatasetError: if the training set is empty.
            ConfigError: if warmup exceeds the schedule length.
        '''
        if len(train_data) == 0:
            raise DatasetError("Training set is empty.")
        self.model = model
        self.cfg = cfg
        self.train_data = train_data
        self.eval_data = eval_data
        self.state = state if state is not None else TrainState()
        self.optimizer = AdamW(param_groups(model, cfg), self.state.optimizer)
        self.metrics = []
        self.__out_dir = None
        self.__log_every = cfg.log_every
        self.__eval_every = cfg.eval_every
        self.set_out_dir(out_dir)
        if self.warmup_steps > self.total_steps:
            raise ConfigError("Warmup of {} steps exceeds the {} training steps.".format(self.warmup_steps, self.total_steps))

    def get_out_dir(self) -> str|None:
        return self.__out_dir

    def set_out_dir(self, out_dir:str|None) -> None:
        '''
        Set the run directory, creating it if needed.
        '''
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
        self.__out_dir = out_dir

    out_dir = property(get_out_dir, set_out_dir)

    def get_log_every(self) -> int:
        return self.__log_every

    def set_log_every(self, value:int) -> None:
        if value < 0:
            raise ValueError("Logging cadence must be non-negative.")
        self.__log_every = int(value)

    log_every = property(get_log_every, set_log_every)

    def get_eval_every(self) -> int:
        return self.__eval_every

    def set_eval_every(self, value:int) -> None:
        if value < 0:
            raise ValueError("Evaluation cadence must be non-negative.")
        self.__eval_every = int(value)

    eval_every = property(get_eval_every, set_eval_every)

    @property
    def steps_per_epoch(self) -> int:
        return batches_per_epoch(batches_per_epoch(len(self.train_data), self.cfg.batch_size), self.cfg.grad_accum)

    @property
    def total_steps(self) -> int:
        if self.cfg.max_steps is not None:
            return self.cfg.max_steps
        return self.cfg.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.steps_per_epoch if self.cfg.warmup_steps == -1 else self.cfg.warmup_steps

    def learning_rates(self, step:int) -> 'dict[str, float]':
        return lr_at(step, self.cfg, self.total_steps, self.warmup_steps)

    def micro_batches(self):
        '''
        Endless batch stream positioned after the batches already consumed.
        '''
        return batch_iter(self.train_data, self.cfg.batch_size, self.cfg.seq_len, self.cfg.mode, self.cfg.seed,
                          start=self.state.step * self.cfg.grad_accum)

    def train_step(self, batches:'list[Batch]|Batch') -> 'tuple[float, float]':
        '''
        One optimizer step over grad_accum micro-batches.

        forward, masked cross-entropy, backward, clipping, then grouped AdamW with
        the learning rates of the step being taken.

        Args:
            batches (list[Batch] or Batch): micro-batches of this step

        Returns:
            tuple[float, float]: mean loss, gradient norm before clipping

        Raises:
            NonFiniteLossError: if the loss is NaN or infinite (a diagnostic
                checkpoint is written first when a run directory is set).
        '''
        start = time.perf_counter()
        if isinstance(batches, Batch):
            batches = [batches]
        lrs = self.learning_rates(self.state.step + 1)
        self.optimizer.zero_grad()
        loss_value = 0.0
        for batch in batches:
            width = batch.width
            loss = self.model.loss(batch.ids[:, :width], batch.loss_targets(IGNORE_INDEX)[:, :width], IGNORE_INDEX)
            value = loss.item()
            if not np.isfinite(value):
                self._abort(value)
            T.backward(T.scale(loss, 1.0 / len(batches)))
            loss_value += value / len(batches)
        params = self.optimizer.parameters()
        grad_norm = global_grad_norm(params)
        clip_global_norm(params, self.cfg.clip_norm)
        for group in self.optimizer.groups:
            group.lr = lrs[group.name]
        self.optimizer.step()
        self.state.step += 1
        record = {"step": self.state.step, "loss": loss_value, "lr": lrs["base"], "grad_norm": grad_norm,
                  "wall_ms": (time.perf_counter() - start) * 1000.0}
        if len(self.optimizer.groups) > 1:
            record["router_lr"] = lrs["router"]
        self._record(record)
        return loss_value, grad_norm

    def _record(self, record:dict) -> None:
        self.metrics.append(record)
        if self.out_dir is not None:
            with open(os.path.join(self.out_dir, "metrics.jsonl"), "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")
        if self.log_every and record["step"] % self.log_every == 0:
            logging.info("step %d loss %.5f lr %.3g grad_norm %.4f", record["step"], record["loss"], record["lr"], record["grad_norm"])

    def _abort(self, value:float) -> None:
        logging.error("Non-finite loss %s at step %d", value, self.state.step + 1)
        if self.out_dir is not None:
            path = os.path.join(self.out_dir, "nonfinite-step{}.ckpt".format(self.state.step + 1))
            self.save(path)
        raise NonFiniteLossError("Loss became {} at step {}.".format(value, self.state.step + 1))

    def evaluate(self, mode:str="ppl", dataset:Dataset|None=None) -> dict:
        '''
        Evaluate the model on the evaluation set (or the given dataset).
        '''
        dataset = dataset if dataset is not None else self.eval_data
        if dataset is None:
            raise DatasetError("No evaluation set.")
        result = evaluate(self.model, dataset, mode, batch_size=self.cfg.batch_size, loss_mode=self.cfg.mode)
        logging.info("Evaluation at step %d: %s", self.state.step, result)
        return result

    def _track_best(self) -> None:
        result = self.evaluate("ppl")
        if self.state.best is None or result["loss"] < self.state.best["loss"]:
            self.state.best = {"step": self.state.step, "loss": result["loss"]}
            if self.out_dir is not None:
                self.save(os.path.join(self.out_dir, "best.ckpt"))

    def save(self, path:str) -> None:
        extra = {"step": self.state.step, "train_config": self.cfg.to_dict(), "train_state": self.state.to_dict()}
        save_checkpoint(path, self.model, self.optimizer.state, extra)

    @classmethod
    def from_checkpoint(cls, path:str, train_data:Dataset, eval_data:Dataset|None=None, out_dir:str|None=None, cfg:TrainConfig|None=None) -> 'Trainer':
        '''
        Resume training from a checkpoint written by Trainer.save.

        Args:
            path (str): checkpoint
            train_data (Dataset): training samples (the same as the original run)
            eval_data (Dataset or None): evaluation samples
            out_dir (str or None): run directory
            cfg (TrainConfig or None): recipe; the stored one when None

        Returns:
            Trainer: trainer positioned at the stored step
        '''
        ckpt = load_checkpoint(path)
        if cfg is None:
            cfg = TrainConfig.from_dict(ckpt.trailer["train_config"])
        state = TrainState.from_dict(ckpt.trailer.get("train_state", {}), ckpt.optimizer_state)
        return cls(ckpt.model, cfg, train_data, eval_data, out_dir, state)

    async def fit_async(self) -> 'list[dict]':
        '''
        Train up to the configured number of steps.

        A producer task prepares micro-batches on a queue bounded by
        cfg.prefetch while the consumer runs optimizer steps.

        Returns:
            list[dict]: metric records of this session
        '''
        accum = self.cfg.grad_accum
        remaining = (self.total_steps - self.state.step) * accum
        queue = asyncio.Queue(maxsize=self.cfg.prefetch)
        stream = self.micro_batches()

        async def produce():
            try:
                for _ in range(remaining):
                    await queue.put(await asyncio.to_thread(next, stream))
            except Exception as e:
                await queue.put(e)

        producer = asyncio.create_task(produce())
        try:
            with tqdm(total=self.total_steps, initial=self.state.step, desc="train", disable=None) as bar:
                while self.state.step < self.total_steps:
                    micro = []
                    for _ in range(accum):
                        item = await queue.get()
                        if isinstance(item, Exception):
                            raise item
                        micro.append(item)
                    await asyncio.to_thread(self.train_step, micro)
                    bar.update(1)
                    if self.eval_every and self.eval_data is not None and self.state.step % self.eval_every == 0:
                        self._track_best()
        finally:
            if not producer.done():
                producer.cancel()
        if self.out_dir is not None:
            self.save(os.path.join(self.out_dir, "last.ckpt"))
        return self.metrics

    def fit(self) -> 'list[dict]':
        return asyncio.run(self.fit_async())
