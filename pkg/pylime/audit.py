# -*- coding: utf-8 -*-
'''
Audit submodule: analytic parameter and FLOPs accounting.

Counts follow tensor shapes only. One multiply-accumulate is 2 FLOPs.
Elementwise work is counted linearly in the number of elements with the
constants below; training costs 3 times the forward pass.
'''

import csv
import logging
from dataclasses import dataclass, field, asdict
from .config import LimeConfig

__all__ = ["CostReport", "count_params", "count_flops", "cost_report", "router_param_count", "iso_flop_table"]

# FLOPs per element
SOFTMAX_FLOPS = 3
RMSNORM_FLOPS = 4
SILU_FLOPS = 4
ROPE_FLOPS = 3
RESIDUAL_FLOPS = 1
TRAINING_MULTIPLIER = 3


@dataclass
class CostReport:
    '''
    Parameter and FLOPs breakdown of one configuration.

    Attributes:
        params (dict[str, int]): embeddings, attention, mlp, norms, head, routers
        total_params (int): sum of params
        flops (dict[str, int]): projections, attention, mlp, head, routing, elementwise
        forward_flops (int): sum of flops
        training_flops (int): 3 x forward_flops
        batch (int): batch size the FLOPs refer to
        seq_len (int): sequence length the FLOPs refer to
        per_layer (list[dict]): per-layer params and FLOPs, router share included
    '''
    params: dict = field(default_factory=dict)
    total_params: int = 0
    flops: dict = field(default_factory=dict)
    forward_flops: int = 0
    training_flops: int = 0
    batch: int = 0
    seq_len: int = 0
    per_layer: list = field(default_factory=list)

    @property
    def router_param_fraction(self) -> float:
        '''
        Router parameters relative to all other parameters.
        '''
        base = self.total_params - self.params.get("routers", 0)
        return self.params.get("routers", 0) / base if base else 0.0

    @property
    def router_flop_fraction(self) -> float:
        '''
        Routing FLOPs relative to the forward FLOPs of the same model without routing.
        '''
        base = self.forward_flops - self.flops.get("routing", 0)
        return self.flops.get("routing", 0) / base if base else 0.0

    def to_dict(self) -> dict:
        values = asdict(self)
        values["router_param_fraction"] = self.router_param_fraction
        values["router_flop_fraction"] = self.router_flop_fraction
        return values


def router_param_count(cfg:LimeConfig, layer:int) -> int:
    '''
    Trainable router entries of one layer (dense storage, masks included).
    '''
    if layer < 2 or not cfg.has_router:
        return 0
    return cfg.num_kv_heads * layer * cfg.num_kv_heads


def _layer_params(cfg:LimeConfig) -> 'dict[str, int]':
    d, hd = cfg.hidden_size, cfg.head_dim
    attention = d * cfg.num_heads * hd * 2 + d * cfg.num_kv_heads * hd * 2
    return {"attention": attention, "mlp": 3 * d * cfg.intermediate_size, "norms": 2 * d}


def count_params(cfg:LimeConfig) -> CostReport:
    '''
    Exact parameter counts.

    Args:
        cfg (LimeConfig): architecture

    Returns:
        CostReport: report with params, total_params and per-layer params
    '''
    layer = _layer_params(cfg)
    per_layer = []
    for l in range(1, cfg.num_layers + 1):
        routers = router_param_count(cfg, l)
        per_layer.append({"layer": l, "params": sum(layer.values()) + routers, "router_params": routers})
    params = {
        "embeddings": cfg.vocab_size * cfg.hidden_size,
        "attention": layer["attention"] * cfg.num_layers,
        "mlp": layer["mlp"] * cfg.num_layers,
        "norms": layer["norms"] * cfg.num_layers + cfg.hidden_size,
        "head": 0 if cfg.tie_embeddings else cfg.hidden_size * cfg.vocab_size,
        "routers": sum(row["router_params"] for row in per_layer),
    }
    return CostReport(params=params, total_params=sum(params.values()), per_layer=per_layer)


def _routing_flops(cfg:LimeConfig, layer:int, batch:int, t:int) -> int:
    if layer < 2 or cfg.routing_variant == "baseline":
        return 0
    h = cfg.num_kv_heads
    # keys and values, each 2 * b * t * d_h * H_kv * (layer * H_kv)
    return 2 * (2 * batch * t * cfg.head_dim * h * layer * h)


def count_flops(cfg:LimeConfig, batch:int, t:int) -> CostReport:
    '''
    Forward FLOPs of a batch of sequences.

    Projections 2*b*t*d*d' each, attention scores and weighted sums 2*b*H*t^2*d_h
    each, MLP and output head matrix products, routing 2*b*t*d_h*H_kv*(l*H_kv)
    for keys and again for values from layer 2 on, plus elementwise work
    (softmax, norms, activation, rotary, residual adds).

    Args:
        cfg (LimeConfig): architecture
        batch (int): sequences
        t (int): sequence length

    Returns:
        CostReport: report with flops, forward_flops, training_flops and per-layer FLOPs

    Raises:
        ValueError: if batch or t is below 1.
    '''
    if batch < 1 or t < 1:
        raise ValueError("Batch and sequence length must be at least 1.")
    d, hd, inner = cfg.hidden_size, cfg.head_dim, cfg.intermediate_size
    h, h_kv = cfg.num_heads, cfg.num_kv_heads
    tokens = batch * t
    projections = 2 * tokens * d * (h * hd) * 2 + 2 * tokens * d * (h_kv * hd) * 2
    attention = 2 * (2 * batch * h * t * t * hd)
    mlp = 3 * (2 * tokens * d * inner)
    elementwise = (SOFTMAX_FLOPS * batch * h * t * t
                   + 2 * RMSNORM_FLOPS * tokens * d
                   + SILU_FLOPS * tokens * inner + tokens * inner
                   + ROPE_FLOPS * tokens * (h + h_kv) * hd
                   + 2 * RESIDUAL_FLOPS * tokens * d)
    per_layer = []
    for l in range(1, cfg.num_layers + 1):
        routing = _routing_flops(cfg, l, batch, t)
        per_layer.append({"layer": l, "flops": projections + attention + mlp + elementwise + routing, "router_flops": routing})
    flops = {
        "projections": projections * cfg.num_layers,
        "attention": attention * cfg.num_layers,
        "mlp": mlp * cfg.num_layers,
        "head": 2 * tokens * d * cfg.vocab_size,
        "routing": sum(row["router_flops"] for row in per_layer),
        "elementwise": elementwise * cfg.num_layers + RMSNORM_FLOPS * tokens * d,
    }
    forward = sum(flops.values())
    return CostReport(flops=flops, forward_flops=forward, training_flops=TRAINING_MULTIPLIER * forward,
                      batch=batch, seq_len=t, per_layer=per_layer)


def cost_report(cfg:LimeConfig, batch:int, t:int) -> CostReport:
    '''
    Parameters and FLOPs together, with merged per-layer rows.
    '''
    params = count_params(cfg)
    flops = count_flops(cfg, batch, t)
    per_layer = [dict(p, **f) for p, f in zip(params.per_layer, flops.per_layer)]
    return CostReport(params=params.params, total_params=params.total_params, flops=flops.flops,
                      forward_flops=flops.forward_flops, training_flops=flops.training_flops,
                      batch=batch, seq_len=t, per_layer=per_layer)


def iso_flop_table(configs:'dict[str, LimeConfig]', logs:'dict[str, list[dict]]', batch:int, t:int, path:str|None=None) -> 'list[dict]':
    '''
    Join per-step losses of several runs with their cumulative training FLOPs.

    Row 0 is the start of training (0 FLOPs, no loss); row k follows step k.

    Args:
        configs (dict[str, LimeConfig]): architecture of each run
        logs (dict[str, list[dict]]): metric records ({"step", "loss"}) of each run
        batch (int): sequences per step
        t (int): sequence length
        path (str or None): CSV destination

    Returns:
        list[dict]: rows {step, <run>_flops, <run>_loss, ...}

    Raises:
        ValueError: if runs and logs differ or logs have different lengths.
    '''
    if set(configs) != set(logs):
        raise ValueError("Every run needs both a configuration and a loss log.")
    lengths = {name: len(log) for name, log in logs.items()}
    if len(set(lengths.values())) > 1:
        raise ValueError("Loss logs have different lengths: {}.".format(lengths))
    names = sorted(configs)
    steps = next(iter(lengths.values()), 0)
    per_step = {name: count_flops(configs[name], batch, t).training_flops for name in names}
    rows = [dict(step=0, **{"{}_flops".format(n): 0 for n in names}, **{"{}_loss".format(n): "" for n in names})]
    for k in range(steps):
        row = {"step": k + 1}
        for name in names:
            row["{}_flops".format(name)] = per_step[name] * (k + 1)
            row["{}_loss".format(name)] = logs[name][k]["loss"]
        rows.append(row)
    if path is not None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        logging.info("Wrote iso-FLOP table with %d rows to %s", len(rows), path)
    return rows
