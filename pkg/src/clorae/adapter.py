"""Two-level low-rank adapter around a frozen linear map.

A wrapped layer keeps its pretrained weight frozen and adds a universal
low-rank expert (rank r, trained on every task), a set of per-task experts
(rank r/N each, trained only on their own task's batches), and a two-way
token router that mixes the two expert outputs. The mixed delta is added
back as a scaled residual, so with zero-initialized up-projections the
layer is exactly the frozen base map.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor, dropout, linear, softmax
from .nn import Module, ModuleList, Parameter

Array = np.ndarray

# Structural variants of the wrapped layer. "vanilla" is a plain single-expert
# low-rank adapter; "only_universal" is its alias reached through ablation
# flags, kept distinct so reports name what was configured.
VARIANTS = ("full", "vanilla", "only_universal", "only_task", "no_gate")


class AdapterConfigError(ValueError):
    """Invalid adapter construction arguments."""


@dataclass
class ForwardContext:
    """Per-forward switches and sinks threaded through wrapped layers."""
    training: bool = False
    rng: Optional[np.random.Generator] = None
    trace: Optional[list] = None          # (layer_name, universal_out, task_out)
    stats: Optional["RoutingStats"] = None


class LoraFactors(Module):
    """One low-rank pair: down-projection A and zero-initialized up-projection B."""

    def __init__(self, d_in: int, d_out: int, rank: int, dropout_p: float = 0.0):
        super().__init__()
        if rank < 1:
            raise AdapterConfigError(f"rank must be >= 1, got {rank}")
        if rank > min(d_in, d_out):
            raise AdapterConfigError(
                f"rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}")
        if not 0.0 <= dropout_p < 1.0:
            raise AdapterConfigError(f"dropout_p must be in [0, 1), got {dropout_p}")
        self.rank = rank
        self.dropout_p = dropout_p
        self.A = Parameter((rank, d_in), init=("normal", 1.0 / np.sqrt(rank)))
        self.B = Parameter((d_out, rank), init=("zeros",))

    def delta(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        """B(A drop(x)); dropout hits only this branch and only in training."""
        if ctx.training and self.dropout_p > 0.0:
            x = dropout(x, self.dropout_p, ctx.rng)
        return linear(linear(x, self.A), self.B)


class CloraeLinear(Module):
    """Frozen linear map plus collaborating low-rank experts.

    Output per token: W0 x + (alpha/r) * h, where h mixes the universal and
    the active task expert through the router (or a fixed gate for the
    ablation variants).
    """

    def __init__(self, d_in: int, d_out: int, rank: int, n_tasks: int,
                 alpha: float | None = None, dropout_p: float = 0.0,
                 variant: str = "full",
                 fixed_gate: tuple[float, float] | None = None):
        super().__init__()
        if variant not in VARIANTS:
            raise AdapterConfigError(f"unknown variant {variant!r}")
        if rank < 1:
            raise AdapterConfigError(f"rank must be >= 1, got {rank}")
        if alpha is None:
            alpha = float(rank)
        if alpha <= 0:
            raise AdapterConfigError(f"alpha must be positive, got {alpha}")
        self.d_in = d_in
        self.d_out = d_out
        self.rank = rank
        self.n_tasks = n_tasks
        self.alpha = float(alpha)
        self.variant = variant
        self.weight = Parameter((d_out, d_in), frozen=True,
                                init=("normal", 1.0 / np.sqrt(d_in)))

        has_universal = variant != "only_task"
        has_tasks = variant not in ("vanilla", "only_universal")
        wants_router = variant in ("full", "only_task")
        if variant == "no_gate" and fixed_gate is None:
            fixed_gate = (1.0, 1.0)

        if has_universal:
            self.universal = LoraFactors(d_in, d_out, rank, dropout_p)
        else:
            self.universal = None
        if has_tasks:
            if n_tasks < 1:
                raise AdapterConfigError(f"n_tasks must be >= 1, got {n_tasks}")
            if rank % n_tasks != 0:
                raise AdapterConfigError(
                    f"rank {rank} is not divisible by n_tasks {n_tasks}")
            per_rank = rank // n_tasks
            self.task_experts = ModuleList(
                [LoraFactors(d_in, d_out, per_rank, dropout_p)
                 for _ in range(n_tasks)])
        else:
            self.task_experts = None
        self.fixed_gate = fixed_gate
        if wants_router and fixed_gate is None:
            # Zero init: every token starts at an even 0.5/0.5 mix.
            self.gate_weight = Parameter((2, d_in), init=("zeros",))
        else:
            self.gate_weight = None

    def gate(self, x: Tensor) -> Tensor:
        """Router weights per token: softmax over two logits, so the pair is
        positive and sums to one."""
        if self.gate_weight is None:
            raise AdapterConfigError(f"variant {self.variant!r} has no router")
        return softmax(linear(x, self.gate_weight), axis=-1)

    def __call__(self, x: Tensor, task_id: int, ctx: ForwardContext,
                 token_mask: Array | None = None,
                 layer_name: str = "") -> Tensor:
        if x.shape[-1] != self.d_in:
            raise AdapterConfigError(
                f"input feature size {x.shape[-1]} != layer d_in {self.d_in}")
        base = linear(x, self.weight)

        if self.variant in ("vanilla", "only_universal"):
            h = self.universal.delta(x, ctx)
            return base + (self.alpha / self.rank) * h

        if self.task_experts is not None and not 0 <= task_id < self.n_tasks:
            raise AdapterConfigError(
                f"task_id {task_id} out of range for {self.n_tasks} experts")

        task_out = self.task_experts[task_id].delta(x, ctx)
        if self.variant == "only_task":
            g = self.gate(x)
            g2 = g[..., 1:2]
            self._record(ctx, layer_name, task_id, g.data, token_mask)
            return base + (self.alpha / self.rank) * (g2 * task_out)

        uni_out = self.universal.delta(x, ctx)
        if self.fixed_gate is not None:
            g1, g2 = self.fixed_gate
            h = g1 * uni_out + g2 * task_out
        else:
            g = self.gate(x)
            self._record(ctx, layer_name, task_id, g.data, token_mask)
            h = g[..., 0:1] * uni_out + g[..., 1:2] * task_out
        if ctx.trace is not None:
            ctx.trace.append((layer_name, uni_out, task_out))
        return base + (self.alpha / self.rank) * h

    def _record(self, ctx: ForwardContext, layer_name: str, task_id: int,
                gate_values: Array, token_mask: Array | None) -> None:
        if ctx.stats is None:
            return
        g2 = gate_values[..., 1]
        if token_mask is not None:
            g2 = g2[token_mask]
        ctx.stats.record(layer_name, task_id, g2)


class RoutingStats:
    """Running per-(layer, task) mean of the task-expert gate mass."""

    def __init__(self):
        self.sums: dict[tuple[str, int], float] = {}
        self.counts: dict[tuple[str, int], int] = {}

    def record(self, layer: str, task_id: int, g2_values: Array) -> None:
        flat = np.asarray(g2_values).reshape(-1)
        if flat.size == 0:
            return
        key = (layer, task_id)
        self.sums[key] = self.sums.get(key, 0.0) + float(flat.sum())
        self.counts[key] = self.counts.get(key, 0) + flat.size

    @property
    def empty(self) -> bool:
        return not self.counts

    def mean(self, layer: str, task_id: int) -> float:
        key = (layer, task_id)
        return self.sums[key] / self.counts[key]

    def layers(self) -> list[str]:
        return sorted({layer for layer, _ in self.counts})

    def tasks(self) -> list[int]:
        return sorted({task for _, task in self.counts})


def routing_report(stats: RoutingStats,
                   layer_groups: dict[str, list[str]]) -> dict:
    """Token-weighted task-expert proportion per (task, layer group).

    The universal proportion is one minus the reported value, since each
    token's gate pair sums to one.
    """
    if stats.empty:
        raise ValueError("routing stats are empty; run at least one batch first")
    report: dict[str, dict] = {}
    for group, layers in layer_groups.items():
        per_task = {}
        for task in stats.tasks():
            total = 0.0
            count = 0
            for layer in layers:
                key = (layer, task)
                if key in stats.counts:
                    total += stats.sums[key]
                    count += stats.counts[key]
            if count:
                per_task[task] = {
                    "task_expert": total / count,
                    "universal": 1.0 - total / count,
                    "tokens": count,
                }
        report[group] = per_task
    return report


def layer_groups_by_depth(layer_names: list[str],
                          depths: list[int]) -> dict[str, list[str]]:
    """Split wrapped layers into bottom/middle/top groups by block depth."""
    if len(layer_names) != len(depths):
        raise ValueError("layer_names and depths must align")
    if not layer_names:
        return {"bottom": [], "middle": [], "top": []}
    uniq = sorted(set(depths))
    n = len(uniq)
    edge = max(1, n // 3)
    bottom = set(uniq[:edge])
    top = set(uniq[n - edge:]) if n > 1 else set()
    groups = {"bottom": [], "middle": [], "top": []}
    for name, depth in zip(layer_names, depths):
        if depth in bottom:
            groups["bottom"].append(name)
        elif depth in top:
            groups["top"].append(name)
        else:
            groups["middle"].append(name)
    return groups


def count_trainable(module: Module) -> dict[str, int]:
    """Closed-form-checkable trainable-parameter accounting by role."""
    counts = {"universal": 0, "task_experts": 0, "gate": 0,
              "mim_head": 0, "embedding": 0, "other": 0, "total": 0}
    for name, p in module.named_parameters():
        if p.frozen:
            continue
        n = p.data.size
        counts["total"] += n
        if ".universal." in name or name.startswith("universal."):
            counts["universal"] += n
        elif ".task_experts." in name or name.startswith("task_experts."):
            counts["task_experts"] += n
        elif name.endswith("gate_weight"):
            counts["gate"] += n
        elif name.startswith("mim_heads.") or ".mim_heads." in name:
            counts["mim_head"] += n
        elif "embedding" in name or "out_head" in name:
            counts["embedding"] += n
        else:
            counts["other"] += n
    return counts
