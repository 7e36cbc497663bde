"""Training, evaluation, ablation and routing orchestration."""
from __future__ import annotations

import dataclasses
import json
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .achievement import AchievementTracker, multitask_step_loss
from .adapter import (ForwardContext, RoutingStats, count_trainable,
                      layer_groups_by_depth, routing_report)
from .autodiff import no_grad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import Batch, Vocab, collate
from .mim import VidHead, mim_loss
from .model import Seq2SeqModel
from .nn import Module, ModuleDict, derive_rng
from .optim import Adam
from .scoring import Grammar, aggregate_f1
from .taskgen import GeneratorSpec, generate, load_datasets

CHECKPOINT_SCHEMA = "clorae-checkpoint-v1"


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class DataError(ValueError):
    """Dataset does not match the run configuration."""


def _head_key(layer_name: str) -> str:
    return layer_name.replace(".", "_")


class TrainState(Module):
    """Model plus per-wrapped-layer MIM heads, checkpointed as one unit."""

    def __init__(self, model: Seq2SeqModel, with_mim: bool):
        super().__init__()
        self.model = model
        if with_mim:
            heads = ModuleDict()
            for name, layer, _ in model.wrapped_layers():
                heads[_head_key(name)] = VidHead(layer.d_out)
            self.mim_heads = heads
        else:
            self.mim_heads = None

    def head_for(self, layer_name: str) -> VidHead:
        return self.mim_heads[_head_key(layer_name)]


@dataclass
class PreparedData:
    spec: GeneratorSpec
    data: dict            # dataset id -> split -> list of samples
    vocab: Vocab
    grammar: Grammar

    @property
    def dataset_ids(self) -> list[str]:
        return sorted(self.data)

    def task_of(self, dataset_id: str) -> int:
        return self.spec.datasets[dataset_id].family


def prepare_data(cfg: RunConfig) -> PreparedData:
    if cfg.data_dir:
        spec, data = load_datasets(cfg.data_dir)
        if spec.d_model != cfg.d_model:
            raise DataError(
                f"dataset visual dim {spec.d_model} != model d_model "
                f"{cfg.d_model}")
        if spec.visual_len != cfg.visual_len:
            raise DataError(
                f"dataset visual length {spec.visual_len} != configured "
                f"{cfg.visual_len}")
    else:
        spec = cfg.generator_spec()
        data = generate(spec)
    vocab = Vocab(spec.vocab_tokens())
    return PreparedData(spec=spec, data=data, vocab=vocab,
                        grammar=Grammar.from_spec(spec))


def build_state(cfg: RunConfig, prep: PreparedData) -> TrainState:
    model = Seq2SeqModel(cfg.model_config(len(prep.vocab)))
    state = TrainState(model, with_mim=cfg.mim_enabled)
    state.initialize(cfg.seed)
    return state


def state_for_counting(cfg: RunConfig) -> TrainState:
    """Uninitialized state with the right shapes, for parameter accounting."""
    vocab_size = len(cfg.generator_spec().vocab_tokens())
    model = Seq2SeqModel(cfg.model_config(vocab_size))
    return TrainState(model, with_mim=cfg.mim_enabled)


# -- batching ------------------------------------------------------------------


def epoch_batches(prep: PreparedData, cfg: RunConfig, epoch: int) -> list[Batch]:
    """Seeded shuffle into task-homogeneous per-dataset batches, interleaved."""
    rng = derive_rng(cfg.seed, "shuffle", epoch)
    chunks: list[list[dict]] = []
    for ds_id in prep.dataset_ids:
        samples = prep.data[ds_id]["train"]
        order = rng.permutation(len(samples))
        for i in range(0, len(samples), cfg.batch_size):
            chunks.append([samples[j] for j in order[i:i + cfg.batch_size]])
    order = rng.permutation(len(chunks))
    return [collate(chunks[i], prep.vocab, cfg.max_text_len,
                    cfg.max_answer_len, cfg.visual_len) for i in order]


def eval_batches(prep: PreparedData, ds_id: str, split: str,
                 cfg: RunConfig) -> list[Batch]:
    samples = prep.data[ds_id][split]
    return [collate(samples[i:i + cfg.eval_batch_size], prep.vocab,
                    cfg.max_text_len, cfg.max_answer_len, cfg.visual_len)
            for i in range(0, len(samples), cfg.eval_batch_size)]


# -- evaluation ------------------------------------------------------------------


def score_split(model: Seq2SeqModel, prep: PreparedData, split: str,
                cfg: RunConfig) -> dict[str, dict]:
    """Greedy-decode a split and micro-score each dataset's records."""
    out: dict[str, dict] = {}
    for ds_id in prep.dataset_ids:
        pairs = []
        for batch, samples in zip(eval_batches(prep, ds_id, split, cfg),
                                  _chunked(prep.data[ds_id][split],
                                           cfg.eval_batch_size)):
            decoded = model.decode_greedy(batch, prep.vocab)
            for toks, sample in zip(decoded, samples):
                pred, _ = prep.grammar.parse(toks)
                gold, _ = prep.grammar.parse(list(sample["answer"]))
                pairs.append((pred, gold))
        out[ds_id] = aggregate_f1(pairs)
    return out


def _chunked(items: list, size: int):
    return [items[i:i + size] for i in range(0, len(items), size)]


def collect_routing(model: Seq2SeqModel, prep: PreparedData, split: str,
                    cfg: RunConfig, max_batches: int | None = None) -> RoutingStats:
    """Teacher-forced pass over a split with router-stat collection.

    `max_batches` caps the per-dataset batch count (the per-epoch metrics use
    a one-batch estimate; the routing command scans the whole split).
    """
    stats = RoutingStats()
    ctx = ForwardContext(training=False, stats=stats)
    with no_grad():
        for ds_id in prep.dataset_ids:
            batches = eval_batches(prep, ds_id, split, cfg)
            if max_batches is not None:
                batches = batches[:max_batches]
            for batch in batches:
                model.forward_logits(batch, ctx)
    return stats


def routing_groups(model: Seq2SeqModel) -> dict[str, list[str]]:
    layers = model.wrapped_layers()
    return layer_groups_by_depth([name for name, _, _ in layers],
                                 [depth for _, _, depth in layers])


def routing_summary(model: Seq2SeqModel, stats: RoutingStats) -> dict:
    if stats.empty:
        return {}
    report = routing_report(stats, routing_groups(model))
    return {group: {str(task): vals["task_expert"]
                    for task, vals in per_task.items()}
            for group, per_task in report.items()}


# -- training ------------------------------------------------------------------


@dataclass
class RunResult:
    cfg: RunConfig
    metrics: list[dict]
    test_report: dict
    checkpoint_path: Path | None
    state: TrainState
    prep: PreparedData


def _check_finite(loss_value: float, state: TrainState, epoch: int,
                  ds_id: str) -> None:
    if np.isfinite(loss_value):
        return
    for name, p in state.named_parameters():
        if not np.all(np.isfinite(p.data)):
            raise NumericError(
                f"non-finite loss {loss_value} at epoch {epoch} on {ds_id}; "
                f"first non-finite parameter: {name}")
    raise NumericError(
        f"non-finite loss {loss_value} at epoch {epoch} on {ds_id}; "
        f"parameters are finite (activation overflow)")


def checkpoint_manifest(cfg: RunConfig, prep: PreparedData,
                        state: TrainState) -> dict:
    model = state.model
    return {
        "schema": CHECKPOINT_SCHEMA,
        "d_model": cfg.d_model,
        "rank": cfg.rank,
        "n_experts": cfg.n_experts,
        "alpha": model.cfg.alpha if model.cfg.alpha is not None else float(cfg.rank),
        "wrapped_layers": [name for name, _, _ in model.wrapped_layers()],
        "seed": cfg.seed,
        "variant": cfg.adapter_variant,
        "mim_enabled": cfg.mim_enabled,
        "run_config": dataclasses.asdict(cfg),
        "generator": prep.spec.to_json(),
        "vocab": prep.vocab.tokens,
    }


def run_training(cfg: RunConfig, prep: PreparedData | None = None,
                 write_outputs: bool = True) -> RunResult:
    cfg.validate()
    if prep is None:
        prep = prepare_data(cfg)
    state = build_state(cfg, prep)
    model = state.model
    out_dir = cfg.resolved_out_dir()
    if write_outputs:
        out_dir.mkdir(parents=True, exist_ok=True)

    trainable = [p for _, p in state.trainable_parameters()]
    opt = Adam(trainable, lr=cfg.lr, decay_factor=cfg.decay_factor,
               decay_every=cfg.decay_every)
    dropout_rng = derive_rng(cfg.seed, "dropout")
    dataset_ids = prep.dataset_ids
    tracker = AchievementTracker(dataset_ids, targets=cfg.target,
                                 margin=cfg.margin, gamma=cfg.gamma)
    weights = tracker.uniform_weights()
    beta = cfg.beta if cfg.mim_enabled else 0.0
    pad_id = prep.vocab.pad_id

    metrics: list[dict] = []
    metrics_file = open(out_dir / "metrics.jsonl", "w") if write_outputs else None
    timings_file = open(out_dir / "timings.jsonl", "w") if write_outputs else None
    checkpoint_path = out_dir / "checkpoint.bin" if write_outputs else None
    manifest = checkpoint_manifest(cfg, prep, state)
    heads = ({name: state.head_for(name)
              for name, _, _ in model.wrapped_layers()}
             if cfg.mim_enabled else {})
    routed = bool(model.wrapped_layers()) and model.cfg.variant in ("full",
                                                                    "only_task")

    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            opt.set_epoch(epoch)
            ce_sums = {d: 0.0 for d in dataset_ids}
            ce_counts = {d: 0 for d in dataset_ids}
            mim_sum, mim_steps = 0.0, 0
            for batch in epoch_batches(prep, cfg, epoch):
                ctx = ForwardContext(
                    training=True, rng=dropout_rng,
                    trace=[] if cfg.mim_enabled else None)
                ce = model.forward_loss(batch, ctx, pad_id)
                mim = mim_loss(ctx.trace, heads) if cfg.mim_enabled else 0.0
                loss = multitask_step_loss({batch.dataset_id: ce}, weights,
                                           mim, beta)
                loss_value = loss.item()
                _check_finite(loss_value, state, epoch, batch.dataset_id)
                loss.backward()
                opt.step()
                opt.zero_grad()
                ce_sums[batch.dataset_id] += ce.item() * batch.size
                ce_counts[batch.dataset_id] += batch.size
                if cfg.mim_enabled:
                    mim_sum += mim.item()
                    mim_steps += 1

            dev_scores = score_split(model, prep, "dev", cfg)
            stats = (collect_routing(model, prep, "dev", cfg, max_batches=1)
                     if routed else RoutingStats())
            record = {
                "epoch": epoch,
                "datasets": {
                    d: {"train_ce": ce_sums[d] / max(ce_counts[d], 1),
                        "dev_f1": dev_scores[d]["f1"],
                        "weight": weights[d]}
                    for d in dataset_ids},
                "mim_loss": mim_sum / mim_steps if mim_steps else 0.0,
                "routing": routing_summary(model, stats),
            }
            metrics.append(record)
            if metrics_file:
                metrics_file.write(json.dumps(record, sort_keys=True) + "\n")
                metrics_file.flush()
            if timings_file:
                timings_file.write(json.dumps(
                    {"epoch": epoch, "seconds": time.perf_counter() - t0}) + "\n")
                timings_file.flush()
            if checkpoint_path:
                save_checkpoint(checkpoint_path, state.state_dict(), manifest)

            if cfg.aml_enabled:
                weights = tracker.update_epoch(
                    {d: dev_scores[d]["f1"] for d in dataset_ids})
            else:
                weights = tracker.uniform_weights()
    finally:
        if metrics_file:
            metrics_file.close()
        if timings_file:
            timings_file.close()

    test_report = build_report(score_split(model, prep, "test", cfg))
    if write_outputs:
        save_checkpoint(out_dir / "checkpoint_final.bin", state.state_dict(),
                        manifest)
        with open(out_dir / "test_report.json", "w") as f:
            json.dump(test_report, f, indent=2, sort_keys=True)
            f.write("\n")
        with open(out_dir / "config.json", "w") as f:
            json.dump(dataclasses.asdict(cfg), f, indent=2, sort_keys=True)
            f.write("\n")
    final_path = out_dir / "checkpoint_final.bin" if write_outputs else None
    return RunResult(cfg=cfg, metrics=metrics, test_report=test_report,
                     checkpoint_path=final_path, state=state, prep=prep)


def build_report(per_dataset: dict[str, dict]) -> dict:
    f1s = [v["f1"] for v in per_dataset.values()]
    return {
        "datasets": {d: {k: per_dataset[d][k]
                         for k in ("precision", "recall", "f1")}
                     for d in sorted(per_dataset)},
        "macro_f1": sum(f1s) / len(f1s) if f1s else 0.0,
        "all_f1": sum(f1s),
    }


# -- checkpoint-driven entry points ---------------------------------------------


def load_state(checkpoint: str | Path) -> tuple[RunConfig, TrainState, dict]:
    manifest, tensors = load_checkpoint(checkpoint)
    if manifest.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(
            f"unsupported checkpoint schema {manifest.get('schema')!r}")
    cfg = RunConfig(**manifest["run_config"])
    spec = GeneratorSpec.from_json(manifest["generator"])
    vocab = Vocab(manifest["vocab"])
    if vocab.tokens != spec.vocab_tokens():
        raise CheckpointError("checkpoint vocabulary disagrees with its "
                              "generator spec")
    model = Seq2SeqModel(cfg.model_config(len(vocab)))
    state = TrainState(model, with_mim=cfg.mim_enabled)
    try:
        state.load_state(tensors)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint incompatible with its manifest: {e}")
    return cfg, state, manifest


def run_evaluation(checkpoint: str | Path, split: str = "test",
                   data_dir: str = "") -> dict:
    cfg, state, manifest = load_state(checkpoint)
    if data_dir:
        cfg = dataclasses.replace(cfg, data_dir=data_dir)
    prep = prepare_data(cfg)
    if prep.vocab.tokens != manifest["vocab"]:
        raise CheckpointError("dataset vocabulary does not match checkpoint")
    return build_report(score_split(state.model, prep, split, cfg))


def run_routing(checkpoint: str | Path, split: str = "test",
                data_dir: str = "") -> dict:
    cfg, state, manifest = load_state(checkpoint)
    if data_dir:
        cfg = dataclasses.replace(cfg, data_dir=data_dir)
    prep = prepare_data(cfg)
    stats = collect_routing(state.model, prep, split, cfg)
    return routing_report(stats, routing_groups(state.model))


# -- ablation ------------------------------------------------------------------


def run_ablation(cfg: RunConfig, variants: list[str], seeds: list[int],
                 prep: PreparedData | None = None,
                 write_outputs: bool = True) -> dict:
    """Each variant on identical data and the same seed set; medians reported."""
    if prep is None:
        prep = prepare_data(cfg)
    base_out = cfg.resolved_out_dir()
    report: dict = {"variants": {}, "seeds": seeds}
    for variant in variants:
        vcfg = cfg.apply_variant(variant)
        per_seed = []
        for seed in seeds:
            rcfg = dataclasses.replace(
                vcfg, seed=seed,
                out_dir=str(Path(cfg.out_dir) / "ablate" / variant / f"seed{seed}"))
            result = run_training(rcfg, prep=prep, write_outputs=write_outputs)
            per_seed.append(result.test_report)
        counts = count_trainable(build_state(vcfg, prep))
        dataset_medians = {
            d: statistics.median(r["datasets"][d]["f1"] for r in per_seed)
            for d in prep.dataset_ids}
        report["variants"][variant] = {
            "per_seed": per_seed,
            "median": {
                "datasets": dataset_medians,
                "macro_f1": statistics.median(r["macro_f1"] for r in per_seed),
                "all_f1": statistics.median(r["all_f1"] for r in per_seed),
            },
            "trainable_parameters": counts,
        }
    if write_outputs:
        base_out.mkdir(parents=True, exist_ok=True)
        with open(base_out / "ablation_report.json", "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
    return report
