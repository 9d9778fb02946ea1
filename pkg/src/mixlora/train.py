"""Training loops and evaluation drivers shared by the CLI and tests."""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .errors import ConfigError
from .model import ToyModel, build_model, model_loss
from .moe import expert_load_std
from .numerics import Tape, backward
from .tasks import SyntheticTask, TaskData, default_tasks, evaluate, mixed_batch, sample_batch


def task_suite(config: RunConfig) -> tuple[list[SyntheticTask], list[TaskData]]:
    registry = default_tasks()
    tasks = [registry[name] for name in config.tasks]
    datas = [t.generate(config.seed) for t in tasks]
    return tasks, datas


def train(config: RunConfig, multitask: bool = False,
          log_cb=None, kind: str = "mixlora", rank: int | None = None
          ) -> tuple[ToyModel, list[dict]]:
    """Train one adapter set; multitask mixes every configured task per batch.

    Returns the model and one metrics record per step:
    {step, task_loss, aux_loss, total_loss, expert_load: [[F per expert] per layer]}.
    """
    config.validate()
    tasks, datas = task_suite(config)
    if not multitask and len(tasks) != 1:
        raise ConfigError(
            "single-task training needs exactly one task; pass multitask=True "
            f"for the {len(tasks)}-task suite"
        )
    model = build_model(config.model(), seed=config.seed, kind=kind, rank=rank,
                        dtype=config.dtype, lr=config.lr, aux_coef=config.aux_coef)
    batch_rng = np.random.default_rng([config.seed, 6])
    metrics: list[dict] = []
    opt = model.adapters.optimizer
    for step in range(config.steps):
        records = []
        for _ in range(config.grad_accum):
            if multitask:
                batch = mixed_batch(tasks, [d.train for d in datas], batch_rng,
                                    config.batch_size)
            else:
                batch = sample_batch(tasks[0], datas[0].train, batch_rng,
                                     config.batch_size)
            tape = Tape()
            with tape:
                out = model_loss(model, batch, config.mode, training=True)
            backward(tape, out.total)
            records.append(out)
        if config.grad_accum > 1:
            inv = 1.0 / config.grad_accum
            for p in opt.params:
                if p.grad is not None:
                    p.grad *= inv
        opt.step()
        opt.zero_grad()
        last = records[-1]
        entry = {
            "step": step,
            "task_loss": float(np.mean([r.task.item() for r in records])),
            "aux_loss": float(np.mean([r.aux.item() for r in records])),
            "total_loss": float(np.mean([r.total.item() for r in records])),
            "expert_load": [st.dispatch_fractions().tolist() for st in last.stats],
        }
        metrics.append(entry)
        if log_cb is not None:
            log_cb(entry)
    return model, metrics


def evaluate_tasks(model: ToyModel, config: RunConfig,
                   task_names: list[str] | None = None) -> dict[str, dict]:
    """Held-out accuracy and routing report per task."""
    registry = default_tasks()
    names = list(task_names or config.tasks)
    out = {}
    for name in names:
        task = registry[name]
        data = task.generate(config.seed)
        acc, stats = evaluate(model, task, data.test, config.mode)
        entry = {"accuracy": acc}
        if stats:
            entry["expert_load_std"] = [expert_load_std(st) for st in stats]
            entry["dispatch_fractions"] = [st.dispatch_fractions().tolist()
                                           for st in stats]
            entry["mean_probs"] = [st.mean_probs().tolist() for st in stats]
        out[name] = entry
    return out
