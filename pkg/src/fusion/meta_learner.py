"""Bilevel meta-optimization.

Each meta-step adapts the fast parameters psi = {W, rho} on a task's support
set (the inner loop), then scores the adapted model on the query set and
updates the slow parameters phi = {theta, W, rho} through Adam (the outer
loop).  The single-update variant pools the support set into one meta-example
and takes exactly one inner step; the trajectory variant takes one step per
support element.  Inner steps stay on the autograd tape when
gradient_order="second", so the outer gradient differentiates through them;
"first" detaches the inner gradient, which reduces the outer update to the
first-order approximation while sharing all the same code paths.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np
import torch
import torch.nn.functional as F

from .data_io import Dataset, LabeledExample
from .errors import ConfigError, TaskError, ValidationError
from .network import (
    ArchConfig,
    ParameterBundle,
    attention_pool,
    cln_forward,
    fen_forward,
    init_params,
    mean_pool,
    reinit_cln,
    reset_context,
)
from .replay import ReservoirBuffer
from .task_builder import (
    ClusterAssignment,
    Task,
    compute_balancing_vector,
    make_balanced_task,
    make_unbalanced_task,
)

VARIANTS = ("MEML", "MEML-mean", "OML", "OML-single")

_MAX_SEED = 2**63 - 1


@dataclass(frozen=True)
class TrainingConfig:
    variant: str = "MEML"
    inner_lr: float = 0.01
    outer_lr: float = 1e-4
    steps: int = 40000
    meta_batch: int = 1
    gradient_order: str = "second"
    loss_balancing: bool = False
    rehearsal_train: str = "off"
    seed: int = 0
    q_random: int = 10
    reinit_w: bool = True
    oracle_support: int = 10
    oracle_query_same: int = 5
    oracle_query_random: int = 10

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.gradient_order not in ("second", "first"):
            raise ConfigError(f"gradient_order must be 'second' or 'first', got {self.gradient_order!r}")
        # zero is allowed so that no-op learning rates stay testable end to end
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.meta_batch != 1:
            raise ConfigError("only meta_batch=1 is supported")
        if self.q_random < 0:
            raise ConfigError("q_random must be >= 0")
        self.rehearsal_capacity  # validates the rehearsal_train string

    @property
    def rehearsal_capacity(self) -> int:
        """Coreset capacity, or 0 when meta-train rehearsal is off."""
        spec = self.rehearsal_train
        if spec == "off":
            return 0
        if spec == "coreset":
            return 500
        if spec.startswith("coreset:"):
            try:
                cap = int(spec.split(":", 1)[1])
            except ValueError:
                raise ConfigError(f"bad rehearsal_train value {spec!r}") from None
            if cap < 1:
                raise ConfigError("coreset capacity must be >= 1")
            return cap
        raise ConfigError(f"rehearsal_train must be 'off' or 'coreset[:N]', got {spec!r}")


@dataclass
class TrainLog:
    outer_loss: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    cluster_ids: list = field(default_factory=list)
    inner_steps: list = field(default_factory=list)

    def append(self, loss: float, ms: float, cluster_id: int, n_inner: int) -> None:
        self.outer_loss.append(float(loss))
        self.wall_ms.append(float(ms))
        self.cluster_ids.append(int(cluster_id))
        self.inner_steps.append(int(n_inner))

    def __len__(self) -> int:
        return len(self.outer_loss)

    @property
    def mean_step_ms(self) -> float:
        return float(np.mean(self.wall_ms)) if self.wall_ms else 0.0

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("step,cluster_id,outer_loss,wall_ms\n")
            for i, (c, l, ms) in enumerate(
                zip(self.cluster_ids, self.outer_loss, self.wall_ms)
            ):
                f.write(f"{i},{c},{repr(l)},{repr(ms)}\n")


class AdamState:
    """Per-parameter Adam moments with bias correction.

    Step counts are tracked per parameter name so the classifier head's
    state can be dropped whenever the head is re-initialized while the
    trunk's momentum keeps accumulating.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def update(self, name: str, param: torch.Tensor, grad: torch.Tensor, lr: float) -> torch.Tensor:
        t = self.t.get(name, 0) + 1
        m = self.m.get(name)
        v = self.v.get(name)
        if m is None:
            m = torch.zeros_like(param)
            v = torch.zeros_like(param)
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        self.m[name], self.v[name], self.t[name] = m.detach(), v.detach(), t
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        return param - lr * m_hat / (v_hat.sqrt() + self.eps)

    def reset(self, names) -> None:
        for n in names:
            self.m.pop(n, None)
            self.v.pop(n, None)
            self.t.pop(n, None)


def _single_example_loss(params: ParameterBundle, x: torch.Tensor, y: int) -> torch.Tensor:
    logits = cln_forward(params, fen_forward(params, x.unsqueeze(0)))
    return F.cross_entropy(logits, torch.tensor([y]))


def _psi_step(
    params: ParameterBundle, loss: torch.Tensor, inner_lr: float, order: str, info: dict
) -> ParameterBundle:
    """One gradient-descent step on the fast parameters.

    order="second" keeps the step differentiable; "first" treats the
    gradient as a constant, leaving only an identity dependence on the
    original parameters.
    """
    names = params.group_names("psi")
    tensors = [params[n] for n in names]
    create = order == "second"
    grads = torch.autograd.grad(loss, tensors, create_graph=create, allow_unused=True)
    updates = {}
    for n, t, g in zip(names, tensors, grads):
        if g is None:
            g = torch.zeros_like(t)
        elif not create:
            g = g.detach()
        updates[n] = t - inner_lr * g
    return params.replace(updates, info=info)


def inner_update_meml(
    params: ParameterBundle,
    task: Task,
    inner_lr: float,
    order: str = "second",
    pooling: str = "attention",
) -> ParameterBundle:
    """Single inner step on the pooled meta-example.

    The support set is embedded, pooled into one vector, and exactly one
    cross-entropy gradient step is taken against the task's pseudo-label.
    """
    if pooling not in ("attention", "mean"):
        raise ConfigError(f"pooling must be 'attention' or 'mean', got {pooling!r}")
    features = fen_forward(params, task.support_x)
    pooled = attention_pool(params, features) if pooling == "attention" else mean_pool(features)
    logits = cln_forward(params, pooled.me)
    loss = F.cross_entropy(logits.unsqueeze(0), torch.tensor([task.cluster_id]))
    return _psi_step(params, loss, inner_lr, order, info={"inner_steps": 1})


def inner_update_oml(
    params: ParameterBundle, task: Task, inner_lr: float, order: str = "second"
) -> ParameterBundle:
    """Trajectory inner loop: one step per support element, in order."""
    current = params
    for ex in task.support:
        loss = _single_example_loss(current, ex.x, ex.y)
        current = _psi_step(
            current, loss, inner_lr, order, info={"inner_steps": len(task.support)}
        )
    return current


def inner_update_single(
    params: ParameterBundle,
    task: Task,
    inner_lr: float,
    order: str = "second",
    seed: int = 0,
) -> ParameterBundle:
    """One step on one uniformly chosen support element."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    idx = int(rng.integers(len(task.support)))
    ex = task.support[idx]
    loss = _single_example_loss(params, ex.x, ex.y)
    return _psi_step(
        params, loss, inner_lr, order, info={"inner_steps": 1, "chosen_index": idx}
    )


def run_inner(
    params: ParameterBundle,
    task: Task,
    variant: str,
    inner_lr: float,
    order: str = "second",
    seed: int = 0,
) -> ParameterBundle:
    if variant == "MEML":
        return inner_update_meml(params, task, inner_lr, order)
    if variant == "MEML-mean":
        return inner_update_meml(params, task, inner_lr, order, pooling="mean")
    if variant == "OML":
        return inner_update_oml(params, task, inner_lr, order)
    if variant == "OML-single":
        return inner_update_single(params, task, inner_lr, order, seed=seed)
    raise ConfigError(f"unknown variant {variant!r}")


def apply_loss_balancing(loss, gamma_norm, cluster_id: int):
    """Scale a task's outer loss by its cluster's balancing weight."""
    return loss * gamma_norm[cluster_id]


def _query_tensors(query) -> tuple:
    x = torch.stack([ex.x for ex in query])
    y = torch.tensor([ex.y for ex in query], dtype=torch.int64)
    return x, y


def composed_query_grads(
    params: ParameterBundle,
    inner_result: ParameterBundle,
    query,
    loss_scale: float = 1.0,
) -> tuple:
    """Query loss of the adapted model and its gradients w.r.t. phi.

    Returns (loss, names, grads); grads line up with params.group_names("phi")
    and unused parameters get explicit zeros.
    """
    if not query:
        raise TaskError("query set is empty")
    x, y = _query_tensors(query)
    logits = cln_forward(inner_result, fen_forward(inner_result, x))
    loss = F.cross_entropy(logits, y) * loss_scale
    names = params.group_names("phi")
    leaves = [params[n] for n in names]
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    grads = [
        torch.zeros_like(p) if g is None else g for p, g in zip(leaves, grads)
    ]
    return loss, names, grads


def outer_update(
    params: ParameterBundle,
    inner_result: ParameterBundle,
    task: Task,
    outer_lr: float,
    order: str = "second",
    adam_state: AdamState | None = None,
    loss_scale: float = 1.0,
    query=None,
) -> ParameterBundle:
    """One Adam step on phi against the adapted model's query loss.

    The differentiation depth was fixed when inner_result was built; `order`
    is accepted for symmetry and validated only.  The returned bundle holds
    fresh leaf tensors and records the (scaled) query loss in info.
    """
    if order not in ("second", "first"):
        raise ConfigError(f"order must be 'second' or 'first', got {order!r}")
    if outer_lr < 0:
        raise ConfigError("outer_lr must be non-negative")
    query = list(query) if query is not None else list(task.query)
    loss, names, grads = composed_query_grads(params, inner_result, query, loss_scale)
    adam = adam_state if adam_state is not None else AdamState()
    updates = {}
    for n, g in zip(names, grads):
        stepped = adam.update(n, params[n], g, outer_lr)
        updates[n] = stepped.detach().requires_grad_(True)
    info = dict(params.info)
    info["outer_loss"] = float(loss.detach())
    return params.replace(updates, info=info)


def _prepare_arch(dataset: Dataset, num_classes: int, arch: ArchConfig | None) -> ArchConfig:
    c, h, w = dataset.image_shape
    if h != w:
        raise ConfigError("only square images are supported")
    if arch is None:
        return ArchConfig(in_channels=c, image_size=h, num_classes=num_classes)
    if arch.in_channels != c or arch.image_size != h:
        raise ConfigError(
            f"architecture expects ({arch.in_channels}, {arch.image_size}) inputs, "
            f"dataset provides ({c}, {h})"
        )
    if arch.num_classes != num_classes:
        arch = dc_replace(arch, num_classes=num_classes)
    return arch


def meta_train(
    dataset: Dataset,
    assignment_or_labels,
    config: TrainingConfig,
    arch: ArchConfig | None = None,
) -> tuple:
    """Algorithm: sample a task, re-init the head, adapt, meta-update; repeat.

    Pass a ClusterAssignment for unsupervised training over pseudo-labels, or
    None (or a replacement label vector) for oracle training over true labels
    with fixed-size balanced tasks.  Deterministic given config.seed.
    """
    if isinstance(assignment_or_labels, ClusterAssignment):
        assignment = assignment_or_labels
        if assignment.indices.max() >= len(dataset):
            raise ValidationError("assignment refers to indices outside the dataset")
        num_classes = assignment.k
    else:
        if assignment_or_labels is not None:
            dataset = Dataset(dataset.images, assignment_or_labels, dataset.split_tag)
        assignment = None
        num_classes = dataset.num_classes

    arch = _prepare_arch(dataset, num_classes, arch)
    # separate child sequences so enabling the buffer cannot shift the
    # per-step draw stream
    draw_seq, buffer_seq = np.random.SeedSequence([config.seed]).spawn(2)
    rng = np.random.Generator(np.random.PCG64(draw_seq))
    params = init_params(arch, seed=config.seed)

    if assignment is not None:
        pool = assignment.usable_clusters()
        sizes = assignment.sizes
    else:
        counts = torch.bincount(dataset.labels, minlength=num_classes).numpy()
        need = config.oracle_support + config.oracle_query_same
        pool = np.nonzero(counts >= need)[0]
        sizes = counts
    if pool.size == 0:
        raise TaskError("no cluster/class is large enough to form tasks")

    balancing = compute_balancing_vector(sizes) if config.loss_balancing else None
    buffer = None
    if config.rehearsal_capacity:
        buffer = ReservoirBuffer(
            config.rehearsal_capacity, seed=int(buffer_seq.generate_state(1)[0])
        )

    adam = AdamState()
    w_names = params.group_names("W")
    log = TrainLog()

    for step in range(config.steps):
        t0 = time.perf_counter()
        # one fixed block of draws per step, so the stream stays aligned
        # across variants and rehearsal settings
        cluster = int(pool[rng.integers(pool.size)])
        task_seed = int(rng.integers(_MAX_SEED))
        w_seed = int(rng.integers(_MAX_SEED))
        single_seed = int(rng.integers(_MAX_SEED))
        batch_seed = int(rng.integers(_MAX_SEED))
        try:
            if assignment is not None:
                task = make_unbalanced_task(
                    assignment, dataset, cluster, config.q_random, task_seed
                )
            else:
                task = make_balanced_task(
                    dataset,
                    cluster,
                    config.oracle_support,
                    config.oracle_query_same,
                    config.oracle_query_random,
                    task_seed,
                )

            if config.reinit_w:
                params = reinit_cln(params, w_seed)
                adam.reset(w_names)
            if arch.film:
                params = reset_context(params)

            inner = run_inner(
                params, task, config.variant, config.inner_lr,
                config.gradient_order, seed=single_seed,
            )

            query = None
            if buffer is not None and len(buffer) > 0:
                query = buffer.sample(len(task.query), seed=batch_seed)
            loss_scale = balancing[cluster] if balancing is not None else 1.0
            params = outer_update(
                params, inner, task, config.outer_lr, config.gradient_order,
                adam, loss_scale, query,
            )
            if buffer is not None:
                buffer.extend(task.support)
                buffer.extend(task.query)
        except Exception as exc:
            raise type(exc)(f"meta-train step {step}: {exc}") from exc

        log.append(
            params.info["outer_loss"],
            (time.perf_counter() - t0) * 1000.0,
            cluster,
            inner.info["inner_steps"],
        )

    return params, log
