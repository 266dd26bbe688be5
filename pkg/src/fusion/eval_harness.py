"""Class-incremental evaluation and the experiment harness.

Meta-test freezes the representation (theta and the attention head are never
touched), re-initializes the classifier, then presents novel classes one at a
time: a few shots of fine-tuning per class, then accuracy over the held-out
samples of every class seen so far.  The harness wraps that protocol in a
config-driven pipeline (generate data, embed, cluster, meta-train, meta-test,
persist, report) that is bit-reproducible per seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict, replace as dc_replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data_io import (
    Dataset,
    embed_dataset_baseline,
    generate_synthetic_glyphs,
    load_image_folder,
)
from .errors import ConfigError, FusionError, MetricError, ValidationError
from .meta_learner import TrainingConfig, TrainLog, VARIANTS, meta_train
from .network import (
    ArchConfig,
    ParameterBundle,
    cln_forward,
    fen_forward,
    reinit_cln,
    reset_context,
    save_checkpoint,
)
from .replay import ReservoirBuffer
from .task_builder import kmeans_partition, truncate_to_balanced

_MAX_SEED = 2**63 - 1


def accuracy(logits_batch, labels) -> float:
    """Fraction of argmax matches; ties resolve to the lowest class index."""
    logits = torch.as_tensor(logits_batch).detach().cpu().numpy()
    y = torch.as_tensor(labels).detach().cpu().numpy()
    if logits.ndim != 2:
        raise MetricError(f"logits must be a 2-D batch, got shape {logits.shape}")
    if logits.shape[0] == 0:
        raise MetricError("cannot compute accuracy of an empty batch")
    if y.shape != (logits.shape[0],):
        raise MetricError(
            f"labels shape {y.shape} does not match batch of {logits.shape[0]}"
        )
    pred = logits.argmax(axis=1)
    return float((pred == y).mean())


@dataclass(frozen=True)
class AccuracyCurve:
    """Accuracy after each new class, for one (variant, seed) evaluation.

    eval_sizes records how many held-out samples backed each point, since
    comparable published tables rarely state theirs.
    """

    points: tuple
    variant_tag: str = ""
    seed: int = 0
    w_updates: int = 0
    eval_sizes: tuple = ()

    def __post_init__(self):
        pts = tuple((int(n), float(a)) for n, a in self.points)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "eval_sizes", tuple(int(s) for s in self.eval_sizes))
        if not pts:
            raise ValidationError("curve must have at least one point")
        ns = [n for n, _ in pts]
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise ValidationError("num_classes must be strictly increasing")
        for _, a in pts:
            if not (0.0 <= a <= 1.0) or not np.isfinite(a):
                raise ValidationError(f"accuracy {a} outside [0, 1]")

    @property
    def final_accuracy(self) -> float:
        return self.points[-1][1]

    def accuracy_at(self, num_classes: int):
        for n, a in self.points:
            if n == num_classes:
                return a
        return None

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("num_classes,accuracy\n")
            for n, a in self.points:
                f.write(f"{n},{repr(a)}\n")

    @staticmethod
    def from_csv(path, variant_tag: str = "", seed: int = 0,
                 w_updates: int = 0, eval_sizes=()) -> "AccuracyCurve":
        points = []
        with open(path) as f:
            header = f.readline().strip()
            if header != "num_classes,accuracy":
                raise ValidationError(f"{path}: unexpected curve header {header!r}")
            for line in f:
                n, a = line.strip().split(",")
                points.append((int(n), float(a)))
        return AccuracyCurve(tuple(points), variant_tag, seed, w_updates, eval_sizes)


@dataclass(frozen=True)
class FineTuneConfig:
    steps: int = 5
    lr: float = 0.01
    rehearsal_capacity: int = 500

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"fine-tune steps must be >= 1, got {self.steps}")
        if self.lr < 0:
            raise ConfigError("fine-tune lr must be non-negative")
        if self.rehearsal_capacity < 1:
            raise ConfigError("rehearsal capacity must be >= 1")


def _features_chunked(params: ParameterBundle, images: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for i in range(0, images.shape[0], chunk):
            outs.append(fen_forward(params, images[i : i + chunk]))
    return torch.cat(outs)


def meta_test(
    params: ParameterBundle,
    test_dataset: Dataset,
    classes,
    shots: int = 5,
    fine_tune_cfg: FineTuneConfig | None = None,
    rehearsal: bool = False,
    seed: int = 0,
    variant_tag: str = "",
) -> AccuracyCurve:
    """Sequential few-shot fine-tuning over novel classes.

    Only the classifier head moves (plus conditioning parameters when FiLM is
    enabled); the trunk is evaluated once and its features reused.  With
    rehearsal on, each fine-tune batch concatenates an equally sized sample
    of earlier classes' shots from a reservoir buffer.
    """
    cfg = fine_tune_cfg or FineTuneConfig()
    classes = [int(c) for c in classes]
    if len(classes) < 2:
        raise ConfigError("meta-test needs at least 2 classes")
    if len(set(classes)) != len(classes):
        raise ConfigError("duplicate entries in the class list")
    if shots < 1:
        raise ConfigError(f"shots must be >= 1, got {shots}")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    shot_idx, held_idx = {}, {}
    for ci, c in enumerate(classes):
        idx = test_dataset.class_indices(c)
        if idx.size < shots + 1:
            raise ConfigError(
                f"class {c} has {idx.size} samples; need at least shots+1 = {shots + 1}"
            )
        perm = rng.permutation(idx)
        shot_idx[ci] = perm[:shots]
        held_idx[ci] = perm[shots:]

    current = reinit_cln(params, int(rng.integers(_MAX_SEED)), num_classes=len(classes))
    film = current.arch.film
    trainable = current.group_names("W")
    if film:
        trainable = sorted(trainable + current.group_names("film") + ["context"])

    feats = None
    if not film:
        # the trunk is frozen, so every image's feature is computed exactly once
        feats = _features_chunked(params, test_dataset.images)

    def inputs_for(indices) -> torch.Tensor:
        sel = torch.from_numpy(np.asarray(indices))
        return test_dataset.images[sel] if film else feats[sel]

    def head_logits(bundle, x, grad: bool):
        ctx = torch.enable_grad() if grad else torch.no_grad()
        with ctx:
            if film:
                return cln_forward(bundle, fen_forward(bundle, x))
            return cln_forward(bundle, x)

    buffer = None
    if rehearsal:
        buffer = ReservoirBuffer(cfg.rehearsal_capacity, seed=int(rng.integers(_MAX_SEED)))

    points, eval_sizes = [], []
    w_updates = 0
    for ci in range(len(classes)):
        if film:
            current = reset_context(current)
        sx = inputs_for(shot_idx[ci])
        sy = torch.full((shots,), ci, dtype=torch.int64)
        for _ in range(cfg.steps):
            bx, by = sx, sy
            if buffer is not None and len(buffer) > 0:
                extra = buffer.sample(shots, seed=int(rng.integers(_MAX_SEED)))
                bx = torch.cat([bx, torch.stack([e[0] for e in extra])])
                by = torch.cat([by, torch.tensor([e[1] for e in extra], dtype=torch.int64)])
            loss = F.cross_entropy(head_logits(current, bx, grad=True), by)
            tensors = [current[n] for n in trainable]
            grads = torch.autograd.grad(loss, tensors, allow_unused=True)
            updates = {}
            for n, t, g in zip(trainable, tensors, grads):
                stepped = t if g is None else t - cfg.lr * g
                updates[n] = stepped.detach().requires_grad_(True)
            current = current.replace(updates)
            w_updates += 1
        if buffer is not None:
            for j in range(shots):
                buffer.insert((sx[j], ci))

        hx = torch.cat([inputs_for(held_idx[cj]) for cj in range(ci + 1)])
        hy = torch.cat(
            [torch.full((held_idx[cj].size,), cj, dtype=torch.int64) for cj in range(ci + 1)]
        )
        acc = accuracy(head_logits(current, hx, grad=False), hy)
        points.append((ci + 1, acc))
        eval_sizes.append(int(hy.shape[0]))

    return AccuracyCurve(
        tuple(points), variant_tag, seed, w_updates=w_updates, eval_sizes=tuple(eval_sizes)
    )


def adapt_images(images: torch.Tensor, in_channels: int, image_size: int) -> torch.Tensor:
    """Channel- and size-adapt foreign images to a trained input shape.

    RGB collapses to gray by mean, gray expands to RGB by replication; any
    other channel pair has no defined rule.  Resizing is bilinear.
    """
    c = images.shape[1]
    if c != in_channels:
        if c == 3 and in_channels == 1:
            images = images.mean(dim=1, keepdim=True)
        elif c == 1 and in_channels == 3:
            images = images.repeat(1, 3, 1, 1)
        else:
            raise ConfigError(f"no adaptation rule from {c} channels to {in_channels}")
    if images.shape[2] != image_size or images.shape[3] != image_size:
        images = F.interpolate(
            images, size=(image_size, image_size), mode="bilinear", align_corners=False
        ).clamp(0.0, 1.0)
    return images


def ood_evaluate(
    params: ParameterBundle,
    ood_dataset: Dataset,
    classes,
    shots: int = 5,
    fine_tune_cfg: FineTuneConfig | None = None,
    seed: int = 0,
    rehearsal: bool = False,
    variant_tag: str = "",
) -> AccuracyCurve:
    """meta_test against data from outside the training distribution."""
    images = adapt_images(ood_dataset.images, params.arch.in_channels, params.arch.image_size)
    adapted = Dataset(images, ood_dataset.labels.clone(), ood_dataset.split_tag)
    return meta_test(
        params, adapted, classes, shots, fine_tune_cfg, rehearsal, seed, variant_tag
    )


def invert_dataset(dataset: Dataset) -> Dataset:
    """Contrast-inverted copy; a built-in out-of-distribution variant."""
    return Dataset(1.0 - dataset.images, dataset.labels.clone(), dataset.split_tag)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one `fusion run` needs, with desk-scale defaults."""

    dataset_kind: str = "synthetic"
    data_path: str = ""
    classes_train: int = 30
    classes_test: int = 10
    samples_per_class: int = 20
    image_size: int = 28
    data_seed: int = 0
    embedding_dim: int = 64
    k: int = 30
    kmeans_max_iters: int = 300
    variants: tuple = ("MEML",)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    conv_channels: int = 64
    feature_dim: int = 64
    attention_hidden: int = 0
    cln_hidden: int = 0
    strides: tuple = (2, 1, 2, 1, 2, 1)
    film: bool = False
    task_mode: str = "unsupervised"
    truncate_n: int = 0
    test_shots: int = 5
    test_steps: int = 5
    test_lr: float = 0.01
    rehearsal_test: bool = False
    rehearsal_capacity: int = 500
    ood: str = "off"
    out_dir: str = "runs/experiment"
    seeds: tuple = (0,)

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(self.variants))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if self.dataset_kind not in ("synthetic", "folder"):
            raise ConfigError(f"dataset_kind must be synthetic or folder, got {self.dataset_kind!r}")
        if self.dataset_kind == "folder" and not Path(self.data_path).is_dir():
            raise ConfigError(f"data_path {self.data_path!r} is not a directory")
        if self.task_mode not in ("unsupervised", "oracle", "balanced-truncated"):
            raise ConfigError(f"unknown task_mode {self.task_mode!r}")
        if self.ood not in ("off", "invert"):
            raise ConfigError(f"ood must be off or invert, got {self.ood!r}")
        if not self.variants:
            raise ConfigError("need at least one variant")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; choose from {VARIANTS}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("duplicate seeds")
        if self.classes_train < 2 or self.classes_test < 2:
            raise ConfigError("need at least 2 train and 2 test classes")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.kmeans_max_iters < 1:
            raise ConfigError("kmeans_max_iters must be >= 1")
        if self.test_shots < 1:
            raise ConfigError("test_shots must be >= 1")
        if self.samples_per_class < self.test_shots + 1:
            raise ConfigError("samples_per_class must exceed test_shots")
        # constructing these validates their fields
        FineTuneConfig(self.test_steps, self.test_lr, self.rehearsal_capacity)
        self.make_arch()

    def make_arch(self, in_channels: int = 0, image_size: int = 0) -> ArchConfig:
        return ArchConfig(
            in_channels=in_channels or (1 if self.dataset_kind == "synthetic" else 1),
            image_size=image_size or self.image_size,
            conv_channels=self.conv_channels,
            feature_dim=self.feature_dim,
            attention_hidden=self.attention_hidden,
            cln_hidden=self.cln_hidden,
            num_classes=max(2, self.k),
            strides=self.strides,
            film=self.film,
        )

    def fine_tune_config(self) -> FineTuneConfig:
        return FineTuneConfig(self.test_steps, self.test_lr, self.rehearsal_capacity)

    def snapshot(self) -> dict:
        return asdict(self)


def build_datasets(config: ExperimentConfig) -> tuple:
    """Materialize the meta-train and meta-test splits."""
    if config.dataset_kind == "synthetic":
        total = config.classes_train + config.classes_test
        full = generate_synthetic_glyphs(
            total, config.samples_per_class, config.image_size, config.data_seed
        )
    else:
        full = load_image_folder(config.data_path)
        if full.num_classes < config.classes_train + config.classes_test:
            raise ConfigError(
                f"folder provides {full.num_classes} classes; config wants "
                f"{config.classes_train}+{config.classes_test}"
            )
    train = full.subset_by_classes(range(config.classes_train), "meta-train")
    test = full.subset_by_classes(
        range(config.classes_train, config.classes_train + config.classes_test), "meta-test"
    )
    return train, test


@dataclass
class ResultsRecord:
    """Everything run_experiment produced, in memory and on disk."""

    config: dict
    k: int
    curves: list = field(default_factory=list)
    step_ms: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    total_wall_s: float = 0.0

    def add_curve(self, variant: str, seed: int, kind: str, curve: AccuracyCurve,
                  checkpoint: str = "") -> None:
        for entry in self.curves:
            if (entry["variant"], entry["seed"], entry["kind"]) == (variant, seed, kind):
                raise ValidationError(
                    f"duplicate curve for variant={variant} seed={seed} kind={kind}"
                )
        self.curves.append(
            {"variant": variant, "seed": seed, "kind": kind, "curve": curve,
             "checkpoint": checkpoint}
        )

    def curves_for(self, variant: str, kind: str = "test") -> list:
        out = [e["curve"] for e in self.curves
               if e["variant"] == variant and e["kind"] == kind]
        return sorted(out, key=lambda c: c.seed)

    def variants_present(self, kind: str = "test") -> list:
        seen = []
        for e in self.curves:
            if e["kind"] == kind and e["variant"] not in seen:
                seen.append(e["variant"])
        return seen

    def mean_final_accuracy(self, kind: str = "test") -> float:
        finals = [e["curve"].final_accuracy for e in self.curves if e["kind"] == kind]
        if not finals:
            raise MetricError("no curves recorded")
        return float(np.mean(finals))


def _run_single(
    config: ExperimentConfig,
    variant: str,
    seed: int,
    train_ds: Dataset,
    test_ds: Dataset,
    out_dir: Path,
) -> tuple:
    seed_dir = out_dir / variant / f"seed{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)

    assignment = None
    if config.task_mode in ("unsupervised", "balanced-truncated"):
        embeddings = embed_dataset_baseline(train_ds, config.embedding_dim, seed=seed)
        assignment = kmeans_partition(
            embeddings, config.k, seed=seed, max_iters=config.kmeans_max_iters
        )
        if config.task_mode == "balanced-truncated":
            sizes = assignment.sizes
            n = config.truncate_n or int(max(2, sizes[sizes >= 2].min()))
            assignment = truncate_to_balanced(assignment, n, seed=seed)
        assignment.to_csv(seed_dir / "assignment.csv")

    t0 = time.perf_counter()
    tcfg = dc_replace(config.training, variant=variant, seed=seed)
    c, h, w = train_ds.image_shape
    arch = config.make_arch(in_channels=c, image_size=h)
    params, log = meta_train(train_ds, assignment, tcfg, arch)
    train_wall = time.perf_counter() - t0

    save_checkpoint(params, seed_dir / "checkpoint.bin")
    log.to_csv(seed_dir / "trainlog.csv")

    order_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 101])))
    class_order = order_rng.permutation(test_ds.num_classes).tolist()
    ft = config.fine_tune_config()
    curve = meta_test(
        params, test_ds, class_order, config.test_shots, ft,
        rehearsal=config.rehearsal_test, seed=seed, variant_tag=variant,
    )
    curve.to_csv(seed_dir / "curve.csv")

    ood_curve = None
    if config.ood == "invert":
        ood_curve = ood_evaluate(
            params, invert_dataset(test_ds), class_order, config.test_shots, ft,
            seed=seed, variant_tag=variant,
        )
        ood_curve.to_csv(seed_dir / "ood_curve.csv")

    meta = {
        "variant": variant,
        "seed": seed,
        "w_updates": curve.w_updates,
        "eval_sizes": list(curve.eval_sizes),
        "final_accuracy": curve.final_accuracy,
        "train_step_ms_mean": log.mean_step_ms,
        "train_wall_s": train_wall,
    }
    (seed_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2))
    return curve, ood_curve, log, str(seed_dir / "checkpoint.bin")


def run_experiment(config: ExperimentConfig) -> ResultsRecord:
    """Run every (variant, seed) job and persist all artifacts under out_dir.

    A failing job is recorded and skipped; the rest proceed.  Identical
    config and seeds reproduce all metric files byte-for-byte.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = ResultsRecord(config=config.snapshot(), k=config.k)
    (out_dir / "config.json").write_text(
        json.dumps(record.config, sort_keys=True, indent=2)
    )

    t_start = time.perf_counter()
    train_ds, test_ds = build_datasets(config)
    for variant in config.variants:
        per_seed_ms = []
        for seed in config.seeds:
            try:
                curve, ood_curve, log, ckpt = _run_single(
                    config, variant, seed, train_ds, test_ds, out_dir
                )
            except FusionError as exc:
                record.failures.append(
                    {"variant": variant, "seed": seed, "error": str(exc)}
                )
                continue
            record.add_curve(variant, seed, "test", curve, ckpt)
            if ood_curve is not None:
                record.add_curve(variant, seed, "ood", ood_curve, ckpt)
            per_seed_ms.append(log.mean_step_ms)
        if per_seed_ms:
            record.step_ms[variant] = per_seed_ms
    record.total_wall_s = time.perf_counter() - t_start

    (out_dir / "metadata.json").write_text(
        json.dumps(
            {
                "failures": record.failures,
                "total_wall_s": record.total_wall_s,
                "step_ms": record.step_ms,
            },
            sort_keys=True,
            indent=2,
        )
    )
    return record


def load_results(results_dir) -> ResultsRecord:
    """Rebuild a ResultsRecord from a persisted run directory."""
    results_dir = Path(results_dir)
    config_path = results_dir / "config.json"
    if not config_path.is_file():
        raise ConfigError(f"{results_dir}: no config.json; not a results directory")
    config = json.loads(config_path.read_text())
    record = ResultsRecord(config=config, k=int(config["k"]))
    meta_path = results_dir / "metadata.json"
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text())
        record.failures = meta.get("failures", [])
        record.total_wall_s = meta.get("total_wall_s", 0.0)
        record.step_ms = meta.get("step_ms", {})
    for variant in config.get("variants", []):
        vdir = results_dir / variant
        if not vdir.is_dir():
            continue
        for seed_dir in sorted(vdir.iterdir()):
            if not seed_dir.name.startswith("seed"):
                continue
            seed = int(seed_dir.name[4:])
            meta = {}
            if (seed_dir / "meta.json").is_file():
                meta = json.loads((seed_dir / "meta.json").read_text())
            curve_path = seed_dir / "curve.csv"
            if curve_path.is_file():
                curve = AccuracyCurve.from_csv(
                    curve_path, variant, seed,
                    meta.get("w_updates", 0), tuple(meta.get("eval_sizes", ())),
                )
                record.add_curve(
                    variant, seed, "test", curve, str(seed_dir / "checkpoint.bin")
                )
            ood_path = seed_dir / "ood_curve.csv"
            if ood_path.is_file():
                record.add_curve(
                    variant, seed, "ood",
                    AccuracyCurve.from_csv(ood_path, variant, seed),
                    str(seed_dir / "checkpoint.bin"),
                )
    return record


def _write_results_csv(record: ResultsRecord, path, kind: str) -> bool:
    rows = []
    for variant in record.variants_present(kind):
        for curve in record.curves_for(variant, kind):
            for n, acc in curve.points:
                rows.append(f"{variant},{record.k},{curve.seed},{n},{repr(acc)}\n")
    if not rows:
        return False
    with open(path, "w") as f:
        f.write("variant,k,seed,num_classes,accuracy\n")
        f.writelines(rows)
    return True


def _plot_curves(record: ResultsRecord, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for variant in record.variants_present("test"):
        curves = record.curves_for(variant, "test")
        xs = [n for n, _ in curves[0].points]
        grid = np.array([[c.accuracy_at(n) for n in xs] for c in curves], dtype=np.float64)
        mean = grid.mean(axis=0)
        ax.plot(xs, mean, marker="o", label=variant)
        ax.fill_between(xs, grid.min(axis=0), grid.max(axis=0), alpha=0.2)
    ax.set_xlabel("classes seen")
    ax.set_ylabel("accuracy on all seen classes")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_report(record: ResultsRecord, out_dir) -> list:
    """Write results.csv, timing.csv and the accuracy-vs-classes plot."""
    if not record.curves:
        raise ValidationError("results record holds no curves; nothing to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    results_path = out_dir / "results.csv"
    if _write_results_csv(record, results_path, "test"):
        written.append(str(results_path))
    ood_path = out_dir / "ood_results.csv"
    if _write_results_csv(record, ood_path, "ood"):
        written.append(str(ood_path))

    timing_path = out_dir / "timing.csv"
    with open(timing_path, "w") as f:
        f.write("variant,step_ms_mean\n")
        for variant in record.variants_present("test"):
            ms = record.step_ms.get(variant)
            if ms:
                f.write(f"{variant},{repr(float(np.mean(ms)))}\n")
    written.append(str(timing_path))

    plot_path = out_dir / "accuracy_vs_classes.png"
    _plot_curves(record, plot_path)
    written.append(str(plot_path))
    return written


_SWEEPABLE = {
    "k": ("k", int),
    "steps": ("training.steps", int),
    "inner_lr": ("training.inner_lr", float),
    "outer_lr": ("training.outer_lr", float),
    "shots": ("test_shots", int),
    "embedding_dim": ("embedding_dim", int),
}


def override_param(config: ExperimentConfig, param: str, value) -> ExperimentConfig:
    if param not in _SWEEPABLE:
        raise ConfigError(
            f"cannot sweep {param!r}; choose from {sorted(_SWEEPABLE)}"
        )
    path, cast = _SWEEPABLE[param]
    value = cast(value)
    if path.startswith("training."):
        training = dc_replace(config.training, **{path.split(".", 1)[1]: value})
        return dc_replace(config, training=training)
    return dc_replace(config, **{path: value})


def run_sweep(config: ExperimentConfig, param: str, values) -> dict:
    """run_experiment once per value; summarize and flag the best setting."""
    if not values:
        raise ConfigError("sweep needs at least one value")
    base_dir = Path(config.out_dir)
    base_dir.mkdir(parents=True, exist_ok=True)
    records = {}
    for value in values:
        sub = override_param(config, param, value)
        sub = dc_replace(sub, out_dir=str(base_dir / f"{param}{value}"))
        record = run_experiment(sub)
        if record.curves:
            emit_report(record, sub.out_dir)
        records[value] = record

    scored = {
        v: r.mean_final_accuracy() for v, r in records.items() if r.curves
    }
    best = max(scored, key=scored.get) if scored else None
    with open(base_dir / "sweep_summary.csv", "w") as f:
        f.write(f"param,value,mean_final_accuracy,best\n")
        for value in values:
            if value in scored:
                flag = "yes" if value == best else "no"
                f.write(f"{param},{value},{repr(scored[value])},{flag}\n")
            else:
                f.write(f"{param},{value},,failed\n")
    return records
