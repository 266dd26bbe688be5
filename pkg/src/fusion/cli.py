"""Command-line entry point.

Four subcommands: `run` executes an experiment config, `report` rebuilds the
CSVs and plot from a finished run directory, `sweep` repeats a config over a
parameter grid, and `selftest` exercises a handful of built-in invariants.
Configs are INI files; every key is optional and defaults to the value shown
in DEFAULT_CONFIG below.  The FUSION_OUT environment variable overrides the
output directory.  Exit codes: 0 success, 1 bad configuration or arguments,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from dataclasses import replace as dc_replace
from pathlib import Path

from .errors import ConfigError, FusionError, ValidationError
from .eval_harness import (
    ExperimentConfig,
    emit_report,
    load_results,
    run_experiment,
    run_sweep,
)
from .meta_learner import TrainingConfig

DEFAULT_CONFIG = """\
[dataset]
kind = synthetic            ; synthetic | folder
path =                      ; class-per-subdirectory PNG tree (folder mode)
classes_train = 30
classes_test = 10
samples_per_class = 20
image_size = 28
data_seed = 0

[embedding]
dim = 64

[clustering]
k = 30
max_iters = 300

[network]
conv_channels = 64
feature_dim = 64
attention_hidden = 0        ; 0 = feature_dim / 2
cln_hidden = 0              ; 0 = feature_dim
strides = 2,1,2,1,2,1
film = false

[training]
variants = MEML             ; comma list of MEML, MEML-mean, OML, OML-single
steps = 40000
inner_lr = 0.01
outer_lr = 1e-4
gradient_order = second     ; second | first
loss_balancing = false
rehearsal_train = off       ; off | coreset | coreset:N
q_random = 10
reinit_w = true
task_mode = unsupervised    ; unsupervised | oracle | balanced-truncated
truncate_n = 0              ; 0 = smallest usable cluster size

[meta_test]
shots = 5
steps = 5
lr = 0.01
rehearsal = false
rehearsal_capacity = 500
ood = off                   ; off | invert

[output]
dir = runs/experiment

[experiment]
seeds = 0
"""

_KNOWN_KEYS = {
    "dataset": {"kind", "path", "classes_train", "classes_test",
                "samples_per_class", "image_size", "data_seed"},
    "embedding": {"dim"},
    "clustering": {"k", "max_iters"},
    "network": {"conv_channels", "feature_dim", "attention_hidden",
                "cln_hidden", "strides", "film"},
    "training": {"variants", "steps", "inner_lr", "outer_lr", "gradient_order",
                 "loss_balancing", "rehearsal_train", "q_random", "reinit_w",
                 "task_mode", "truncate_n"},
    "meta_test": {"shots", "steps", "lr", "rehearsal", "rehearsal_capacity", "ood"},
    "output": {"dir"},
    "experiment": {"seeds"},
}


def _check_keys(parser: configparser.ConfigParser, path) -> None:
    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key in parser[section]:
            if key not in _KNOWN_KEYS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")


class _Section:
    """configparser section wrapper that turns parse failures into ConfigError."""

    def __init__(self, parser, name):
        self._parser = parser
        self._name = name

    def _get(self, getter, key, default):
        try:
            return getter(self._name, key, fallback=default)
        except ValueError as exc:
            raise ConfigError(f"[{self._name}] {key}: {exc}") from None

    def str(self, key, default):
        value = self._get(self._parser.get, key, default)
        return value.strip() if isinstance(value, str) else value

    def int(self, key, default):
        return self._get(self._parser.getint, key, default)

    def float(self, key, default):
        return self._get(self._parser.getfloat, key, default)

    def bool(self, key, default):
        return self._get(self._parser.getboolean, key, default)

    def int_list(self, key, default):
        raw = self.str(key, None)
        if raw is None:
            return default
        try:
            return tuple(int(v.strip()) for v in raw.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"[{self._name}] {key}: expected comma-separated integers") from None

    def str_list(self, key, default):
        raw = self.str(key, None)
        if raw is None:
            return default
        return tuple(v.strip() for v in raw.split(",") if v.strip())


def load_config(path) -> ExperimentConfig:
    """Parse an INI experiment config; missing keys keep their defaults."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    _check_keys(parser, path)

    ds = _Section(parser, "dataset")
    emb = _Section(parser, "embedding")
    cl = _Section(parser, "clustering")
    net = _Section(parser, "network")
    tr = _Section(parser, "training")
    mt = _Section(parser, "meta_test")
    out = _Section(parser, "output")
    exp = _Section(parser, "experiment")

    training = TrainingConfig(
        variant="MEML",  # replaced per run from the variants list
        inner_lr=tr.float("inner_lr", 0.01),
        outer_lr=tr.float("outer_lr", 1e-4),
        steps=tr.int("steps", 40000),
        gradient_order=tr.str("gradient_order", "second"),
        loss_balancing=tr.bool("loss_balancing", False),
        rehearsal_train=tr.str("rehearsal_train", "off"),
        q_random=tr.int("q_random", 10),
        reinit_w=tr.bool("reinit_w", True),
    )
    return ExperimentConfig(
        dataset_kind=ds.str("kind", "synthetic"),
        data_path=ds.str("path", ""),
        classes_train=ds.int("classes_train", 30),
        classes_test=ds.int("classes_test", 10),
        samples_per_class=ds.int("samples_per_class", 20),
        image_size=ds.int("image_size", 28),
        data_seed=ds.int("data_seed", 0),
        embedding_dim=emb.int("dim", 64),
        k=cl.int("k", 30),
        kmeans_max_iters=cl.int("max_iters", 300),
        variants=tr.str_list("variants", ("MEML",)),
        training=training,
        conv_channels=net.int("conv_channels", 64),
        feature_dim=net.int("feature_dim", 64),
        attention_hidden=net.int("attention_hidden", 0),
        cln_hidden=net.int("cln_hidden", 0),
        strides=net.int_list("strides", (2, 1, 2, 1, 2, 1)),
        film=net.bool("film", False),
        task_mode=tr.str("task_mode", "unsupervised"),
        truncate_n=tr.int("truncate_n", 0),
        test_shots=mt.int("shots", 5),
        test_steps=mt.int("steps", 5),
        test_lr=mt.float("lr", 0.01),
        rehearsal_test=mt.bool("rehearsal", False),
        rehearsal_capacity=mt.int("rehearsal_capacity", 500),
        ood=mt.str("ood", "off"),
        out_dir=out.str("dir", "runs/experiment"),
        seeds=exp.int_list("seeds", (0,)),
    )


def _apply_env_out(config: ExperimentConfig) -> ExperimentConfig:
    env_out = os.environ.get("FUSION_OUT")
    if env_out:
        return dc_replace(config, out_dir=env_out)
    return config


def _print_summary(record) -> None:
    for variant in record.variants_present("test"):
        curves = record.curves_for(variant, "test")
        finals = [c.final_accuracy for c in curves]
        mean = sum(finals) / len(finals)
        print(
            f"{variant}: final accuracy mean {mean:.3f} "
            f"(min {min(finals):.3f}, max {max(finals):.3f}, {len(finals)} seed(s))"
        )
    for failure in record.failures:
        print(
            f"FAILED variant={failure['variant']} seed={failure['seed']}: "
            f"{failure['error']}",
            file=sys.stderr,
        )


def cmd_run(args) -> int:
    config = _apply_env_out(load_config(args.config))
    record = run_experiment(config)
    if not record.curves:
        _print_summary(record)
        print("all jobs failed; nothing to report", file=sys.stderr)
        return 2
    written = emit_report(record, config.out_dir)
    _print_summary(record)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    record = load_results(args.results_dir)
    if not record.curves:
        print(f"no curves found under {args.results_dir}", file=sys.stderr)
        return 2
    written = emit_report(record, args.results_dir)
    _print_summary(record)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_sweep(args) -> int:
    config = _apply_env_out(load_config(args.config))
    values = []
    for raw in args.values.split(","):
        raw = raw.strip()
        if not raw:
            continue
        try:
            values.append(int(raw))
        except ValueError:
            try:
                values.append(float(raw))
            except ValueError:
                raise ConfigError(f"sweep value {raw!r} is not a number") from None
    records = run_sweep(config, args.param, values)
    scored = {
        v: r.mean_final_accuracy() for v, r in records.items() if r.curves
    }
    for value in values:
        if value in scored:
            print(f"{args.param}={value}: mean final accuracy {scored[value]:.3f}")
        else:
            print(f"{args.param}={value}: all seeds failed", file=sys.stderr)
    if not scored:
        return 2
    best = max(scored, key=scored.get)
    print(f"best {args.param}: {best}")
    print(f"wrote {Path(config.out_dir) / 'sweep_summary.csv'}")
    return 0


def _selftest_checks() -> list:
    import numpy as np
    import torch

    from .data_io import EmbeddingSet, load_embeddings, store_embeddings
    from .meta_learner import inner_update_meml
    from .network import ArchConfig, attention_pool, init_params
    from .replay import ReservoirBuffer
    from .task_builder import (
        ClusterAssignment,
        compute_balancing_vector,
        kmeans_partition,
        make_unbalanced_task,
    )
    from .data_io import Dataset

    def check_attention():
        arch = ArchConfig(image_size=12, conv_channels=4, feature_dim=6,
                          num_classes=3, strides=(1, 2, 1, 2, 1, 1))
        for seed in range(20):
            params = init_params(arch, seed)
            gen = torch.Generator().manual_seed(seed)
            feats = torch.randn(5, 6, generator=gen)
            pooled = attention_pool(params, feats)
            alpha = pooled.alpha.detach()
            me = pooled.me.detach()
            assert (alpha >= 0).all()
            assert abs(float(alpha.sum()) - 1.0) <= 1e-6
            lo, hi = feats.min(dim=0).values, feats.max(dim=0).values
            assert (me >= lo - 1e-6).all() and (me <= hi + 1e-6).all()

    def check_embedding_roundtrip(tmp=Path("/tmp/fusion-selftest.emb")):
        rng = np.random.Generator(np.random.PCG64(7))
        emb = EmbeddingSet(rng.normal(size=(5, 3)).astype(np.float32))
        store_embeddings(emb, tmp)
        loaded = load_embeddings(tmp)
        assert np.array_equal(loaded.vectors, emb.vectors)
        tmp.unlink()

    def check_reservoir():
        a = ReservoirBuffer(4, seed=3)
        b = ReservoirBuffer(4, seed=3)
        for i in range(100):
            a.insert(i)
            b.insert(i)
        assert a.items == b.items and len(a) == 4 and a.total_seen == 100

    def check_balancing():
        vec = compute_balancing_vector([10, 20, 30])
        assert abs(vec[0] - 1.0) <= 1e-6 and abs(vec[2]) <= 1e-6
        ones = compute_balancing_vector([7, 7, 7])
        assert all(ones[i] == 1.0 for i in range(3))

    def check_kmeans_monotone():
        rng = np.random.Generator(np.random.PCG64(11))
        emb = EmbeddingSet(rng.normal(size=(60, 4)).astype(np.float32))
        assignment = kmeans_partition(emb, 5, seed=1)
        hist = assignment.inertia_history
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))

    def check_inner_zero_lr():
        arch = ArchConfig(image_size=12, conv_channels=4, feature_dim=6,
                          num_classes=2, strides=(1, 2, 1, 2, 1, 1))
        params = init_params(arch, 0)
        gen = torch.Generator().manual_seed(0)
        images = torch.rand(8, 1, 12, 12, generator=gen)
        labels = torch.tensor([0] * 4 + [1] * 4)
        ds = Dataset(images, labels, "selftest")
        assignment = ClusterAssignment(
            pseudo_labels=labels.numpy(), k=2,
            centroids=np.zeros((2, 4)), inertia=0.0,
        )
        task = make_unbalanced_task(assignment, ds, 0, q_random=2, seed=0)
        stepped = inner_update_meml(params, task, inner_lr=0.0)
        for name in params.group_names("psi"):
            assert torch.equal(stepped[name], params[name])
        for name in params.group_names("theta"):
            assert stepped[name] is params[name]

    return [
        ("attention pooling invariants", check_attention),
        ("embedding round-trip", check_embedding_roundtrip),
        ("reservoir determinism and capacity", check_reservoir),
        ("balancing vector", check_balancing),
        ("k-means inertia monotone", check_kmeans_monotone),
        ("zero-lr inner step is a no-op", check_inner_zero_lr),
    ]


def cmd_selftest(args) -> int:
    failures = 0
    for name, fn in _selftest_checks():
        try:
            fn()
        except Exception as exc:  # report every check, pass or fail
            failures += 1
            print(f"FAIL {name}: {exc}")
        else:
            print(f"PASS {name}")
    if failures:
        print(f"{failures} check(s) failed")
        return 2
    print("all checks passed")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="fusion",
        description="Few-shot unsupervised continual learning experiments.",
    )
    sub = parser.add_subparsers(dest="command")

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config", help="INI config file")
    p_run.set_defaults(func=cmd_run)

    p_report = sub.add_parser("report", help="regenerate report files for a finished run")
    p_report.add_argument("results_dir", help="directory written by `fusion run`")
    p_report.set_defaults(func=cmd_report)

    p_sweep = sub.add_parser("sweep", help="run a config across a parameter grid")
    p_sweep.add_argument("config", help="INI config file")
    p_sweep.add_argument("--param", required=True, help="parameter to sweep (e.g. k)")
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.set_defaults(func=cmd_sweep)

    p_self = sub.add_parser("selftest", help="run built-in invariant checks")
    p_self.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help()
            return 1
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # pragma: no cover - last-resort guard
        print(f"unexpected error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
