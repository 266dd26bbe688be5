"""Shared fixtures: tiny configurations plus cached desk-scale trainings.

The acceptance tests share one pool of trained models across criteria so the
expensive runs happen once.  Everything is seeded; torch is pinned to one
thread so wall-time criteria mean the same thing on any box.
"""

import hashlib
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

import fusion

# Desk-scale experiment shared by the end-to-end acceptance criteria.  The
# learning rates, widths, and test fine-tune settings below are calibrated,
# not arbitrary: a single inner step at lr >= 0.3 is what gives the outer
# objective usable signal on a freshly re-initialized head.
ACC_CLASSES_TRAIN = 30
ACC_CLASSES_TEST = 10
ACC_SAMPLES = 20
ACC_IMAGE = 28
ACC_K = 30
ACC_STEPS = 2000
ACC_SEEDS = (0, 1, 2, 3, 4)
ACC_CONV = 32
ACC_FEAT = 64
ACC_EMB = 64
ACC_INNER_LR = 0.3
ACC_OUTER_LR = 3e-4
ACC_STRIDES = (2, 1, 2, 1, 2, 1)
ACC_SHOTS = 5
ACC_TEST_STEPS = 5
ACC_TEST_LR = 0.05

# (description, theta_and_rho_unchanged) pairs recorded by every cached
# meta_test call; the frozen-representation criterion audits this list.
FROZEN_CHECKS: list = []

# One line per acceptance criterion, flushed into the terminal summary.
ACCEPTANCE_LINES: list = []


def append_summary(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def group_checksum(params, groups=("theta", "rho")) -> str:
    digest = hashlib.sha256()
    for group in groups:
        for name in params.group_names(group):
            digest.update(name.encode())
            digest.update(params[name].detach().cpu().numpy().astype("<f4").tobytes())
    return digest.hexdigest()


def base_experiment_config(**overrides) -> fusion.ExperimentConfig:
    training = overrides.pop("training", fusion.TrainingConfig(
        variant="MEML",
        inner_lr=ACC_INNER_LR,
        outer_lr=ACC_OUTER_LR,
        steps=ACC_STEPS,
        gradient_order="second",
    ))
    fields = dict(
        dataset_kind="synthetic", data_path="",
        classes_train=ACC_CLASSES_TRAIN, classes_test=ACC_CLASSES_TEST,
        samples_per_class=ACC_SAMPLES, image_size=ACC_IMAGE, data_seed=0,
        embedding_dim=ACC_EMB, k=ACC_K, kmeans_max_iters=300,
        variants=("MEML",), training=training,
        conv_channels=ACC_CONV, feature_dim=ACC_FEAT,
        attention_hidden=0, cln_hidden=0, strides=ACC_STRIDES, film=False,
        task_mode="unsupervised", truncate_n=0,
        test_shots=ACC_SHOTS, test_steps=ACC_TEST_STEPS, test_lr=ACC_TEST_LR,
        rehearsal_test=False, rehearsal_capacity=500, ood="off",
        out_dir="", seeds=ACC_SEEDS,
    )
    fields.update(overrides)
    return fusion.ExperimentConfig(**fields)


class AcceptanceRuns:
    """Lazy, memoized desk-scale trainings and meta-test curves."""

    MODES = {
        "unbalanced": ("MEML", "unsupervised"),
        "truncated": ("MEML", "balanced-truncated"),
        "oml-single": ("OML-single", "unsupervised"),
    }

    def __init__(self):
        self.config = base_experiment_config()
        self.train_ds, self.test_ds = fusion.build_datasets(self.config)
        self.arch = self.config.make_arch(
            self.train_ds.images.shape[1], self.config.image_size
        )
        self._trainings: dict = {}
        self._curves: dict = {}
        self.train_wall: dict = {}
        self.test_wall: dict = {}

    def training(self, mode: str, seed: int):
        key = (mode, seed)
        if key not in self._trainings:
            variant, task_mode = self.MODES[mode]
            embeddings = fusion.embed_dataset_baseline(
                self.train_ds, self.config.embedding_dim, seed
            )
            assignment = fusion.kmeans_partition(
                embeddings, self.config.k, seed=seed,
                max_iters=self.config.kmeans_max_iters,
            )
            if task_mode == "balanced-truncated":
                sizes = [s for s in assignment.sizes if s >= 2]
                assignment = fusion.truncate_to_balanced(
                    assignment, max(2, min(sizes)), seed=seed
                )
            cfg = replace(self.config.training, variant=variant, seed=seed)
            start = time.perf_counter()
            params, log = fusion.meta_train(self.train_ds, assignment, cfg, self.arch)
            self.train_wall[key] = time.perf_counter() - start
            self._trainings[key] = (params, log)
        return self._trainings[key]

    def class_order(self, seed: int) -> list:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 101])))
        return [int(c) for c in rng.permutation(self.test_ds.num_classes)]

    def curve(self, mode: str, seed: int, rehearsal: bool = False):
        key = (mode, seed, rehearsal)
        if key not in self._curves:
            params, _ = self.training(mode, seed)
            before = group_checksum(params)
            start = time.perf_counter()
            curve = fusion.meta_test(
                params,
                self.test_ds,
                self.class_order(seed),
                shots=self.config.test_shots,
                fine_tune_cfg=self.config.fine_tune_config(),
                rehearsal=rehearsal,
                seed=seed,
                variant_tag=f"{mode}{'+rs' if rehearsal else ''}",
            )
            self.test_wall[key] = time.perf_counter() - start
            FROZEN_CHECKS.append(
                (f"meta_test {mode} seed={seed} rehearsal={rehearsal}",
                 group_checksum(params) == before)
            )
            self._curves[key] = curve
        return self._curves[key]

    def criterion7_wall(self) -> float:
        total = 0.0
        for seed in ACC_SEEDS:
            total += self.train_wall[("unbalanced", seed)]
            total += self.test_wall[("unbalanced", seed, False)]
        return total


@pytest.fixture(scope="session")
def acceptance() -> AcceptanceRuns:
    return AcceptanceRuns()


# --- tiny fixtures for unit and property tests ---

@pytest.fixture(scope="session")
def tiny_arch() -> fusion.ArchConfig:
    # small enough that finite differences over every parameter stay cheap
    return fusion.ArchConfig(
        image_size=8, conv_channels=2, feature_dim=4, num_classes=3,
        strides=(2, 1, 2, 1, 2, 1), attention_hidden=2, cln_hidden=4,
    )


@pytest.fixture()
def tiny_params(tiny_arch) -> fusion.ParameterBundle:
    return fusion.init_params(tiny_arch, seed=0)


@pytest.fixture(scope="session")
def glyphs16() -> fusion.Dataset:
    return fusion.generate_synthetic_glyphs(
        num_classes=6, samples_per_class=10, image_size=16, seed=3
    )


@pytest.fixture(scope="session")
def assignment16(glyphs16) -> fusion.ClusterAssignment:
    embeddings = fusion.embed_dataset_baseline(glyphs16, dim=8, seed=0)
    return fusion.kmeans_partition(embeddings, 4, seed=0)


@pytest.fixture(scope="session")
def arch16() -> fusion.ArchConfig:
    return fusion.ArchConfig(
        image_size=16, conv_channels=4, feature_dim=8, num_classes=4,
        strides=(2, 1, 2, 1, 1, 1),
    )


def random_task(
    arch: fusion.ArchConfig,
    seed: int,
    n_support: int = 4,
    n_query: int = 3,
    cluster_id: int = 0,
) -> fusion.Task:
    """A synthetic task over random images; labels stay inside num_classes."""
    gen = torch.Generator().manual_seed(seed)
    def example(y):
        x = torch.rand(
            (arch.in_channels, arch.image_size, arch.image_size), generator=gen
        )
        return fusion.LabeledExample(x=x, y=y)
    rng = np.random.Generator(np.random.PCG64(seed))
    support = [example(cluster_id) for _ in range(n_support)]
    query = [
        example(int(rng.integers(arch.num_classes))) for _ in range(n_query)
    ]
    return fusion.Task(support=support, query=query, cluster_id=cluster_id)
