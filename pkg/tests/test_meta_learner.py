import numpy as np
import pytest
import torch

import fusion
import oracles
from conftest import random_task


class TestTrainingConfig:
    def test_defaults(self):
        cfg = fusion.TrainingConfig(variant="MEML")
        assert cfg.inner_lr == 0.01
        assert cfg.outer_lr == 1e-4
        assert cfg.steps == 40000
        assert cfg.gradient_order == "second"
        assert cfg.meta_batch == 1
        assert cfg.q_random == 10
        assert cfg.reinit_w is True
        assert cfg.rehearsal_capacity == 0

    def test_rehearsal_parsing(self):
        assert fusion.TrainingConfig(
            variant="MEML", rehearsal_train="coreset"
        ).rehearsal_capacity == 500
        assert fusion.TrainingConfig(
            variant="MEML", rehearsal_train="coreset:64"
        ).rehearsal_capacity == 64

    def test_validation(self):
        with pytest.raises(fusion.ConfigError):
            fusion.TrainingConfig(variant="NOPE")
        with pytest.raises(fusion.ConfigError):
            fusion.TrainingConfig(variant="MEML", inner_lr=-0.1)
        with pytest.raises(fusion.ConfigError):
            fusion.TrainingConfig(variant="MEML", meta_batch=2)
        with pytest.raises(fusion.ConfigError):
            fusion.TrainingConfig(variant="MEML", gradient_order="third")
        with pytest.raises(fusion.ConfigError):
            fusion.TrainingConfig(variant="MEML", rehearsal_train="coreset:zero")
        with pytest.raises(fusion.ConfigError):
            fusion.TrainingConfig(variant="MEML", steps=0)


class TestInnerUpdates:
    def test_meml_matches_hand_rolled_sgd(self, tiny_arch):
        for seed in range(4):
            params = fusion.init_params(tiny_arch, seed=seed).to_dtype(torch.float64)
            task = random_task(tiny_arch, seed=seed, n_support=5, n_query=3)
            stepped = fusion.inner_update_meml(params, task, inner_lr=0.05)
            ref = oracles.meml_inner_ref(params, task, lr=0.05)
            for name in params.names():
                diff = (stepped[name] - ref[name]).detach().abs().max()
                assert float(diff) <= 1e-10, name

    def test_oml_matches_hand_rolled_sgd(self, tiny_arch):
        for seed in range(4):
            params = fusion.init_params(tiny_arch, seed=10 + seed).to_dtype(torch.float64)
            task = random_task(tiny_arch, seed=20 + seed, n_support=4, n_query=2)
            stepped = fusion.inner_update_oml(params, task, inner_lr=0.03)
            ref = oracles.oml_inner_ref(params, task, lr=0.03)
            for name in params.names():
                assert float((stepped[name] - ref[name]).detach().abs().max()) <= 1e-10, name

    def test_theta_never_touched(self, tiny_arch):
        params = fusion.init_params(tiny_arch, seed=0)
        task = random_task(tiny_arch, seed=0)
        for fn in (
            lambda: fusion.inner_update_meml(params, task, 0.1),
            lambda: fusion.inner_update_oml(params, task, 0.1),
            lambda: fusion.inner_update_single(params, task, 0.1, seed=4),
        ):
            stepped = fn()
            for name in params.group_names("theta"):
                assert stepped[name] is params[name]

    def test_step_counters(self, tiny_arch):
        params = fusion.init_params(tiny_arch, seed=1)
        task = random_task(tiny_arch, seed=1, n_support=6)
        assert fusion.inner_update_meml(params, task, 0.1).info["inner_steps"] == 1
        assert fusion.inner_update_oml(params, task, 0.1).info["inner_steps"] == 6
        single = fusion.inner_update_single(params, task, 0.1, seed=2)
        assert single.info["inner_steps"] == 1
        assert 0 <= single.info["chosen_index"] < 6

    def test_single_uses_the_chosen_example(self, tiny_arch):
        params = fusion.init_params(tiny_arch, seed=2).to_dtype(torch.float64)
        task = random_task(tiny_arch, seed=3, n_support=5)
        stepped = fusion.inner_update_single(params, task, 0.02, seed=9)
        idx = stepped.info["chosen_index"]
        one = fusion.Task(
            support=[task.support[idx]], query=task.query, cluster_id=task.cluster_id
        )
        ref = oracles.oml_inner_ref(params, one, lr=0.02)
        for name in params.group_names("psi"):
            assert float((stepped[name] - ref[name]).detach().abs().max()) <= 1e-10

    def test_zero_lr_is_identity_on_values(self, tiny_arch):
        params = fusion.init_params(tiny_arch, seed=3)
        task = random_task(tiny_arch, seed=4)
        for variant in fusion.VARIANTS:
            stepped = fusion.run_inner(params, task, variant, inner_lr=0.0, seed=0)
            for name in params.group_names("psi"):
                assert torch.equal(stepped[name].detach(), params[name].detach())

    def test_mean_pooling_variant(self, tiny_arch):
        params = fusion.init_params(tiny_arch, seed=5).to_dtype(torch.float64)
        task = random_task(tiny_arch, seed=6, n_support=4)
        stepped = fusion.inner_update_meml(params, task, 0.05, pooling="mean")
        ref = oracles.meml_inner_ref(params, task, lr=0.05, pooling="mean")
        for name in params.names():
            assert float((stepped[name] - ref[name]).detach().abs().max()) <= 1e-10

    def test_unknown_variant_rejected(self, tiny_arch):
        params = fusion.init_params(tiny_arch, seed=0)
        task = random_task(tiny_arch, seed=0)
        with pytest.raises(fusion.ConfigError):
            fusion.run_inner(params, task, "MAML", 0.1)


class TestComposedGradients:
    def test_matches_finite_differences_both_orders_of_param_groups(self, tiny_arch):
        # spot check here (3 seeds, W + one conv); the acceptance suite
        # sweeps every coordinate over 10 seeds
        watched = ("cln.fc1.weight", "fen.conv5.weight", "att.fc0.bias")
        live = {name: False for name in watched}
        for seed in range(3):
            params = oracles.random_bundle(tiny_arch, seed=seed)
            task = random_task(tiny_arch, seed=seed, n_support=4, n_query=3)
            inner = fusion.inner_update_meml(params, task, 0.05, order="second")
            _, names, grads = fusion.composed_query_grads(params, inner, task.query)
            by_name = dict(zip(names, grads))
            for name in watched:
                fd = oracles.fd_gradient(
                    lambda p: oracles.composed_loss(p, task, 0.05), params, name
                )
                analytic = by_name[name]
                rel = oracles.relative_error(analytic, fd)
                assert rel <= 1e-4, (name, rel)
                live[name] |= float(analytic.abs().max()) > 1e-8
        # the check must not pass vacuously on a dead network
        assert all(live.values()), live

    def test_first_order_drops_trajectory_terms(self, tiny_arch):
        params = fusion.init_params(tiny_arch, seed=7).to_dtype(torch.float64)
        task = random_task(tiny_arch, seed=7, n_support=5, n_query=4)
        second = fusion.inner_update_meml(params, task, 0.1, order="second")
        first = fusion.inner_update_meml(params, task, 0.1, order="first")
        # same values either way
        for name in params.group_names("psi"):
            gap = (second[name] - first[name]).detach().abs().max()
            assert float(gap) <= 1e-12
        _, names2, grads2 = fusion.composed_query_grads(params, second, task.query)
        _, names1, grads1 = fusion.composed_query_grads(params, first, task.query)
        assert names1 == names2
        diff = max(
            float((a - b).detach().abs().max()) for a, b in zip(grads1, grads2)
        )
        assert diff > 1e-9  # the second-order correction is real

    def test_unused_parameters_get_zero_gradients(self, tiny_arch):
        params = fusion.init_params(tiny_arch, seed=8)
        task = random_task(tiny_arch, seed=8)
        inner = fusion.inner_update_meml(params, task, 0.0, order="first")
        loss, names, grads = fusion.composed_query_grads(params, inner, task.query)
        assert len(names) == len(grads)
        assert all(g.shape == params[n].shape for n, g in zip(names, grads))


class TestAdamState:
    def test_matches_torch_adam(self):
        gen = torch.Generator().manual_seed(0)
        param = torch.randn(6, generator=gen, dtype=torch.float64)
        grads = [torch.randn(6, generator=gen, dtype=torch.float64) for _ in range(12)]

        mine = param.clone()
        state = fusion.AdamState()
        theirs = param.clone().requires_grad_(True)
        opt = torch.optim.Adam([theirs], lr=0.02, betas=(0.9, 0.999), eps=1e-8)
        for g in grads:
            mine = state.update("p", mine, g, lr=0.02)
            theirs.grad = g.clone()
            opt.step()
            assert float((mine - theirs.detach()).detach().abs().max()) <= 1e-12

    def test_matches_reference_recurrence(self):
        gen = torch.Generator().manual_seed(1)
        param = torch.randn(4, dtype=torch.float64, generator=gen)
        grads = [torch.randn(4, dtype=torch.float64, generator=gen) for _ in range(5)]
        expected = oracles.adam_step_ref(param, grads, lr=0.1)
        state = fusion.AdamState()
        current = param.clone()
        for g, want in zip(grads, expected):
            current = state.update("x", current, g, lr=0.1)
            assert float((current - want).detach().abs().max()) <= 1e-12

    def test_reset_restarts_bias_correction(self):
        state = fusion.AdamState()
        p = torch.zeros(3, dtype=torch.float64)
        g = torch.ones(3, dtype=torch.float64)
        first = state.update("w", p, g, lr=0.1)
        state.update("w", first, g, lr=0.1)
        state.reset(["w"])
        restart = state.update("w", p, g, lr=0.1)
        assert torch.allclose(restart, first)

    def test_per_name_isolation(self):
        state = fusion.AdamState()
        g = torch.ones(2, dtype=torch.float64)
        state.update("a", torch.zeros(2, dtype=torch.float64), g, lr=0.1)
        fresh = state.update("b", torch.zeros(2, dtype=torch.float64), g, lr=0.1)
        # "b" starts its own bias-correction clock
        assert torch.allclose(fresh, torch.full((2,), -0.1, dtype=torch.float64))


class TestOuterUpdate:
    def test_moves_only_phi(self, tiny_arch):
        # live random draw: the training init leaves this tiny net with dead
        # ReLU paths whose conv gradients are exactly zero
        params = oracles.random_bundle(tiny_arch, seed=0, dtype=torch.float32)
        task = random_task(tiny_arch, seed=0)
        inner = fusion.inner_update_meml(params, task, 0.05)
        updated = fusion.outer_update(params, inner, task, outer_lr=0.01)
        changed = {
            n for n in params.names()
            if not torch.equal(updated[n].detach(), params[n].detach())
        }
        assert changed <= set(params.group_names("phi"))
        assert "cln.fc1.weight" in changed
        assert "fen.conv0.weight" in changed

    def test_zero_outer_lr_is_identity(self, tiny_arch):
        params = fusion.init_params(tiny_arch, seed=1)
        task = random_task(tiny_arch, seed=1)
        inner = fusion.inner_update_meml(params, task, 0.05)
        updated = fusion.outer_update(params, inner, task, outer_lr=0.0)
        for name in params.names():
            assert torch.equal(updated[name].detach(), params[name].detach())

    def test_loss_scale_zero_freezes_first_step(self, tiny_arch):
        # scaling the loss to zero zeroes the gradient, so a fresh Adam state
        # produces exactly no movement
        params = fusion.init_params(tiny_arch, seed=2)
        task = random_task(tiny_arch, seed=2)
        inner = fusion.inner_update_meml(params, task, 0.05)
        updated = fusion.outer_update(params, inner, task, outer_lr=0.01, loss_scale=0.0)
        for name in params.names():
            assert torch.equal(updated[name].detach(), params[name].detach())

    def test_outer_loss_recorded(self, tiny_arch):
        params = fusion.init_params(tiny_arch, seed=3)
        task = random_task(tiny_arch, seed=3)
        inner = fusion.inner_update_meml(params, task, 0.05)
        updated = fusion.outer_update(params, inner, task, outer_lr=0.01)
        assert updated.info["outer_loss"] > 0


class TestLossBalancing:
    def test_scales_loss(self):
        vec = fusion.compute_balancing_vector([4, 8, 12])
        loss = torch.tensor(2.0)
        assert float(fusion.apply_loss_balancing(loss, vec, 0)) == pytest.approx(2.0)
        assert float(fusion.apply_loss_balancing(loss, vec, 2)) == pytest.approx(0.0)


def small_training_setup(glyphs16, assignment16, variant="MEML", **cfg_kw):
    cfg = fusion.TrainingConfig(
        variant=variant, steps=cfg_kw.pop("steps", 8),
        inner_lr=0.05, outer_lr=1e-3,
        gradient_order=cfg_kw.pop("gradient_order", "first"),
        q_random=cfg_kw.pop("q_random", 4), seed=cfg_kw.pop("seed", 0), **cfg_kw,
    )
    arch = fusion.ArchConfig(
        image_size=16, conv_channels=4, feature_dim=8,
        num_classes=assignment16.k, strides=(2, 1, 2, 1, 1, 1),
    )
    return cfg, arch


class TestMetaTrain:
    def test_log_shape_and_determinism(self, glyphs16, assignment16):
        cfg, arch = small_training_setup(glyphs16, assignment16)
        params_a, log_a = fusion.meta_train(glyphs16, assignment16, cfg, arch)
        params_b, log_b = fusion.meta_train(glyphs16, assignment16, cfg, arch)
        assert len(log_a.outer_loss) == cfg.steps
        assert log_a.outer_loss == log_b.outer_loss
        assert log_a.cluster_ids == log_b.cluster_ids
        for name in params_a.names():
            assert torch.equal(params_a[name], params_b[name])
        usable = set(assignment16.usable_clusters().tolist())
        assert set(log_a.cluster_ids) <= usable

    def test_seed_changes_trajectory(self, glyphs16, assignment16):
        cfg_a, arch = small_training_setup(glyphs16, assignment16, seed=0)
        cfg_b, _ = small_training_setup(glyphs16, assignment16, seed=1)
        _, log_a = fusion.meta_train(glyphs16, assignment16, cfg_a, arch)
        _, log_b = fusion.meta_train(glyphs16, assignment16, cfg_b, arch)
        assert log_a.cluster_ids != log_b.cluster_ids or log_a.outer_loss != log_b.outer_loss

    def test_zero_learning_rates_are_end_to_end_noops(self, glyphs16, assignment16):
        cfg, arch = small_training_setup(
            glyphs16, assignment16, steps=5
        )
        cfg = fusion.TrainingConfig(
            variant="MEML", inner_lr=0.0, outer_lr=0.0, steps=5,
            gradient_order="first", q_random=4, seed=0,
        )
        params, _ = fusion.meta_train(glyphs16, assignment16, cfg, arch)
        init = fusion.init_params(arch, seed=0)
        for name in params.group_names("theta") + params.group_names("rho"):
            assert torch.equal(params[name].detach(), init[name].detach()), name

    def test_uniform_attention_reduces_meml_to_mean_pooling(
        self, glyphs16, assignment16, monkeypatch
    ):
        # with every attention tensor zeroed the logits are constant, so
        # attention pooling IS mean pooling and no gradient ever reaches the
        # attention stack; the two variants must then walk the same path
        import fusion.meta_learner as ml
        real_init = fusion.init_params

        def zero_rho_init(arch, seed):
            params = real_init(arch, seed)
            return params.replace({
                name: torch.zeros_like(params[name]).requires_grad_(True)
                for name in params.group_names("rho")
            })

        monkeypatch.setattr(ml, "init_params", zero_rho_init)
        logs = {}
        finals = {}
        for variant in ("MEML", "MEML-mean"):
            cfg, arch = small_training_setup(
                glyphs16, assignment16, variant=variant, steps=6,
                gradient_order="first",
            )
            params, log = fusion.meta_train(glyphs16, assignment16, cfg, arch)
            logs[variant] = log
            finals[variant] = params
        assert logs["MEML"].outer_loss == logs["MEML-mean"].outer_loss
        assert logs["MEML"].cluster_ids == logs["MEML-mean"].cluster_ids
        for name in finals["MEML"].names():
            assert torch.equal(
                finals["MEML"][name].detach(), finals["MEML-mean"][name].detach()
            ), name

    def test_all_equal_weights_match_unbalanced_run(self, glyphs16):
        # oracle labels give six equal-size classes, so the balancing vector
        # is all ones and must not perturb the trajectory
        cfg_off = fusion.TrainingConfig(
            variant="MEML", steps=6, inner_lr=0.05, outer_lr=1e-3,
            gradient_order="first", loss_balancing=False, seed=3,
            oracle_support=4, oracle_query_same=2, oracle_query_random=3,
        )
        cfg_on = fusion.TrainingConfig(
            variant="MEML", steps=6, inner_lr=0.05, outer_lr=1e-3,
            gradient_order="first", loss_balancing=True, seed=3,
            oracle_support=4, oracle_query_same=2, oracle_query_random=3,
        )
        arch = fusion.ArchConfig(
            image_size=16, conv_channels=4, feature_dim=8,
            num_classes=6, strides=(2, 1, 2, 1, 1, 1),
        )
        params_off, log_off = fusion.meta_train(glyphs16, None, cfg_off, arch)
        params_on, log_on = fusion.meta_train(glyphs16, None, cfg_on, arch)
        assert log_off.outer_loss == log_on.outer_loss
        for name in params_off.names():
            assert torch.equal(params_off[name], params_on[name])

    def test_oml_variant_runs_k_steps(self, glyphs16, assignment16):
        cfg, arch = small_training_setup(
            glyphs16, assignment16, variant="OML", steps=3
        )
        _, log = fusion.meta_train(glyphs16, assignment16, cfg, arch)
        for step, cluster in enumerate(log.cluster_ids):
            expected = fusion.support_size(int(assignment16.sizes[cluster]))
            assert log.inner_steps[step] == expected

    def test_reinit_w_flag(self, glyphs16, assignment16):
        cfg_on, arch = small_training_setup(glyphs16, assignment16, steps=4)
        cfg_off, _ = small_training_setup(
            glyphs16, assignment16, steps=4, reinit_w=False
        )
        _, log_on = fusion.meta_train(glyphs16, assignment16, cfg_on, arch)
        _, log_off = fusion.meta_train(glyphs16, assignment16, cfg_off, arch)
        # same tasks, different head trajectories
        assert log_on.cluster_ids == log_off.cluster_ids
        assert log_on.outer_loss != log_off.outer_loss

    def test_coreset_rehearsal_changes_queries_once_buffer_fills(
        self, glyphs16, assignment16
    ):
        cfg_off, arch = small_training_setup(glyphs16, assignment16, steps=6)
        cfg_on, _ = small_training_setup(
            glyphs16, assignment16, steps=6, rehearsal_train="coreset:32"
        )
        _, log_off = fusion.meta_train(glyphs16, assignment16, cfg_off, arch)
        _, log_on = fusion.meta_train(glyphs16, assignment16, cfg_on, arch)
        assert log_on.cluster_ids == log_off.cluster_ids  # draw streams align
        assert log_on.outer_loss[0] == log_off.outer_loss[0]  # empty buffer
        assert log_on.outer_loss[1:] != log_off.outer_loss[1:]

    def test_film_training_runs_and_updates_generator(self, glyphs16, assignment16):
        cfg, _ = small_training_setup(glyphs16, assignment16, steps=4)
        arch = fusion.ArchConfig(
            image_size=16, conv_channels=4, feature_dim=8,
            num_classes=assignment16.k, strides=(2, 1, 2, 1, 1, 1), film=True,
        )
        params, _ = fusion.meta_train(glyphs16, assignment16, cfg, arch)
        init = fusion.init_params(arch, seed=0)
        assert any(
            not torch.equal(params[n], init[n])
            for n in params.names() if n.startswith("film.")
        )
        # context is reset per task, so it ends at zero
        assert torch.equal(params["context"], torch.zeros(100))

    def test_step_errors_carry_step_number(self, glyphs16, assignment16):
        cfg, arch = small_training_setup(glyphs16, assignment16, q_random=10 ** 6)
        with pytest.raises(fusion.TaskError, match="meta-train step 0"):
            fusion.meta_train(glyphs16, assignment16, cfg, arch)

    def test_empty_task_pool_rejected(self, glyphs16):
        labels = np.zeros(len(glyphs16), dtype=np.int64)  # one giant cluster
        assignment = fusion.ClusterAssignment(
            pseudo_labels=labels, k=1, centroids=np.zeros((1, 2)), inertia=0.0
        )
        cfg = fusion.TrainingConfig(variant="MEML", steps=2, q_random=4)
        arch = fusion.ArchConfig(
            image_size=16, conv_channels=4, feature_dim=8,
            num_classes=2, strides=(2, 1, 2, 1, 1, 1),
        )
        # a single cluster leaves nothing to draw cross-cluster queries from
        with pytest.raises(fusion.FusionError):
            fusion.meta_train(glyphs16, assignment, cfg, arch)


class TestTrainLog:
    def test_csv_format(self, tmp_path):
        log = fusion.TrainLog()
        log.append(0.5, 12.25, cluster_id=3, n_inner=1)
        log.append(0.25, 8.5, cluster_id=1, n_inner=1)
        path = tmp_path / "trainlog.csv"
        log.to_csv(path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "step,cluster_id,outer_loss,wall_ms"
        assert lines[1] == "0,3,0.5,12.25"
        assert len(lines) == 3

    def test_mean_step_ms(self):
        log = fusion.TrainLog()
        log.append(1.0, 10.0, 0, 1)
        log.append(1.0, 30.0, 0, 1)
        assert log.mean_step_ms == pytest.approx(20.0)
