"""Stage toggles, train-step mechanics, collapse diagnostics, and the
run/resume loop on a 24-image dataset."""

import numpy as np
import pytest
import torch

from dira.config import ExperimentConfig
from dira.pretrain import (DiraModel, DivergenceError, LossToggles,
                           collapse_diagnostics, effective_toggles,
                           init_train_state, load_train_checkpoint,
                           run_pretraining, stage_label, train_step,
                           write_metrics_csv, _epoch_batches)


def tiny_config(dataset_dir=None, method="simsiam", ablation="dira", out=None,
                seed=0, s1=1, s2=1, s3=1, **method_kw):
    return ExperimentConfig.from_dict({
        "seed": seed,
        "output_dir": str(out) if out else None,
        "ablation": ablation,
        "dataset": {"path": str(dataset_dir) if dataset_dir else None, "val_fraction": 0.2},
        "augment": {"out_size": 32},
        "model": {"input_size": 32, "stage_channels": [4, 8], "stage_strides": [2, 2],
                  "feature_dim": 16, "projection_dim": 8, "projector_hidden": 16,
                  "predictor_hidden": 4, "classifier_hidden": 16,
                  "groupnorm_groups": 4, "adversary_channels": [4, 8, 16]},
        "method": {"name": method, "queue_size": 32, **method_kw},
        "schedule": {"stage1_epochs": s1, "stage2_epochs": s2, "stage3_epochs": s3,
                     "batch_size": 8},
    })


def rand_batch(n=4, size=32, seed=0, pseudo_classes=None):
    g = torch.Generator().manual_seed(seed)
    batch = {key: torch.rand(n, 1, size, size, generator=g)
             for key in ("view1", "view2", "target1")}
    if pseudo_classes:
        batch["pseudo"] = torch.arange(n) % pseudo_classes
    return batch


class TestToggles:
    def test_stage_schedule_unmasked(self):
        assert effective_toggles(1, "dira") == LossToggles(False, False)
        assert effective_toggles(2, "dira") == LossToggles(True, False)
        assert effective_toggles(3, "dira") == LossToggles(True, True)

    def test_ablation_masks(self):
        for stage in (1, 2, 3):
            assert effective_toggles(stage, "di") == LossToggles(False, False)
        assert effective_toggles(3, "dir") == LossToggles(True, False)

    def test_stage_label(self):
        assert stage_label(LossToggles(False, False)) == "di"
        assert stage_label(LossToggles(True, False)) == "dir"
        assert stage_label(LossToggles(True, True)) == "dira"


class TestCollapseDiagnostics:
    def test_fully_collapsed(self):
        z = np.tile([0.6, 0.8, 0.0], (10, 1))
        std, erank = collapse_diagnostics(z)
        assert std == pytest.approx(0.0, abs=1e-12)
        assert erank == pytest.approx(1.0)

    def test_two_orthogonal_directions(self):
        # second moment diag(1/2, 1/2, 0): entropy log 2, erank 2;
        # each of the first two dims has values {1, 0} so std 0.5
        z = np.array([[1.0, 0, 0], [0, 1.0, 0]] * 5)
        std, erank = collapse_diagnostics(z)
        assert erank == pytest.approx(2.0, abs=1e-12)
        assert std == pytest.approx((0.5 + 0.5 + 0.0) / 3)

    def test_identity_moment_maximal_rank(self):
        z = np.eye(6)
        _, erank = collapse_diagnostics(np.vstack([z, -z]))
        assert erank == pytest.approx(6.0, abs=1e-12)

    def test_matches_svd_route(self, rng):
        # independent oracle: eigenvalues of z^T z / B are sigma^2 / B from
        # the SVD of z itself
        z = rng.standard_normal((64, 12))
        _, erank = collapse_diagnostics(z)
        lam = np.linalg.svd(z, compute_uv=False) ** 2 / z.shape[0]
        p = lam / lam.sum()
        expected = float(np.exp(-(p * np.log(p)).sum()))
        assert erank == pytest.approx(expected, rel=1e-9)

    def test_random_unit_vectors_spread(self, rng):
        z = rng.standard_normal((256, 32))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        std, erank = collapse_diagnostics(z)
        assert std == pytest.approx(1 / np.sqrt(32), rel=0.05)
        assert erank > 25.0

    def test_bad_shape(self):
        with pytest.raises(ValueError, match="batch, dim"):
            collapse_diagnostics(np.zeros(5))


class TestModelConstruction:
    def test_moco_has_momentum_twins(self):
        cfg = tiny_config(method="moco")
        model = DiraModel(cfg.model, cfg.method)
        assert model.target_encoder is not None and model.target_projector is not None
        for p in model.target_encoder.parameters():
            assert not p.requires_grad
        for (o, t) in model.momentum_pairs():
            for p_o, p_t in zip(o.parameters(), t.parameters()):
                assert torch.equal(p_o, p_t)

    def test_simsiam_heads(self):
        cfg = tiny_config(method="simsiam")
        model = DiraModel(cfg.model, cfg.method)
        assert model.predictor is not None and model.target_encoder is None
        assert model.projector.out_dim == 8

    def test_classwise_needs_class_count(self):
        cfg = tiny_config(method="classwise")
        with pytest.raises(ValueError, match="n_pseudo_classes"):
            DiraModel(cfg.model, cfg.method)
        model = DiraModel(cfg.model, cfg.method, n_pseudo_classes=4)
        assert model.classifier.out_dim == 4

    def test_twins_stay_out_of_optimizer(self):
        state = init_train_state(tiny_config(method="moco"))
        opt_params = {id(p) for group in state.opt_main.param_groups for p in group["params"]}
        for p in state.model.target_encoder.parameters():
            assert id(p) not in opt_params
        for p in state.model.adversary.parameters():
            assert id(p) not in opt_params


class TestInitTrainState:
    def test_moco_queue_prefilled_with_unit_rows(self):
        state = init_train_state(tiny_config(method="moco"))
        assert state.queue.fill == 32
        norms = state.queue.tensor().norm(dim=1)
        assert torch.allclose(norms, torch.ones(32), atol=1e-5)

    def test_non_moco_has_no_queue(self):
        assert init_train_state(tiny_config(method="simsiam")).queue is None

    def test_seed_controls_init(self):
        a = init_train_state(tiny_config(method="simsiam", seed=1))
        b = init_train_state(tiny_config(method="simsiam", seed=1))
        c = init_train_state(tiny_config(method="simsiam", seed=2))
        pa, pb, pc = (next(iter(s.model.encoder.parameters())) for s in (a, b, c))
        assert torch.equal(pa, pb)
        assert not torch.equal(pa, pc)

    def test_optimizer_families_follow_method(self):
        assert isinstance(init_train_state(tiny_config(method="moco")).opt_main,
                          torch.optim.SGD)
        assert isinstance(init_train_state(tiny_config(method="barlow")).opt_main,
                          torch.optim.Adam)


class TestTrainStep:
    def test_disabled_branches_untouched(self):
        state = init_train_state(tiny_config(method="simsiam"))
        dec_before = [p.clone() for p in state.model.decoder.parameters()]
        adv_before = [p.clone() for p in state.model.adversary.parameters()]
        bundle = train_step(state, rand_batch(), LossToggles(False, False))
        assert bundle.res == 0.0 and bundle.adv_gen == 0.0 and bundle.adv_disc == 0.0
        assert bundle.dis != 0.0
        for p, before in zip(state.model.decoder.parameters(), dec_before):
            assert torch.equal(p, before)
            assert p.grad is None
        for p, before in zip(state.model.adversary.parameters(), adv_before):
            assert torch.equal(p, before)

    def test_restoration_branch_updates_decoder(self):
        state = init_train_state(tiny_config(method="simsiam"))
        dec_before = [p.clone() for p in state.model.decoder.parameters()]
        adv_before = [p.clone() for p in state.model.adversary.parameters()]
        bundle = train_step(state, rand_batch(), LossToggles(True, False))
        assert bundle.res > 0.0 and bundle.adv_gen == 0.0
        assert any(not torch.equal(p, b) for p, b in
                   zip(state.model.decoder.parameters(), dec_before))
        for p, before in zip(state.model.adversary.parameters(), adv_before):
            assert torch.equal(p, before)

    def test_adversary_branch_updates_critic(self):
        state = init_train_state(tiny_config(method="simsiam"))
        adv_before = [p.clone() for p in state.model.adversary.parameters()]
        bundle = train_step(state, rand_batch(), LossToggles(True, True))
        assert bundle.adv_gen != 0.0 and bundle.adv_disc > 0.0
        assert any(not torch.equal(p, b) for p, b in
                   zip(state.model.adversary.parameters(), adv_before))

    def test_adversary_requires_restoration(self):
        state = init_train_state(tiny_config(method="simsiam"))
        with pytest.raises(ValueError, match="restoration"):
            train_step(state, rand_batch(), LossToggles(False, True))

    def test_moco_ema_is_exact(self):
        # after the step: xi' = m*xi + (1-m)*theta', with theta' the
        # already-updated online weights, evaluated in float32 exactly
        state = init_train_state(tiny_config(method="moco"))
        m = state.config.method.ema_momentum
        before = {name: p.clone() for name, p in state.model.target_encoder.named_parameters()}
        train_step(state, rand_batch(), LossToggles(False, False))
        online = dict(state.model.encoder.named_parameters())
        for name, p_t in state.model.target_encoder.named_parameters():
            expected = before[name] * m + online[name] * (1.0 - m)
            assert torch.equal(p_t, expected)

    def test_moco_enqueues_target_projections(self):
        import copy
        state = init_train_state(tiny_config(method="moco"))
        frozen_tgt_enc = copy.deepcopy(state.model.target_encoder)
        frozen_tgt_proj = copy.deepcopy(state.model.target_projector)
        batch = rand_batch(n=4)
        ptr_before = state.queue.state()["ptr"]
        train_step(state, batch, LossToggles(False, False))
        qs = state.queue.state()
        assert qs["ptr"] == (ptr_before + 4) % 32
        assert qs["fill"] == 32
        with torch.no_grad():
            y2 = frozen_tgt_enc(batch["view2"]).y
            z2 = torch.nn.functional.normalize(frozen_tgt_proj(y2), dim=1, eps=1e-12)
        assert torch.equal(state.queue.tensor()[-4:], z2)

    def test_classwise_step(self):
        state = init_train_state(tiny_config(method="classwise"), n_pseudo_classes=4)
        bundle = train_step(state, rand_batch(pseudo_classes=4), LossToggles(False, False))
        assert bundle.dis > 0.0

    def test_nonfinite_loss_raises(self):
        state = init_train_state(tiny_config(method="simsiam"))
        batch = rand_batch()
        batch["view1"][0, 0, 0, 0] = float("nan")
        with pytest.raises(DivergenceError, match="non-finite"):
            train_step(state, batch, LossToggles(False, False))

    def test_weighted_total(self):
        state = init_train_state(tiny_config(method="simsiam"))
        bundle = train_step(state, rand_batch(), LossToggles(True, True))
        lam = state.config.lambdas
        assert bundle.total == pytest.approx(
            lam.dis * bundle.dis + lam.res * bundle.res + lam.adv * bundle.adv_gen, rel=1e-6)


class TestEpochBatches:
    def test_partition_and_order_determinism(self):
        idx = np.arange(20)
        a = _epoch_batches(idx, 8, seed=3, epoch=1)
        b = _epoch_batches(idx, 8, seed=3, epoch=1)
        c = _epoch_batches(idx, 8, seed=3, epoch=2)
        assert [x.tolist() for x in a] == [x.tolist() for x in b]
        assert [x.tolist() for x in a] != [x.tolist() for x in c]
        assert sorted(np.concatenate(a).tolist()) == list(range(20))
        assert [len(x) for x in a] == [8, 8, 4]

    def test_singleton_leftover_dropped(self):
        batches = _epoch_batches(np.arange(9), 4, seed=0, epoch=0)
        assert [len(b) for b in batches] == [4, 4]


def test_write_metrics_csv(tmp_path):
    rows = [{"epoch": 0, "stage": "di", "loss_dis": 1.25, "loss_res": 0.0,
             "loss_adv_gen": 0.0, "loss_adv_disc": 0.0, "loss_total": 1.25,
             "val_loss": 1.5, "per_dim_std": 0.125, "effective_rank": 3.0,
             "wall_seconds": 0.0}]
    write_metrics_csv(tmp_path / "m.csv", rows)
    text = (tmp_path / "m.csv").read_text()
    lines = text.splitlines()
    assert lines[0] == ("epoch,stage,loss_dis,loss_res,loss_adv_gen,loss_adv_disc,"
                        "loss_total,val_loss,per_dim_std,effective_rank,wall_seconds")
    assert lines[1] == "0,di,1.25,0,0,0,1.25,1.5,0.125,3,0"


class TestRunPretraining:
    def test_staged_run_layout(self, tiny_dataset, tmp_path):
        root, _ = tiny_dataset
        cfg = tiny_config(root, method="simsiam", out=tmp_path / "run")
        best = run_pretraining(cfg)
        assert best == tmp_path / "run" / "checkpoints" / "best"
        assert (tmp_path / "run" / "checkpoints" / "last").is_dir()
        assert (tmp_path / "run" / "config.effective.json").is_file()
        text = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
        assert len(text) == 4
        stages = [line.split(",")[1] for line in text[1:]]
        assert stages == ["di", "dir", "dira"]

    def test_ablation_di_zeroes_other_losses(self, tiny_dataset, tmp_path):
        root, _ = tiny_dataset
        cfg = tiny_config(root, method="simsiam", ablation="di",
                          out=tmp_path / "run")
        run_pretraining(cfg)
        lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
        for line in lines[1:]:
            parts = line.split(",")
            assert parts[1] == "di"
            assert parts[3] == "0" and parts[4] == "0" and parts[5] == "0"

    def test_resume_reproduces_straight_run(self, tiny_dataset, tmp_path):
        root, _ = tiny_dataset
        cfg_a = tiny_config(root, method="moco", out=tmp_path / "a")
        run_pretraining(cfg_a)
        cfg_b = tiny_config(root, method="moco", out=tmp_path / "b")
        run_pretraining(cfg_b, stop_after_epoch=1)
        assert len((tmp_path / "b" / "metrics.csv").read_text().splitlines()) == 2
        run_pretraining(cfg_b, resume_from=tmp_path / "b" / "checkpoints" / "last")
        # bit-identical training trajectory after the interruption
        assert ((tmp_path / "a" / "metrics.csv").read_bytes()
                == (tmp_path / "b" / "metrics.csv").read_bytes())

    def test_resume_refuses_config_mismatch(self, tiny_dataset, tmp_path):
        root, _ = tiny_dataset
        cfg = tiny_config(root, method="simsiam", out=tmp_path / "run")
        run_pretraining(cfg, stop_after_epoch=1)
        other = tiny_config(root, method="simsiam", out=tmp_path / "run", seed=9)
        with pytest.raises(ValueError, match="refusing to resume"):
            load_train_checkpoint(tmp_path / "run" / "checkpoints" / "last", other)

    def test_best_checkpoint_is_model_kind(self, tiny_dataset, tmp_path):
        from dira import checkpoints
        root, _ = tiny_dataset
        cfg = tiny_config(root, method="simsiam", out=tmp_path / "run",
                          s1=1, s2=0, s3=0)
        best = run_pretraining(cfg)
        _, meta = checkpoints.load_checkpoint(best)
        assert meta["kind"] == "model"
        assert meta["stage"] == "di"
