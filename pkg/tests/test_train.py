"""Training loop: optimizer algebra, determinism, convergence direction,
abort behavior, and the 8-row ablation table."""

import numpy as np
import pytest

from driftdet.dbcasa import DbcasaConfig
from driftdet.dbcasa import param_count as dbcasa_param_count
from driftdet.errors import ConfigurationError, NumericalError
from driftdet.model import ModelToggles, build_model
from driftdet.synth import SynthSceneSpec, generate_dataset
from driftdet.tensor import ParamStore, Tensor
from driftdet.train import (TOGGLE_ORDER, SgdState, TrainConfig, ablate,
                            evaluate, run_single, train)

ALL_ON = ModelToggles(dbcasa=True, fsfm=True, sfg=True)
SMALL = dict(channels=(8, 16, 24, 32), image_size=32, num_classes=3)


def small_data(seed, n_train=12, n_val=4):
    spec = SynthSceneSpec(image_size=32, seed=seed)
    return (generate_dataset(spec, n_train),
            generate_dataset(spec, n_val, offset=n_train))


class TestTrainConfig:
    def test_defaults_mirror_reference_settings(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 0.01
        assert cfg.momentum == 0.937
        assert cfg.weight_decay == 0.0005
        assert cfg.epochs == 200

    @pytest.mark.parametrize("bad", [
        dict(learning_rate=0.0), dict(learning_rate=-1), dict(momentum=1.0),
        dict(momentum=-0.1), dict(weight_decay=-1e-4), dict(epochs=0),
        dict(batch_size=0), dict(stop_at_ap50=1.5), dict(clip_norm=-1),
        dict(lr_final_frac=0.0),
    ])
    def test_invalid_rejected(self, bad):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)

    def test_lr_schedule_endpoints(self):
        cfg = TrainConfig(epochs=11, learning_rate=0.01, lr_final_frac=0.1)
        assert cfg.lr_at(0) == pytest.approx(0.01)
        assert cfg.lr_at(10) == pytest.approx(0.001)
        assert cfg.lr_at(5) == pytest.approx(0.0055)


class TestSgdStep:
    def make_param(self, value, grad):
        store = ParamStore()
        t = store.add("p", Tensor(np.full((1, 1, 1, 1), value, dtype=np.float32)))
        t.grad = np.full((1, 1, 1, 1), grad, dtype=np.float32)
        return store, t

    def test_single_step_formula(self):
        store, t = self.make_param(2.0, 1.0)
        state = SgdState(store)
        state.step(store, lr=0.1, momentum=0.9, weight_decay=0.01)
        # v = 1; p = 2 - 0.1*1 - 0.1*0.01*2
        assert t.data[0, 0, 0, 0] == pytest.approx(2 - 0.1 - 0.002, rel=1e-6)

    def test_momentum_accumulates(self):
        store, t = self.make_param(0.0, 1.0)
        state = SgdState(store)
        state.step(store, lr=1.0, momentum=0.5, weight_decay=0.0)
        t.grad = np.full((1, 1, 1, 1), 1.0, dtype=np.float32)
        state.step(store, lr=1.0, momentum=0.5, weight_decay=0.0)
        # v1 = 1, v2 = 0.5 + 1 = 1.5; p = -(1 + 1.5)
        assert t.data[0, 0, 0, 0] == pytest.approx(-2.5, rel=1e-6)

    def test_clip_caps_global_norm(self):
        store, t = self.make_param(0.0, 100.0)
        state = SgdState(store)
        state.step(store, lr=1.0, momentum=0.0, weight_decay=0.0, clip_norm=2.0)
        assert abs(t.data[0, 0, 0, 0]) == pytest.approx(2.0, rel=1e-6)

    def test_zero_lr_is_identity(self):
        store, t = self.make_param(3.0, 7.0)
        state = SgdState(store)
        before = t.data.copy()
        for _ in range(5):
            t.grad = np.full((1, 1, 1, 1), 7.0, dtype=np.float32)
            state.step(store, lr=0.0, momentum=0.9, weight_decay=0.0005)
        np.testing.assert_array_equal(t.data, before)


class TestTrainLoop:
    def test_same_seed_identical_losses(self):
        train_data, _ = small_data(0)
        cfg = TrainConfig(epochs=2, seed=5, batch_size=4)
        runs = []
        for _ in range(2):
            model, store = build_model(cfg.toggles, seed=cfg.seed, **SMALL)
            res = train(model, store, train_data, cfg)
            runs.append((res.epoch_losses, store.state()))
        assert runs[0][0] == runs[1][0]
        for name in runs[0][1]:
            np.testing.assert_array_equal(runs[0][1][name], runs[1][1][name])

    def test_zero_lr_leaves_parameters_unchanged(self):
        train_data, _ = small_data(1)
        cfg = TrainConfig(epochs=2, seed=0, batch_size=4)
        cfg.learning_rate = 0.0  # past validation: the loop itself must no-op
        model, store = build_model(cfg.toggles, seed=0, **SMALL)
        before = {n: store[n].data.copy() for n in store.names()
                  if store.is_learnable(n)}
        train(model, store, train_data, cfg)
        for name, old in before.items():
            np.testing.assert_array_equal(store[name].data, old)

    def test_loss_decreases_by_epoch_30(self):
        spec = SynthSceneSpec(image_size=32, seed=2)
        train_data = generate_dataset(spec, 24)
        cfg = TrainConfig(epochs=30, seed=0, batch_size=8)
        model, store = build_model(cfg.toggles, seed=0, **SMALL)
        res = train(model, store, train_data, cfg)
        assert res.epoch_losses[29] < res.epoch_losses[0]

    def test_nan_parameter_aborts_with_diagnostics(self):
        train_data, _ = small_data(3)
        cfg = TrainConfig(epochs=1, seed=0, batch_size=4)
        model, store = build_model(cfg.toggles, seed=0, **SMALL)
        poisoned = store["stem.w"].data.copy()
        poisoned[0, 0, 0, 0] = np.nan
        store["stem.w"].set_data(poisoned)
        with pytest.raises(NumericalError, match="epoch 0"):
            train(model, store, train_data, cfg)

    def test_empty_dataset_rejected(self):
        cfg = TrainConfig(epochs=1)
        model, store = build_model(cfg.toggles, seed=0, **SMALL)
        with pytest.raises(ConfigurationError):
            train(model, store, [], cfg)

    def test_final_report_always_produced(self):
        train_data, val_data = small_data(4)
        cfg = TrainConfig(epochs=2, seed=0, batch_size=4)
        model, store = build_model(cfg.toggles, seed=0, **SMALL)
        res = train(model, store, train_data, cfg, val_data=val_data)
        assert len(res.reports) == 1
        assert res.reports[-1].epochs == 2
        assert res.reports[-1].param_count == store.total_learnable()

    def test_eval_cadence_and_early_stop_fields(self):
        train_data, val_data = small_data(5)
        cfg = TrainConfig(epochs=4, seed=0, batch_size=4, eval_every=2)
        model, store = build_model(cfg.toggles, seed=0, **SMALL)
        res = train(model, store, train_data, cfg, val_data=val_data)
        assert [r.epochs for r in res.reports] == [2, 4]

    def test_split_schedule_matches_uninterrupted(self):
        train_data, _ = small_data(6)
        cfg = TrainConfig(epochs=4, seed=9, batch_size=4)

        model_a, store_a = build_model(cfg.toggles, seed=cfg.seed, **SMALL)
        res_a = train(model_a, store_a, train_data, cfg)

        model_c, store_c = build_model(cfg.toggles, seed=cfg.seed, **SMALL)
        state_c = SgdState(store_c)
        part1 = train(model_c, store_c, train_data, cfg, end_epoch=2,
                      state=state_c)
        part2 = train(model_c, store_c, train_data, cfg, start_epoch=2,
                      state=state_c)
        assert res_a.epoch_losses == part1.epoch_losses + part2.epoch_losses
        for name in store_a.names():
            np.testing.assert_array_equal(store_a[name].data, store_c[name].data)


class TestAblate:
    def test_eight_rows_in_binary_order(self):
        assert len(TOGGLE_ORDER) == 8
        assert TOGGLE_ORDER[0] == ModelToggles(False, False, False)
        assert TOGGLE_ORDER[7] == ModelToggles(True, True, True)
        assert TOGGLE_ORDER[4] == ModelToggles(True, False, False)

    def test_table_structure_and_param_deltas(self):
        train_data, val_data = small_data(7, n_train=8, n_val=4)
        cfg = TrainConfig(epochs=1, seed=0, batch_size=8)
        rows = ablate(train_data, val_data, cfg, **SMALL)
        assert len(rows) == 8
        base = {r.toggles: r.report.param_count for r in rows}
        attn_delta = dbcasa_param_count(DbcasaConfig(SMALL["channels"][-1]))
        for togs, count in base.items():
            expect = base[ModelToggles(False, False, False)]
            if togs.dbcasa:
                expect += attn_delta
            assert count == expect, f"row {togs.label()}"

    def test_all_off_row_bit_matches_standalone(self):
        train_data, val_data = small_data(8, n_train=8, n_val=4)
        cfg = TrainConfig(epochs=1, seed=3, batch_size=8)
        rows = ablate(train_data, val_data, cfg, **SMALL)
        off_cfg = TrainConfig(epochs=1, seed=3, batch_size=8,
                              toggles=ModelToggles(False, False, False))
        res, _, _ = run_single(train_data, val_data, off_cfg, **SMALL)
        row = rows[0]
        assert row.toggles == ModelToggles(False, False, False)
        assert row.final_loss == res.epoch_losses[-1]
        assert row.report == res.reports[-1]


class TestEvaluate:
    def test_report_fields(self):
        _, val_data = small_data(9, n_train=1, n_val=3)
        model, store = build_model(ALL_ON, seed=0, **SMALL)
        rep = evaluate(model, val_data, epochs=7, seed=5)
        assert rep.param_count == store.total_learnable()
        assert rep.epochs == 7 and rep.seed == 5
        assert 0 <= rep.ap50 <= 1
