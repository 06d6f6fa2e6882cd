import dataclasses

import numpy as np
import pytest

from probmask import netcore
from probmask.data import synth_blobs
from probmask.masking import MaskSample, ProbVector, counter_rng
from probmask.trainer import (DivergenceError, TrainConfig, evaluate, finalize_mask, train,
                              train_supermask)

CFG = TrainConfig(k_f=0.3, T=6, t1=1, t2=4, batch_size=32, lr_s=0.03, seed=0)


@pytest.fixture(scope="module")
def blobs():
    full = synth_blobs(0, 60, 4, 8, 0.2)
    return full.subset(slice(0, 160)), full.subset(slice(160, None))


@pytest.fixture(scope="module")
def spec():
    return netcore.mlp([8, 16, 4])


class TestTrain:
    def test_zero_epochs(self, spec, blobs):
        cfg = dataclasses.replace(CFG, T=0, t1=0, t2=0)
        state, s, report = train(spec, cfg, blobs[0])
        assert report.records == []
        assert np.all(s.flat() == 1.0)
        init = netcore.kaiming_normal_init(spec, 0)
        for k in init.weights:
            assert state.weights[k].tobytes() == init.weights[k].tobytes()

    def test_feasible_every_iteration(self, spec, blobs):
        seen = []

        def audit(epoch, it, s, K):
            flat = s.flat()
            assert np.all(flat >= 0) and np.all(flat <= 1)
            assert flat.sum() <= K + 1e-6
            seen.append((epoch, K))

        _, s, report = train(spec, CFG, blobs[0], blobs[1], on_iteration=audit)
        assert len(seen) == 6 * 5
        Ks = [K for _, K in seen]
        assert all(b <= a for a, b in zip(Ks, Ks[1:]))
        n = spec.n_maskable
        for rec in report.records:
            if rec.epoch >= CFG.t2:
                assert rec.mean_s * n <= CFG.k_f * n + 1e-6
        assert s.flat().sum() <= CFG.k_f * n + 1e-6

    def test_report_shape(self, spec, blobs):
        _, _, report = train(spec, CFG, blobs[0], blobs[1])
        assert [r.epoch for r in report.records] == list(range(1, 7))
        assert report.records[0].tau == pytest.approx(0.97 * (1 - 1 / 6) + 0.03)
        assert report.records[-1].k == CFG.k_f
        assert 0.0 <= report.achieved_ratio <= 1.0
        assert report.final_mask.kind == "hard"

    def test_eval_every(self, spec, blobs):
        _, _, report = train(spec, dataclasses.replace(CFG, eval_every=4), blobs[0], blobs[1])
        accs = [r.acc for r in report.records]
        assert np.isnan(accs[0]) and not np.isnan(accs[3]) and not np.isnan(accs[5])

    def test_deterministic(self, spec, blobs, tmp_path):
        a = train(spec, CFG, blobs[0], blobs[1])
        b = train(spec, CFG, blobs[0], blobs[1])
        for k in a[0].weights:
            assert a[0].weights[k].tobytes() == b[0].weights[k].tobytes()
        assert a[1].flat().tobytes() == b[1].flat().tobytes()
        a[2].write_csv(tmp_path / "a.csv")
        b[2].write_csv(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        for k in a[2].final_mask.values:
            assert np.array_equal(a[2].final_mask.values[k], b[2].final_mask.values[k])

    def test_threads_do_not_change_result(self, spec, blobs, monkeypatch):
        cfg = dataclasses.replace(CFG, I=3, T=2, t1=0, t2=2)
        a = train(spec, cfg, blobs[0])
        monkeypatch.setenv("PROBMASK_THREADS", "3")
        b = train(spec, cfg, blobs[0])
        assert a[1].flat().tobytes() == b[1].flat().tobytes()

    def test_layerwise_budget_per_layer(self, spec, blobs):
        cfg = dataclasses.replace(CFG, constraint="layerwise")
        _, s, _ = train(spec, cfg, blobs[0])
        for seg in s.segments.values():
            assert seg.sum() <= CFG.k_f * seg.size + 1e-6

    def test_learns_blobs(self, spec, blobs):
        _, _, report = train(spec, dataclasses.replace(CFG, T=10, finalize="round"), blobs[0], blobs[1])
        assert report.records[-1].acc >= 0.9

    def test_divergence_guard(self, spec, blobs, tmp_path):
        init = netcore.kaiming_normal_init(spec, 0)
        init.weights["1.weight"][0, 0] = np.nan
        with pytest.raises(DivergenceError) as info:
            train(spec, CFG, blobs[0], init_state=init)
        assert info.value.epoch == 1 and info.value.iteration == 0
        info.value.dump(tmp_path / "d.npz")
        dumped = np.load(tmp_path / "d.npz")
        assert int(dumped["epoch"]) == 1 and "w/1.weight" in dumped.files

    def test_config_validation(self):
        for bad in ({"I": 0}, {"batch_size": 0}, {"mode": "x"}, {"constraint": "x"},
                    {"finalize": "x"}, {"t1": 5, "t2": 5}):
            with pytest.raises(ValueError):
                dataclasses.replace(CFG, **bad)


class TestSupermask:
    def test_weights_frozen(self, spec, blobs):
        cfg = dataclasses.replace(CFG, mode="supermask", k_f=0.5)
        state, _, _ = train(spec, cfg, blobs[0])
        init = netcore.kaiming_normal_init(spec, 0)
        for k in init.weights:
            assert state.weights[k].tobytes() == init.weights[k].tobytes()
        s, report = train_supermask(spec, cfg, blobs[0], blobs[1])
        assert len(report.records) == 6

    def test_requires_mode(self, spec, blobs):
        with pytest.raises(ValueError):
            train_supermask(spec, CFG, blobs[0])

    def test_full_budget_not_worse_than_dense(self, spec, blobs):
        cfg = dataclasses.replace(CFG, mode="supermask", k_f=1.0, finalize="round")
        _, _, report = train(spec, cfg, blobs[0], blobs[1])
        dense = evaluate(spec, netcore.kaiming_normal_init(spec, 0), None, blobs[1])
        assert report.records[-1].acc >= dense - 0.02


class TestFinalize:
    def test_binary_s_modes_agree(self):
        s = ProbVector({"a": np.array([0.0, 1.0, 1.0, 0.0]), "b": np.ones((2, 2))})
        r = finalize_mask(s, "round")
        m = finalize_mask(s, "sample", counter_rng(0))
        for k in s.segments:
            assert np.array_equal(r.values[k], s.segments[k])
            assert np.array_equal(m.values[k], s.segments[k])

    def test_sample_ratio(self):
        s = ProbVector({"a": np.full(10_000, 0.5)})
        ratio = finalize_mask(s, "sample", counter_rng(3)).remaining_ratio()
        assert 0.485 <= ratio <= 0.515

    def test_round_ignores_rng(self):
        s = ProbVector({"a": np.linspace(0, 1, 11)})
        a = finalize_mask(s, "round", counter_rng(0)).values["a"]
        b = finalize_mask(s, "round", counter_rng(1)).values["a"]
        assert np.array_equal(a, b)
        assert a.tolist() == [0.0] * 5 + [1.0] * 6

    def test_sample_needs_rng(self):
        with pytest.raises(ValueError):
            finalize_mask(ProbVector({"a": np.ones(2)}), "sample")


class TestEvaluate:
    def test_chance_band(self):
        ds = synth_blobs(5, 100, 10, 20, 0.3)
        spec = netcore.mlp([20, 32, 10])
        accs = [evaluate(spec, netcore.kaiming_normal_init(spec, seed), None, ds)
                for seed in range(20)]
        assert 0.05 <= np.median(accs) <= 0.20

    def test_zero_mask_bias_free(self):
        ds = synth_blobs(5, 50, 10, 20, 0.3)
        spec = netcore.mlp([20, 16, 10], bias=False)
        zero = MaskSample({k: np.zeros(v) for k, v in spec.mask_shapes().items()}, "hard")
        assert evaluate(spec, netcore.kaiming_normal_init(spec, 0), zero, ds) == pytest.approx(0.1)

    def test_ones_mask_is_dense(self, spec, blobs):
        state = netcore.kaiming_normal_init(spec, 2)
        ones = MaskSample({k: np.ones(v) for k, v in spec.mask_shapes().items()}, "hard")
        assert evaluate(spec, state, ones, blobs[1]) == evaluate(spec, state, None, blobs[1])

    def test_soft_mask_rejected(self, spec, blobs):
        soft = MaskSample({k: np.ones(v) for k, v in spec.mask_shapes().items()}, "soft")
        with pytest.raises(ValueError):
            evaluate(spec, netcore.kaiming_normal_init(spec, 0), soft, blobs[1])
