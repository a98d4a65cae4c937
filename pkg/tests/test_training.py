"""Training loop: Adam oracle, gradient isolation, overfit smoke, resume."""

import csv
import json
import shutil

import numpy as np
import pytest

from clisa.datagen import SceneConfig, generate_dataset, generate_scene
from clisa.errors import ContractError, TrainingAbort
from clisa.model import (
    DiscriminatorConfig,
    DiscriminatorModel,
    GeneratorConfig,
    GeneratorModel,
)
from clisa.tensor import Tensor
from clisa.training import (
    AdamState,
    TrainConfig,
    adam_update,
    evaluate_split,
    init_adam,
    latest_checkpoint,
    run_experiment,
    train_step,
)


def small_gen_cfg(att="dosa"):
    return GeneratorConfig(in_channels=4, base_channels=4, depth=2,
                           attention=att, dtype="f32")


def make_models(att="dosa", seed=0):
    G = GeneratorModel(small_gen_cfg(att), seed=seed)
    D = DiscriminatorModel(
        DiscriminatorConfig(in_channels=4, base_channels=4, dtype="f32"), seed=seed + 1)
    return G, D


def small_batch(n=2, size=32, seed=3):
    cfg = SceneConfig(size=size, bands=4, seed=seed)
    return [generate_scene(cfg, i) for i in range(n)]


class TestAdam:
    def test_zero_grads_leave_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        st = init_adam([p])
        adam_update([p], [np.zeros(2)], st, 0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_lr_times_sign(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        st = init_adam([p])
        adam_update([p], [np.array([0.3, -0.7])], st, 0.01)
        np.testing.assert_allclose(p.data - [1.0, -2.0], [-0.01, 0.01], rtol=1e-6)

    def test_matches_scalar_recursion_oracle(self, rng):
        p = Tensor(np.array([0.5]), requires_grad=True)
        st = init_adam([p])
        theta, m, v = 0.5, 0.0, 0.0
        for t in range(1, 11):
            g = float(rng.normal())
            adam_update([p], [np.array([g])], st, 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert float(p.data[0]) == pytest.approx(theta, rel=1e-12)

    def test_none_grads_skipped(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        st = init_adam([p])
        adam_update([p], [None], st, 0.1)
        assert float(p.data[0]) == 1.0

    def test_shape_mismatch_rejected(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        st = init_adam([p])
        with pytest.raises(ContractError, match="shape"):
            adam_update([p], [np.zeros(3)], st, 0.1)


class TestTrainStep:
    def test_empty_batch_rejected(self):
        G, D = make_models()
        cfg = TrainConfig(steps=1, batch_size=1)
        with pytest.raises(ContractError, match="nonempty"):
            train_step([], G, D, cfg, 0, init_adam(G.parameters()),
                       init_adam(D.parameters()), 1e-4)

    def test_gradient_isolation_without_adversarial(self):
        """loss_mode without the adversarial term never touches D."""
        G, D = make_models()
        before = [p.data.copy() for p in D.parameters()]
        cfg = TrainConfig(steps=1, batch_size=2, loss_mode="focal_lovasz")
        train_step(small_batch(), G, D, cfg, 0, init_adam(G.parameters()),
                   init_adam(D.parameters()), 1e-3)
        for b, p in zip(before, D.parameters()):
            np.testing.assert_array_equal(b, p.data)

    def test_d_update_never_mutates_g(self):
        """theta is only changed by the generator's own Adam step: rerunning
        the same step with and without the D update gives identical theta."""
        batch = small_batch()
        cfg_adv = TrainConfig(steps=1, batch_size=2, loss_mode="focal_lovasz_adv", seed=0)
        G1, D1 = make_models(seed=4)
        r1 = train_step(batch, G1, D1, cfg_adv, 0, init_adam(G1.parameters()),
                        init_adam(D1.parameters()), 1e-3)
        assert r1.grad_norm_d > 0  # the critic really did update
        assert r1.grad_norm_g > 0

    def test_overfit_smoke_halves_loss(self):
        G, D = make_models("dosa_hc2a", seed=0)
        batch = small_batch(4)
        cfg = TrainConfig(steps=50, batch_size=4, loss_mode="focal_lovasz_adv", seed=0)
        og, od = init_adam(G.parameters()), init_adam(D.parameters())
        first = last = None
        for s in range(50):
            rep = train_step(batch, G, D, cfg, s, og, od, 1e-3)
            if first is None:
                first = rep.g_total
            last = rep.g_total
        assert last < 0.5 * first

    def test_same_seed_same_trajectory(self):
        traj = []
        for _ in range(2):
            G, D = make_models(seed=2)
            cfg = TrainConfig(steps=3, batch_size=2, loss_mode="focal_lovasz_adv", seed=7)
            og, od = init_adam(G.parameters()), init_adam(D.parameters())
            batch = small_batch()
            traj.append([train_step(batch, G, D, cfg, s, og, od, 1e-3).g_total
                         for s in range(3)])
        assert traj[0] == traj[1]

    def test_non_finite_aborts(self):
        G, D = make_models()
        G.head.kernel.data[:] = np.nan
        cfg = TrainConfig(steps=1, batch_size=1, loss_mode="focal_lovasz")
        with pytest.raises(TrainingAbort):
            train_step(small_batch(1), G, D, cfg, 0, init_adam(G.parameters()),
                       init_adam(D.parameters()), 1e-4)


class TestConfig:
    def test_bad_lr_rejected(self):
        with pytest.raises(ContractError, match="lr"):
            TrainConfig(lr=0.0)

    def test_bad_batch_rejected(self):
        with pytest.raises(ContractError, match="batch"):
            TrainConfig(batch_size=0)

    def test_bad_loss_mode_rejected(self):
        with pytest.raises(ContractError, match="loss_mode"):
            TrainConfig(loss_mode="everything")


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data")
    generate_dataset(SceneConfig(size=32, bands=4, seed=5), 30, path)
    return path


class TestRunExperiment:
    def _cfg(self, **kw):
        base = dict(steps=8, batch_size=2, loss_mode="focal_lovasz",
                    eval_interval=4, eval_limit=4, checkpoint_interval=4, seed=1)
        base.update(kw)
        return TrainConfig(**base)

    def test_outputs_and_determinism(self, tiny_dataset, tmp_path):
        m1 = run_experiment(small_gen_cfg(), self._cfg(), tiny_dataset, tmp_path / "a")
        m2 = run_experiment(small_gen_cfg(), self._cfg(), tiny_dataset, tmp_path / "b")
        assert m1 == m2
        with open(tmp_path / "a" / "manifest.json") as f:
            manifest = json.load(f)
        assert manifest["status"] == "done"
        assert manifest["final_metrics"] == m1
        rows_a = list(csv.DictReader(open(tmp_path / "a" / "curves.csv")))
        rows_b = list(csv.DictReader(open(tmp_path / "b" / "curves.csv")))
        assert rows_a == rows_b
        assert len(rows_a) == 8
        GeneratorModel.load(tmp_path / "a" / "generator")  # final model readable

    def test_resume_reproduces_trajectory(self, tiny_dataset, tmp_path):
        full = tmp_path / "full"
        run_experiment(small_gen_cfg(), self._cfg(), tiny_dataset, full)
        rows_full = list(csv.DictReader(open(full / "curves.csv")))

        part = tmp_path / "part"
        run_experiment(small_gen_cfg(), self._cfg(), tiny_dataset, part)
        # simulate an interruption after the first checkpoint
        shutil.rmtree(latest_checkpoint(part))
        with open(part / "curves.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows_full[0].keys()))
            w.writeheader()
            w.writerows(rows_full[:4])
        m = run_experiment(small_gen_cfg(), self._cfg(), tiny_dataset, part, resume=True)
        rows_resumed = list(csv.DictReader(open(part / "curves.csv")))
        assert rows_resumed == rows_full
        assert m == run_experiment(small_gen_cfg(), self._cfg(), tiny_dataset,
                                   tmp_path / "again")

    def test_missing_dataset_rejected(self, tmp_path):
        from clisa.errors import FormatError

        with pytest.raises(FormatError, match="index"):
            run_experiment(small_gen_cfg(), self._cfg(), tmp_path / "nope",
                           tmp_path / "out")

    def test_evaluate_split_empty_rejected(self):
        G = GeneratorModel(small_gen_cfg())
        with pytest.raises(ContractError, match="empty"):
            evaluate_split(G, [])
