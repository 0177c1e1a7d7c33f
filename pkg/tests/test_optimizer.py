import numpy as np
import pytest

from splat4d.losses import IdClassifier, loss_id
from splat4d.optimizer import (
    BETA_MAX,
    ClassifierOptimizer,
    FieldOptimizer,
    Schedule,
    constrained_to_storage,
)
from util import random_field, simple_camera


def zero_grads(field, names=("mu", "q", "s", "o", "c", "e", "v", "tau", "beta")):
    shapes = {"mu": (3,), "q": (4,), "s": (3,), "o": (), "c": (3,), "e": (8,),
              "v": (3,), "tau": (), "beta": ()}
    n = len(field)
    return {k: np.zeros((n,) + shapes[k]) for k in names}


class TestChainRule:
    def test_storage_mapping(self):
        field = random_field(4, seed=0)
        g = zero_grads(field)
        g["s"] += 2.0
        g["o"] += 1.0
        g["beta"] += 3.0
        g["mu"] += 0.5
        out = constrained_to_storage(field, g)
        assert np.allclose(out["log_s"], 2.0 * field.s)
        assert np.allclose(out["logit_o"], field.o * (1 - field.o))
        assert np.allclose(out["log_beta"], 3.0 * field.beta)
        assert np.allclose(out["mu"], 0.5)

    def test_missing_groups_dropped(self):
        field = random_field(2, seed=1)
        out = constrained_to_storage(field, {"mu": np.zeros((2, 3)), "x": None})
        assert set(out) == {"mu"}


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        field = random_field(5, seed=2)
        mu0 = field.mu.copy()
        c0 = field.c.copy()
        opt = FieldOptimizer(field, total_iters=100)
        for _ in range(3):
            opt.step(zero_grads(field))
        assert np.array_equal(field.mu, mu0)
        assert np.array_equal(field.c, c0)

    def test_constant_gradient_step_magnitude_approaches_lr(self):
        field = random_field(3, seed=3)
        opt = FieldOptimizer(field, total_iters=10_000)
        g = zero_grads(field)
        g["c"] += 0.37
        prev = field.c.copy()
        for _ in range(80):
            prev = field.c.copy()
            opt.step(g)
        delta = np.abs(field.c - prev)
        assert np.allclose(delta, opt.lrs["c"], rtol=1e-2)

    def test_non_finite_elements_skipped_and_counted(self):
        field = random_field(3, seed=4)
        mu0 = field.mu.copy()
        opt = FieldOptimizer(field, total_iters=100)
        g = zero_grads(field)
        g["mu"][:, 0] = 1.0
        g["mu"][1, 0] = np.nan
        g["c"][2, 1] = np.inf
        opt.step(g)
        assert opt.skipped == 2
        assert field.mu[1, 0] == mu0[1, 0]        # poisoned element untouched
        assert field.mu[0, 0] != mu0[0, 0]

    def test_post_step_constraints(self):
        field = random_field(4, seed=5)
        opt = FieldOptimizer(field, total_iters=100)
        g = zero_grads(field)
        g["q"] += 50.0
        g["tau"][:] = [1e6, -1e6, 1e6, -1e6]
        g["beta"][:] = -1e9
        opt.step(g)
        assert np.allclose(np.linalg.norm(field.q_raw, axis=1), 1.0)
        assert field.tau.min() >= 0.0 and field.tau.max() <= 1.0
        assert field.beta.max() <= BETA_MAX * (1 + 1e-12)

    def test_mu_lr_decays_hundredfold(self):
        field = random_field(1, seed=6)
        opt = FieldOptimizer(field, total_iters=1000)
        lr0 = opt.mu_lr()
        opt.t = 1000
        assert abs(opt.mu_lr() - lr0 * 0.01) / (lr0 * 0.01) < 1e-9

    def test_state_round_trip(self, tmp_path):
        field = random_field(3, seed=7)
        opt = FieldOptimizer(field, total_iters=50)
        g = zero_grads(field)
        g["mu"] += 0.1
        opt.step(g)
        opt.save_state(tmp_path / "state.npz")
        opt2 = FieldOptimizer(field, total_iters=50)
        opt2.load_state(tmp_path / "state.npz")
        assert opt2.t == opt.t
        assert np.array_equal(opt2.moments["mu"][0], opt.moments["mu"][0])


class TestDensify:
    def make_opt(self, n=6, seed=8):
        field = random_field(n, seed=seed)
        return FieldOptimizer(field, total_iters=1000)

    def test_no_gradient_no_growth(self):
        opt = self.make_opt()
        n0 = len(opt.field)
        stats = opt.densify_and_prune()
        assert stats["cloned"] == 0 and stats["split"] == 0
        assert len(opt.field) == n0

    def test_prune_low_opacity(self):
        opt = self.make_opt()
        opt.field.logit_o[2] = -12.0   # o ~ 6e-6
        stats = opt.densify_and_prune()
        assert stats["pruned"] == 1
        assert len(opt.field) == 5

    def test_split_large_hot_gaussian(self):
        opt = self.make_opt()
        f = opt.field
        n0 = len(f)
        f.log_s[0] = np.log([0.4, 0.1, 0.1])   # above split size
        s_parent = f.s[0].copy()
        mu_parent = f.mu[0].copy()
        opt.grad2d_accum[0] = 1.0
        opt.grad2d_count[0] = 1.0
        stats = opt.densify_and_prune()
        assert stats["split"] == 1 and stats["cloned"] == 0
        assert len(opt.field) == n0 + 1          # parent swapped for 2 children
        child_s = opt.field.s[n0 - 1:]
        assert np.allclose(child_s, s_parent / 1.6)
        children_mu = opt.field.mu[n0 - 1:]
        assert not np.allclose(children_mu[0], mu_parent)
        assert np.allclose(children_mu.mean(axis=0), mu_parent)

    def test_clone_small_hot_gaussian(self):
        opt = self.make_opt()
        f = opt.field
        n0 = len(f)
        f.log_s[1] = np.log(0.01)
        opt.grad2d_accum[1] = 1.0
        opt.grad2d_count[1] = 1.0
        opt.grad_mu_accum[1] = [1.0, 0.0, 0.0]
        stats = opt.densify_and_prune()
        assert stats["cloned"] == 1 and stats["split"] == 0
        assert len(opt.field) == n0 + 1
        child = opt.field.gaussian(n0)
        parent = opt.field.gaussian(1)
        assert np.allclose(child.e, parent.e)
        assert child.mu[0] != parent.mu[0]

    def test_moment_buffers_track_field_length(self):
        opt = self.make_opt()
        opt.field.logit_o[0] = -12.0
        opt.grad2d_accum[3] = 1.0
        opt.grad2d_count[3] = 1.0
        opt.densify_and_prune()
        n = len(opt.field)
        for m, v in opt.moments.values():
            assert m.shape[0] == n and v.shape[0] == n

    def test_hard_cap_suspends_densify(self):
        opt = self.make_opt()
        opt.grad2d_accum[:] = 1.0
        opt.grad2d_count[:] = 1.0
        stats = opt.densify_and_prune(hard_cap=len(opt.field))
        assert stats["cloned"] == 0 and stats["split"] == 0

    def test_record_stats_scales_to_ndc(self):
        opt = self.make_opt(n=2)
        cam = simple_camera(width=64, height=32)
        g = {"mean2d": np.array([[1e-3, 0.0], [0.0, 2e-3]]),
             "mu": np.zeros((2, 3))}
        opt.record_densify_stats(g, cam)
        assert np.isclose(opt.grad2d_accum[0], 1e-3 * 32)
        assert np.isclose(opt.grad2d_accum[1], 2e-3 * 16)


class TestClassifierOptimizer:
    def test_descends_toy_loss(self):
        clf = IdClassifier(num_classes=2, seed=0)
        emb = np.random.default_rng(1).normal(size=(2, 2, 8))
        labels = np.array([[1, 2], [0, 1]])
        opt = ClassifierOptimizer(clf, lr=5e-3)
        v0 = loss_id(clf, emb, labels)[0]
        for _ in range(200):
            _, _, wg = loss_id(clf, emb, labels)
            opt.step(wg)
        assert loss_id(clf, emb, labels)[0] < v0 * 0.5


class TestSchedule:
    def test_activation_sequence(self):
        sch = Schedule(total=1000)
        assert sch.active(0) == {"image", "depth", "opacity"}
        assert "id" in sch.active(100) and "vel" not in sch.active(100)
        assert "vel" in sch.active(200) and "threed" not in sch.active(599)
        assert "threed" in sch.active(600) and "consist" not in sch.active(699)
        assert {"id", "vel", "threed", "consist"} <= sch.active(999)

    def test_bad_ordering_rejected(self):
        with pytest.raises(ValueError, match="nondecreasing"):
            Schedule(total=100, frac_id=0.5, frac_vel=0.2)

    def test_densify_window(self):
        sch = Schedule(total=2000)
        assert not sch.densify_window(499)
        assert sch.densify_window(500)
        assert sch.densify_window(1000)
        assert not sch.densify_window(1001)
