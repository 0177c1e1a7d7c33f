"""End-to-end orchestration tests on a tiny synthetic scene."""

import json

import numpy as np
import pytest

from splat4d.losses import IdClassifier
from splat4d.perception import Stage1Artifacts
from splat4d.pipeline import (Decomposition, EvalReport, RunConfig,
                              _seed_field, decompose, evaluate,
                              instance_mask, load_checkpoint, psnr,
                              run_stage1, run_stage2, split_frames,
                              training_frames)
from splat4d.scene import GaussianField
from splat4d.synth import SceneObject, SceneScript, generate


class TestRunConfig:
    def test_defaults_roundtrip_text(self):
        cfg = RunConfig(dataset="data/desk", out="runs/a", seed=3,
                        lam_3d=2.0, stage2_iters=100)
        back = RunConfig.from_text(cfg.to_text())
        assert back == cfg

    def test_file_roundtrip(self, tmp_path):
        cfg = RunConfig(dataset="d", ablate="consist")
        cfg.to_file(tmp_path / "run.cfg")
        assert RunConfig.from_file(tmp_path / "run.cfg") == cfg

    def test_comments_and_blanks_skipped(self):
        cfg = RunConfig.from_text("# a comment\n\nseed = 7\n  \nknn_k = 3\n")
        assert cfg.seed == 7 and cfg.knn_k == 3

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown key"):
            RunConfig.from_text("learning_rate = 0.1\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            RunConfig.from_text("seed = 1\nseed = 2\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ValueError, match="key = value"):
            RunConfig.from_text("seed 4\n")

    def test_bad_value_type_rejected(self):
        with pytest.raises(ValueError, match="cannot parse"):
            RunConfig.from_text("stage2_iters = soon\n")

    def test_type_coercion(self):
        cfg = RunConfig.from_text("delta = 1e-4\nholdout_every = 5\n")
        assert cfg.delta == 1e-4 and cfg.holdout_every == 5
        assert isinstance(cfg.holdout_every, int)

    def test_bad_ablation_rejected(self):
        with pytest.raises(ValueError, match="ablate"):
            RunConfig(ablate="everything")

    def test_paper_weight_defaults(self):
        cfg = RunConfig()
        assert cfg.delta == 1e-3 and cfg.eps_exist == 5e-4 and cfg.knn_k == 5
        assert (cfg.lam_image, cfg.lam_depth, cfg.lam_o) == (1.0, 1.0, 0.05)
        assert (cfg.lam_vbar, cfg.lam_beta) == (0.01, 0.001)
        assert (cfg.lam_id, cfg.lam_3d, cfg.lam_consist) == (0.1, 1.5, 0.01)
        assert (cfg.lam_mag, cfg.lam_dir) == (0.4, 0.2)


class TestSplitFrames:
    def test_every_fourth_held_out(self):
        train, test = split_frames(24, 4)
        assert test == [3, 7, 11, 15, 19, 23]
        assert sorted(train + test) == list(range(24))

    def test_disabled_holdout(self):
        assert split_frames(5, 0) == (list(range(5)), [])
        assert split_frames(5, 1) == (list(range(5)), [])

    def test_disjoint(self):
        train, test = split_frames(11, 3)
        assert not set(train) & set(test)


class TestPsnr:
    def test_identical_capped(self):
        img = np.random.default_rng(0).uniform(size=(8, 8, 3))
        assert psnr(img, img) == 99.0

    def test_constant_offset_exact(self):
        a = np.full((16, 16, 3), 0.5)
        assert abs(psnr(a, a + 0.1) - 20.0) < 1e-12

    def test_uniform_halfstep_noise(self):
        # uniform +-0.5/255: MSE = (1/255)^2/12, PSNR = 10 log10(12*255^2)
        rng = np.random.default_rng(1)
        a = rng.uniform(0.3, 0.7, size=(256, 256, 3))
        b = a + rng.uniform(-0.5, 0.5, size=a.shape) / 255.0
        expect = 10.0 * np.log10(12.0 * 255.0 ** 2)
        assert abs(expect - 58.92) < 0.01
        assert abs(psnr(a, b) - expect) < 0.15

    def test_uniform_fullstep_noise(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0.3, 0.7, size=(256, 256, 3))
        b = a + rng.uniform(-1.0, 1.0, size=a.shape) / 255.0
        expect = 10.0 * np.log10(3.0 * 255.0 ** 2)
        assert abs(expect - 52.90) < 0.01
        assert abs(psnr(a, b) - expect) < 0.15


def one_class_classifier():
    """argmax = 1 iff the first embedding coordinate exceeds 0.5."""
    clf = IdClassifier(num_classes=1, seed=0)
    clf.w1[:] = 0.0
    clf.w1[0, 0] = 1.0
    clf.b1[:] = 0.0
    clf.w2[:] = 0.0
    clf.w2[0, 1] = 1.0
    clf.b2[:] = [0.5, 0.0]
    return clf


def hand_field():
    n = 6
    e = np.zeros((n, 8))
    e[:3, 0] = 2.0                       # rows 0..2 classify dynamic
    beta = np.array([1e3, 0.12, 12.0, 1e3, 0.1, 1e-4])
    tau = np.full(n, 0.5)
    tau[5] = 0.0                         # row 5 dead at t=0.5 (tiny lifespan)
    return GaussianField.from_constrained(
        mu=np.random.default_rng(0).normal(size=(n, 3)),
        q=np.tile([1.0, 0, 0, 0], (n, 1)), s=np.full((n, 3), 0.1),
        o=np.full(n, 0.9), c=np.full((n, 3), 0.5), e=e,
        v=np.zeros((n, 3)), tau=tau, beta=beta, cycle_length=0.4)


class TestDecompose:
    def test_auxiliary_rules_both_directions(self):
        dec = decompose(hand_field(), one_class_classifier(), t=0.5,
                        rho_static_floor=50.0, rho_dyn_ceiling=0.5)
        # row 0: classified dynamic but rho=2500 -> static
        # row 4: classified static but rho=0.25 -> best dynamic class
        # row 5: not existing at t=0.5 -> absent everywhere
        assert dec.static_idx.tolist() == [0, 3]
        assert dec.instance_idx[1].tolist() == [1, 2, 4]

    def test_all_static_embeddings(self):
        f = hand_field()
        f.e[:] = 0.0
        f.log_beta[:] = np.log(1e3)   # every row alive and long-lived
        dec = decompose(f, one_class_classifier(), t=0.5)
        assert dec.static_idx.tolist() == [0, 1, 2, 3, 4, 5]
        assert dec.instance_idx[1].size == 0

    def test_no_classifier_everything_static(self):
        dec = decompose(hand_field(), None, t=0.5)
        assert dec.static_idx.tolist() == [0, 1, 2, 3, 4]
        assert dec.instance_idx == {}

    def test_subset_helpers(self):
        f = hand_field()
        dec = decompose(f, one_class_classifier(), t=0.5)
        assert len(dec.static_field(f)) == dec.static_idx.size
        assert len(dec.instance_field(f, 1)) == dec.instance_idx[1].size

    def test_instance_mask_empty_selection(self):
        from splat4d.scene import look_at_camera
        cam = look_at_camera((0, -3, 1), (0, 0, 0), (0, 0, 1),
                             20.0, 20.0, 8.0, 8.0, 16, 16)
        m = instance_mask(hand_field(), np.zeros(0, dtype=np.int64), cam)
        assert m.shape == (16, 16) and not m.any()


class TestSeedField:
    def test_dynamic_seeds_relocalized(self):
        sub = hand_field().subset(np.arange(2))
        seed_map = {4: (0.25, sub), 9: (0.75, sub)}
        out = _seed_field(seed_map, dynamic_ids=[9], num_classes=1)
        assert len(out) == 4 and out.num_classes == 1
        # id 4 static: untouched tau/beta; id 9 dynamic: seed-frame time
        assert np.allclose(out.tau[:2], sub.tau)
        assert np.allclose(out.beta[:2], sub.beta)
        assert np.allclose(out.tau[2:], 0.75)
        assert np.allclose(out.beta[2:], 0.3 * 0.4)

    def test_empty_map(self):
        assert _seed_field({}, [], 0) is None


# -- end to end on a tiny scene -------------------------------------------------

def tiny_scene():
    objs = [
        SceneObject(id=1, shape="box", size=(0.35, 0.35, 0.35),
                    albedo=(0.85, 0.2, 0.2), path=[(0.0, -0.9, 0.0, 0.35)],
                    yaw=[(0.0, 0.0)], moving=False),
        SceneObject(id=2, shape="box", size=(0.3, 0.3, 0.3),
                    albedo=(0.2, 0.3, 0.9),
                    path=[(0.0, -0.7, 0.6, 0.3), (1.0, 0.9, 0.6, 0.3)],
                    yaw=[(0.0, 0.0)], moving=True),
    ]
    return SceneScript(width=32, height=32, n_frames=6, fx=36.0, fy=36.0,
                       camera_path=[(0.0, 0.0, -5.5, 1.3)],
                       camera_target=(0.0, 0.0, 0.5), objects=objs)


def tiny_config(**kw):
    base = dict(holdout_every=4, s_over_iters=160, candidate_iters=60,
                s_over_budget=1000, stage2_iters=120, checkpoint_interval=0,
                frac_id=0.1, frac_vel=0.2, frac_3d=0.5, frac_consist=0.6)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate(tiny_scene())


@pytest.fixture(scope="module")
def tiny_art(tiny_ds):
    return run_stage1(tiny_config(), dataset=tiny_ds)


@pytest.fixture(scope="module")
def tiny_run(tiny_ds, tiny_art):
    return run_stage2(tiny_config(), tiny_art, training_frames(tiny_ds))


class TestStage1:
    def test_artifact_shapes(self, tiny_ds, tiny_art):
        assert len(tiny_art.labels) == tiny_ds.n_frames
        assert len(tiny_art.masks) == tiny_ds.n_frames
        assert all(m.shape == (32, 32) for m in tiny_art.masks)
        assert sorted(tiny_art.remap) == tiny_art.dynamic_ids

    def test_scores_deterministic(self, tiny_ds, tmp_path):
        a = tiny_config(out=str(tmp_path / "a"))
        b = tiny_config(out=str(tmp_path / "b"))
        run_stage1(a, dataset=tiny_ds)
        run_stage1(b, dataset=tiny_ds)
        sa = (tmp_path / "a" / "stage1" / "scores.tsv").read_bytes()
        sb = (tmp_path / "b" / "stage1" / "scores.tsv").read_bytes()
        assert sa == sb and len(sa) > 0

    def test_corrupted_tracks_still_run(self, tiny_ds):
        cfg = tiny_config(drop_prob=0.3, id_switch_prob=0.3, noise_seed=5,
                          s_over_iters=120, candidate_iters=40)
        art = run_stage1(cfg, dataset=tiny_ds)
        assert len(art.labels) == tiny_ds.n_frames


class TestStage2:
    def test_runs_and_snapshots(self, tiny_run, tiny_art):
        assert len(tiny_run.field) > 0
        assert tiny_run.skipped == 0
        if tiny_art.dynamic_ids:
            assert tiny_run.classifier is not None
        assert tiny_run.pre_consist is not None
        pre_field, _ = tiny_run.pre_consist
        assert len(pre_field) > 0

    def test_loss_log_shape(self, tiny_run):
        assert len(tiny_run.loss_log) == 120
        it0 = tiny_run.loss_log[0]
        # before any activation the staged losses are all zero
        assert it0[6] == 0.0 and it0[7] == 0.0 and it0[9] == 0.0

    def test_deterministic_and_oracle_free(self, tiny_ds, tiny_art, tiny_run,
                                           tmp_path):
        frames = training_frames(tiny_ds)
        assert not hasattr(frames[0], "inst")
        # garble the oracle instance maps; stage 2 must not notice
        garbled = [f for f in tiny_ds.frames]
        for o in garbled:
            o.inst[:] = 777
        try:
            res2 = run_stage2(tiny_config(), tiny_art, training_frames(tiny_ds))
        finally:
            ds2 = generate(tiny_scene())
            for o, fresh in zip(tiny_ds.frames, ds2.frames):
                o.inst[:] = fresh.inst
        from splat4d.scene import save_field
        save_field(tmp_path / "a.dgs4", tiny_run.field)
        save_field(tmp_path / "b.dgs4", res2.field)
        assert (tmp_path / "a.dgs4").read_bytes() == \
            (tmp_path / "b.dgs4").read_bytes()
        assert tiny_run.loss_log == res2.loss_log

    def test_checkpoint_files(self, tiny_ds, tiny_art, tmp_path):
        cfg = tiny_config(out=str(tmp_path), stage2_iters=60,
                          checkpoint_interval=25)
        run_stage2(cfg, tiny_art, training_frames(tiny_ds))
        stage2 = tmp_path / "stage2"
        assert (stage2 / "ckpt_consist_pre.dgs4").exists()
        assert (stage2 / "ckpt_000025.dgs4").exists()
        assert (stage2 / "ckpt_000050.npz").exists()
        assert (stage2 / "final.dgs4").exists()
        assert (stage2 / "loss_log.tsv").read_text().startswith("it\tframe")
        field, clf = load_checkpoint(stage2, "final")
        assert len(field) > 0
        assert (clf is None) == (not tiny_art.dynamic_ids)

    def test_static_only_degenerates(self, tiny_ds):
        shape = (32, 32)
        art = Stage1Artifacts(
            s_over=hand_field(), dynamic_ids=[], remap={},
            labels=[np.zeros(shape, dtype=np.int64)] * tiny_ds.n_frames,
            masks=[np.zeros(shape, dtype=bool)] * tiny_ds.n_frames)
        cfg = tiny_config(stage2_iters=40)
        res = run_stage2(cfg, art, training_frames(tiny_ds))
        assert res.classifier is None
        # with the dynamic mask empty the velocity regularizer sees every
        # pixel, so instant velocities stay pinned near zero
        assert np.linalg.norm(res.field.instant_velocities(), axis=1).mean() \
            < 0.05

    def test_empty_frame_list_rejected(self, tiny_art):
        with pytest.raises(ValueError, match="train"):
            run_stage2(tiny_config(), tiny_art, [])


class TestEvaluate:
    def test_report_contents(self, tiny_ds, tiny_art, tiny_run):
        rep = evaluate(tiny_run.field, tiny_run.classifier, tiny_ds,
                       tiny_config(), artifacts=tiny_art)
        assert rep.train_frames == [0, 1, 2, 4, 5]
        assert rep.test_frames == [3]
        assert len(rep.psnr_train) == 5 and len(rep.psnr_test) == 1
        assert 0.0 < rep.mean_psnr_train <= 99.0
        assert all(0.0 <= v <= 1.0 for _, v in rep.ssim_train)
        assert rep.recall is not None and 0.0 <= rep.recall <= 1.0
        assert all(0.0 <= v <= 1.0 for _, v in rep.iou_per_instance)

    def test_json_deterministic(self, tiny_ds, tiny_art, tiny_run, tmp_path):
        args = (tiny_run.field, tiny_run.classifier, tiny_ds, tiny_config())
        ra = evaluate(*args, artifacts=tiny_art)
        rb = evaluate(*args, artifacts=tiny_art)
        assert ra.to_json() == rb.to_json()
        ra.save(tmp_path / "eval.json")
        parsed = json.loads((tmp_path / "eval.json").read_text())
        assert parsed["test_frames"] == [3]

    def test_precision_recall_against_oracle(self, tiny_ds, tiny_run):
        art = Stage1Artifacts(s_over=hand_field(), dynamic_ids=[2],
                              remap={2: 1}, labels=[], masks=[])
        rep = evaluate(tiny_run.field, None, tiny_ds, tiny_config(),
                       artifacts=art)
        assert rep.precision == 1.0 and rep.recall == 1.0
        art_bad = Stage1Artifacts(s_over=hand_field(), dynamic_ids=[1, 2],
                                  remap={1: 1, 2: 2}, labels=[], masks=[])
        rep = evaluate(tiny_run.field, None, tiny_ds, tiny_config(),
                       artifacts=art_bad)
        assert rep.precision == 0.5 and rep.recall == 1.0

    def test_no_artifacts_no_oracle_metrics(self, tiny_ds, tiny_run):
        rep = evaluate(tiny_run.field, tiny_run.classifier, tiny_ds,
                       tiny_config())
        assert rep.precision is None and rep.iou_per_instance == []
