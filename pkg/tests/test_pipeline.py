import csv
from dataclasses import replace

import numpy as np
import pytest

from stgvis.autodiff import SGD, Tape
from stgvis.config import Config
from stgvis.pipeline import (LossWeights, MemoryEntry, Model, TrackMemory, TrainingPair, annotations_to_instances,
                             compute_losses, ground_truth_tubes, infer_video, memory_update,
                             sample_training_pair, train, train_step)
from stgvis.synth import SceneSpec, ShapeSpec, VideoDataset, generate_video, make_dataset

TINY = replace(Config(), D=8, backbone_width=4, head_hidden=8, w=5, L=2, batch_size=1)


def entry(i, seen=0):
    return MemoryEntry(i, np.zeros(4), np.zeros(169), 0, (0, 0, 1, 1), seen)


class TestMemory:
    def test_boundary(self):
        mem = memory_update(TrackMemory(), [entry(1)], 3, 7)
        assert 1 in memory_update(mem, [], 10, 7)
        assert 1 not in memory_update(mem, [], 11, 7)

    def test_refresh(self):
        mem = memory_update(TrackMemory(), [entry(1)], 3, 7)
        mem = memory_update(mem, [entry(1)], 8, 7)
        assert 1 in memory_update(mem, [], 15, 7) and 1 not in memory_update(mem, [], 16, 7)

    def test_zero_window(self):
        mem = memory_update(TrackMemory(), [entry(1), entry(2)], 4, 0)
        assert len(mem) == 2
        assert len(memory_update(mem, [], 5, 0)) == 0

    def test_does_not_mutate_input(self):
        mem = memory_update(TrackMemory(), [entry(1)], 0, 1)
        memory_update(mem, [entry(2)], 5, 1)
        assert mem.ids() == [1]


class TestSampling:
    def two_frame(self):
        v = generate_video(SceneSpec(16, 16, 2, [ShapeSpec("disc", 3.0, (8, 8), (0, 0), (200, 0, 0))]))
        return VideoDataset([v])

    def test_two_frame_video(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = sample_training_pair(self.two_frame(), rng)
            assert (p.k, p.t) == (0, 1)

    def test_gaps(self):
        v = generate_video(SceneSpec(16, 16, 10, [ShapeSpec("disc", 3.0, (8, 8), (0, 0), (200, 0, 0))]))
        ds, rng = VideoDataset([v]), np.random.default_rng(1)
        gaps = {p.t - p.k for p in (sample_training_pair(ds, rng) for _ in range(10_000))}
        assert gaps == {1, 2, 3, 4}

    def test_reproducible(self):
        ds = make_dataset(3, seed=0)
        r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
        a = [(p.video, p.k, p.t) for p in (sample_training_pair(ds, r1) for _ in range(30))]
        b = [(p.video, p.k, p.t) for p in (sample_training_pair(ds, r2) for _ in range(30))]
        assert a == b

    def test_short_videos_skipped(self):
        one = generate_video(SceneSpec(16, 16, 1, []))
        with pytest.raises(ValueError):
            sample_training_pair(VideoDataset([one]), np.random.default_rng(0))
        ds = VideoDataset([one, self.two_frame()[0]])
        assert sample_training_pair(ds, np.random.default_rng(0)).t == 1

    def test_instances_in_feature_units(self):
        v = make_dataset(1, seed=0)[0]
        insts = annotations_to_instances(v.annotations[0])
        a = v.annotations[0][0]
        assert insts[0].box == tuple(c / 4 for c in a.box) and insts[0].instance_id == a.instance_id


def pair(seed=0):
    ds = make_dataset(2, seed=seed)
    return sample_training_pair(ds, np.random.default_rng(seed))


class TestLosses:
    def test_weighted_sum(self):
        model = Model.init(TINY)
        w = LossWeights(0.7, 1.3, 2.1)
        total, parts = compute_losses(model, pair(), w)
        ref = 0.7 * parts["L_det"] + 1.3 * parts["L_mask"] + 2.1 * parts["L_edge"]
        assert total.item() == pytest.approx(ref, abs=1e-9) and parts["L_total"] == total.item()

    def test_parts_nonnegative(self):
        for s in range(3):
            _, parts = compute_losses(Model.init(TINY), pair(s), LossWeights())
            assert all(parts[k] >= 0 for k in ("L_det", "L_mask", "L_edge"))

    def test_zeroed_weights_zero_gradients(self):
        model = Model.init(TINY)
        with Tape() as tape:
            total, _ = compute_losses(model, pair(), LossWeights(1.0, 0.0, 0.0))
        tape.backward(total)
        for name, t in model.named_params().items():
            if name.startswith(("seg.", "warp.", "edge_cls.")):
                assert t.grad is None or not np.any(t.grad), name
        assert np.any(model.det.named()[next(iter(model.det.named()))].grad)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(1.0, -1.0, 1.0)

    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_non_finite_loss_aborts(self):
        model = Model.init(TINY)
        model.backbone.convs[0].weight.data[:] = np.nan
        opt = SGD(model.parameters(), 0.01, 0.9)
        with pytest.raises(FloatingPointError, match="L_det"):
            train_step(model, pair(), LossWeights(), opt)


class TestModel:
    def test_checkpoint_round_trip(self, tmp_path):
        a = Model.init(TINY, seed=1)
        a.save(tmp_path / "m.ckpt")
        b = Model.init(TINY, seed=2)
        b.load(tmp_path / "m.ckpt")
        for (na, ta), (nb, tb) in zip(a.named_params().items(), b.named_params().items()):
            assert na == nb and ta.data.tobytes() == tb.data.tobytes()

    def test_load_shape_mismatch(self, tmp_path):
        Model.init(TINY).save(tmp_path / "m.ckpt")
        with pytest.raises(ValueError, match="shape"):
            Model.init(replace(TINY, D=4)).load(tmp_path / "m.ckpt")

    def test_unique_names(self):
        names = list(Model.init(TINY).named_params())
        assert len(names) == len(set(names))


class TestTraining:
    def test_deterministic_and_logged(self, tmp_path):
        ds = make_dataset(3, seed=0)
        h1 = train(Model.init(TINY), ds, steps=3, log_path=tmp_path / "a.csv")
        h2 = train(Model.init(TINY), ds, steps=3, log_path=tmp_path / "b.csv")
        assert [h["L_total"] for h in h1] == [h["L_total"] for h in h2]
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        rows = list(csv.reader(open(tmp_path / "a.csv")))
        assert rows[0] == ["step", "L_det", "L_mask", "L_edge", "L_total"] and len(rows) == 4

    def test_step_changes_parameters(self):
        model = Model.init(TINY)
        before = {k: v.data.copy() for k, v in model.named_params().items()}
        train_step(model, [pair(0), pair(1)], LossWeights(), SGD(model.parameters(), 0.01, 0.0))
        changed = [k for k, v in model.named_params().items() if not np.array_equal(v.data, before[k])]
        assert any(k.startswith("n_v") for k in changed) and any(k.startswith("edge_cls") for k in changed)


# ---------------------------------------------------------------- inference

def scripted_video(hidden=(), frames=6, moving=False):
    shapes = [ShapeSpec("disc", 6.0, (20, 20), (1.0, 0.5) if moving else (0, 0), (220, 60, 60), list(hidden)),
              ShapeSpec("square", 6.0, (44, 44), (0, 0), (60, 60, 220))]
    return generate_video(SceneSpec(64, 64, frames, shapes))


def gt_detector(video):
    return lambda t, maps: annotations_to_instances(video.annotations[t])


def oracle_scorer(k_dets, t_dets, pairs):
    return [1.0 if k_dets[k].instance_id == t_dets[d].instance_id else 0.0 for k, d in pairs]


def run(video, **kw):
    log = []
    model = Model.init(TINY)
    tubes = infer_video(model, video, detector=gt_detector(video), edge_scorer=oracle_scorer, frame_log=log, **kw)
    return tubes, log


class TestInference:
    def test_static_instance_one_track(self):
        video = generate_video(SceneSpec(64, 64, 5, [ShapeSpec("disc", 6.0, (30, 30), (0, 0), (200, 0, 0))]))
        tubes, _ = run(video)
        assert len(tubes) == 1 and tubes[0].frames == [0, 1, 2, 3, 4]

    def test_two_moving_instances_keep_ids(self):
        video = scripted_video(frames=8, moving=True)
        tubes, log = run(video)
        assert len(tubes) == 2 and all(len(t.frames) == 8 for t in tubes)
        for fr in log:
            assert len(fr.track_ids) == len(set(fr.track_ids))

    @pytest.mark.parametrize("gap", [1, 3, 7])
    def test_gap_within_window_resumes(self, gap):
        video = scripted_video(hidden=[(2, 2 + gap)], frames=gap + 5)
        tubes, _ = run(video)
        assert len(tubes) == 2
        disc = [t for t in tubes if t.class_id == 0][0]
        assert disc.frames == [f for f in range(gap + 5) if not 2 <= f < 2 + gap]

    def test_gap_beyond_window_new_identity(self):
        video = scripted_video(hidden=[(2, 10)], frames=13)
        tubes, log = run(video)
        discs = [t for t in tubes if t.class_id == 0]
        assert len(discs) == 2
        assert discs[0].frames == [0, 1] and discs[1].frames == [10, 11, 12]

    def test_smaller_delta_t_splits(self):
        video = scripted_video(hidden=[(2, 5)], frames=8)
        tubes, _ = run(video, config=replace(TINY, delta_t=2))
        assert len([t for t in tubes if t.class_id == 0]) == 2

    def test_memory_bounded_by_identities(self):
        video = scripted_video(hidden=[(1, 4)], frames=7)
        _, log = run(video)
        seen = set()
        for fr in log:
            seen.update(fr.track_ids)
            assert len(fr.memory_ids) <= len(seen)
        assert log[1].memory_ids == [1] and log[4].memory_ids == []

    def test_empty_frame(self):
        video = generate_video(SceneSpec(64, 64, 4, [ShapeSpec("disc", 6.0, (30, 30), (0, 0), (200, 0, 0),
                                                               [(1, 2)])]))
        tubes, log = run(video)
        assert log[1].track_ids == [] and log[1].memory_ids == [1]
        assert len(tubes) == 1 and tubes[0].frames == [0, 2, 3]

    def test_tube_fields(self):
        video = scripted_video(frames=3)
        tubes, _ = run(video)
        for t in tubes:
            assert t.score == 1.0 and all(m.shape == (64, 64) and m.dtype == bool for m in t.masks.values())

    def test_real_decoding_is_deterministic(self):
        video = make_dataset(1, seed=4)[0]
        model = Model.init(TINY)
        a, b = infer_video(model, video), infer_video(model, video)
        assert [(t.track_id, t.class_id, t.score, t.frames) for t in a] == \
               [(t.track_id, t.class_id, t.score, t.frames) for t in b]


def test_ground_truth_tubes():
    video = scripted_video(hidden=[(1, 3)], frames=5)
    tubes = ground_truth_tubes(video)
    assert [t.track_id for t in tubes] == [1, 2]
    assert tubes[0].frames == [0, 3, 4] and tubes[1].frames == [0, 1, 2, 3, 4]
