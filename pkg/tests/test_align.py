import json
import os
from dataclasses import replace

import numpy as np
import pytest

from krfws.exceptions import DataError, UsageError
from krfws.align_tools import (AprParams, Apr3dParams, FaceFrame, FeatureConfig, LbfParams,
                               PipelineBundle, TrainConfig, apr_apply, apr_target, apr_train,
                               apr3d_apply, apr3d_train, estimate_bbox, full_pipeline, lbf_apply,
                               lbf_train, load_bundle, load_model, make_lbf_inits,
                               make_perturbed_inits, mean_unit_shape, merge_bundles, place_in_bbox,
                               save_bundle, save_model, unit_shape)
from krfws.data_tools import SCHEMES, synth_faces
from krfws.forest_tools import ForestParams, KForest
from krfws.geom_tools import OrthoPose, fit_pose, project


FACE_SIZE = 32
CENTER = FeatureConfig(patch=32, levels=(32, 16), hog="basic")
LANDMARKS = FeatureConfig(patch=16, levels=(16, 8), hog="basic", placement="landmarks")
FOREST = ForestParams(n_trees=3, max_depth=4, min_samples=5)


def shift_right(faces, fraction):
    return [f.shape + [fraction*f.bbox[2], 0.0] for f in faces]


def sq_error(shapes, faces):
    return float(np.mean([np.sum((S - f.shape)**2) for S, f in zip(shapes, faces)]))


def point_error(shapes, faces):
    return float(np.mean([np.linalg.norm(S - f.shape, axis=1).mean() for S, f in zip(shapes, faces)]))


@pytest.fixture(scope="module")
def mean3d_face5(mean3d):
    return SCHEMES["face5"].select(mean3d)


@pytest.fixture(scope="module")
def lbf_setup(synth_train):
    inits = make_lbf_inits(synth_train, TrainConfig(lbf_inits=3, seed=1))
    params = LbfParams(iterations=2, forest=FOREST, features=LANDMARKS, lambdas=(0.1, 1.0),
                       face_size=FACE_SIZE)
    return lbf_train(synth_train, inits, params, seed=3, n_jobs=2), inits


@pytest.fixture(scope="module")
def linear_apr(synth_train):
    params = AprParams(iterations=2, features=CENTER, regressor="linear", face_size=FACE_SIZE)
    return apr_train(synth_train, shift_right(synth_train, 0.1), params, n_jobs=2)


class TestFaceFrame:

    def test_scale_and_size(self):
        frame = FaceFrame.from_bbox((10, 20, 40, 40), face_size=64)
        assert frame.scale == pytest.approx(1.6)
        assert frame.size == 128
        np.testing.assert_allclose(frame.to_frame([[30.0, 40.0]]), [[64.0, 64.0]])

    def test_round_trip(self, rng):
        frame = FaceFrame.from_bbox((3.5, -2.0, 50, 70), face_size=32)
        S = rng.uniform(0, 100, (5, 2))
        np.testing.assert_allclose(frame.from_frame(frame.to_frame(S)), S)

    def test_empty_box(self):
        with pytest.raises(DataError):
            FaceFrame.from_bbox((0, 0, 10, 0))


class TestBoxes:

    def test_unit_shape(self, rng):
        S = rng.uniform(0, 100, (5, 2))
        box = (10.0, 20.0, 30.0, 40.0)
        np.testing.assert_allclose(place_in_bbox(unit_shape(S, box), box), S)

    def test_estimate_bbox_recovers_box(self, synth_train):
        unit_mean = mean_unit_shape(synth_train)
        S = place_in_bbox(unit_mean, (10.0, 20.0, 50.0, 50.0))
        np.testing.assert_allclose(estimate_bbox(S, unit_mean), (10.0, 20.0, 50.0, 50.0), atol=1e-9)

    def test_perturbed_inits(self, synth_train):
        config = TrainConfig(perturbations=4, seed=2)
        inits = make_perturbed_inits(synth_train, mean_unit_shape(synth_train), config)
        assert len(inits) == len(synth_train)
        assert inits[0].shape == (4, 5, 2)
        again = make_perturbed_inits(synth_train, mean_unit_shape(synth_train), config)
        np.testing.assert_array_equal(inits[3], again[3])

    def test_lbf_inits_come_from_other_faces(self, synth_train):
        inits = make_lbf_inits(synth_train[:2], TrainConfig(lbf_inits=2))
        f0, f1 = synth_train[:2]
        expected = place_in_bbox(unit_shape(f1.shape, f1.bbox), f0.bbox)
        for S in inits[0]:
            np.testing.assert_allclose(S, expected)


class TestApr:

    def test_target_of_exact_shape(self, rng):
        S = rng.normal(size=(5, 2))
        np.testing.assert_allclose(apr_target(S, S), [1, 0, 0, 1, 0, 0], atol=1e-12)

    def test_no_correction_needed(self, synth_train, synth_test):
        params = AprParams(iterations=1, features=CENTER, regressor="linear", face_size=FACE_SIZE)
        model = apr_train(synth_train, [f.shape for f in synth_train], params, n_jobs=2)
        for f in synth_test[:5]:
            np.testing.assert_allclose(apr_apply(f.load_image(), f.shape, model, f.bbox), f.shape, atol=1e-6)

    def test_constant_shift_is_undone(self, linear_apr, synth_test):
        assert linear_apr.iterations == 2
        assert all(len(stage) == 5 for stage in linear_apr.stages)
        for f, S in zip(synth_test, shift_right(synth_test, 0.1)):
            np.testing.assert_allclose(apr_apply(f.load_image(), S, linear_apr, f.bbox), f.shape, atol=1e-6)

    def test_forests_reduce_training_error(self, synth_train):
        config = TrainConfig(perturbations=5, seed=4)
        inits = make_perturbed_inits(synth_train, mean_unit_shape(synth_train), config)
        params = AprParams(iterations=1, forest=FOREST, features=CENTER, face_size=FACE_SIZE)
        model = apr_train(synth_train, inits, params, seed=5, n_jobs=2)
        assert isinstance(model.stages[0][0], KForest)
        start = [init[0] for init in inits]
        moved = [apr_apply(f.load_image(), S, model, f.bbox) for f, S in zip(synth_train, start)]
        assert sq_error(moved, synth_train) < sq_error(start, synth_train)

    def test_forests_undo_a_shift(self, synth_train, synth_test):
        params = AprParams(iterations=2, forest=FOREST, features=CENTER, face_size=FACE_SIZE)
        model = apr_train(synth_train, [f.shape + [8.0, 0.0] for f in synth_train], params, seed=6, n_jobs=2)
        start = [f.shape + [8.0, 0.0] for f in synth_test]
        moved = [apr_apply(f.load_image(), S, model, f.bbox) for f, S in zip(synth_test, start)]
        assert point_error(moved, synth_test) < 0.2 * point_error(start, synth_test)

    def test_mismatched_inits(self, synth_train):
        with pytest.raises(DataError):
            apr_train(synth_train, [f.shape for f in synth_train[:-1]], AprParams(features=CENTER))

    def test_faces_without_shapes(self, synth_train):
        params = AprParams(features=CENTER)
        faces = [replace(synth_train[0], shape=None)] + synth_train[1:3]
        with pytest.raises(DataError, match="no ground truth shape"):
            apr_train(faces, [np.zeros((5, 2))]*3, params)
        with pytest.raises(DataError, match="no training faces"):
            apr_train([], [], params)
        with pytest.raises(DataError):
            mean_unit_shape([])


class TestApr3d:

    def test_no_correction_needed(self, synth_train, synth_test, mean3d_face5):
        params = Apr3dParams(features=CENTER, regressor="linear", face_size=FACE_SIZE)
        model = apr3d_train(synth_train, [f.shape for f in synth_train], mean3d_face5, params, n_jobs=2)
        for f in synth_test[:5]:
            out = apr3d_apply(f.load_image(), f.shape, model, f.bbox)
            np.testing.assert_allclose(out, f.shape, atol=1e-4)

    def test_output_is_a_projection(self, synth_train, synth_test, mean3d_face5):
        inits = make_perturbed_inits(synth_train, mean_unit_shape(synth_train), TrainConfig(perturbations=3))
        params = Apr3dParams(forest=FOREST, features=CENTER, face_size=FACE_SIZE)
        model = apr3d_train(synth_train, inits, mean3d_face5, params, seed=2, n_jobs=2)
        assert len(model.stages) == 1 and len(model.stages[0]) == 3
        for f in synth_test[:3]:
            S = place_in_bbox(model.unit_mean, f.bbox)
            out = apr3d_apply(f.load_image(), S, model, f.bbox)
            assert fit_pose(mean3d_face5, out).residual < 1e-6

    def test_mean_shape_size(self, synth_train, mean3d):
        with pytest.raises(DataError):
            apr3d_train(synth_train, [f.shape for f in synth_train], mean3d,
                        Apr3dParams(features=CENTER, regressor="linear", face_size=FACE_SIZE))

    def test_recovers_a_yaw(self, mean3d, mean3d_face5):
        rng = np.random.default_rng(21)

        def poses(count):
            return [OrthoPose(k=128*rng.uniform(0.22, 0.28), yaw=0.4, pitch=rng.uniform(-0.1, 0.1),
                              roll=rng.uniform(-0.1, 0.1), tx=64 + rng.uniform(-4, 4), ty=64 + rng.uniform(-4, 4))
                    for _ in range(count)]

        def frontal(faces):
            return [project(mean3d_face5, replace(f.true_pose, yaw=0.0, pitch=0.0, roll=0.0)) for f in faces]

        train = synth_faces(40, seed=22, scheme="face5", mean3d=mean3d, poses=poses(40))
        test = synth_faces(10, seed=23, scheme="face5", mean3d=mean3d, poses=poses(10))
        params = Apr3dParams(forest=FOREST, features=CENTER, face_size=FACE_SIZE)
        model = apr3d_train(train, frontal(train), mean3d_face5, params, seed=4, n_jobs=2)
        for f, S in zip(test, frontal(test)):
            out = apr3d_apply(f.load_image(), S, model, f.bbox)
            assert fit_pose(mean3d_face5, out).pose.yaw == pytest.approx(0.4, abs=0.1)


class TestLbf:

    def test_structure(self, lbf_setup):
        model, _ = lbf_setup
        assert model.iterations == 2
        forests, regression = model.stages[0]
        assert len(forests) == 5
        assert regression.coef.shape == (10, model.code_length(0))

    def test_training_error_decreases(self, lbf_setup, synth_train):
        model, inits = lbf_setup
        before, after = [], []
        for f, init in zip(synth_train, inits):
            for S in init:
                before.append(np.sum((S - f.shape)**2))
                after.append(np.sum((lbf_apply(f.load_image(), S, model, f.bbox, n_iter=1) - f.shape)**2))
        assert np.mean(after) < np.mean(before)

    def test_held_out_error_decreases(self, lbf_setup, synth_test):
        model, _ = lbf_setup
        inits = make_lbf_inits(synth_test, TrainConfig(lbf_inits=2, seed=4))
        before, after = [], []
        for f, init in zip(synth_test, inits):
            for S in init:
                before.append(np.sum((S - f.shape)**2))
                after.append(np.sum((lbf_apply(f.load_image(), S, model, f.bbox) - f.shape)**2))
        assert np.mean(after) < np.mean(before)

    def test_linear_regressor_refused(self, synth_train):
        with pytest.raises(UsageError):
            lbf_train(synth_train, [f.shape for f in synth_train], LbfParams(regressor="linear"))


class TestPipeline:

    def bundle(self, synth_train, linear_apr, lbf_setup):
        return PipelineBundle(scheme="face5", unit_mean=mean_unit_shape(synth_train), face_size=FACE_SIZE,
                              apr=linear_apr, lbf=lbf_setup[0])

    def test_trace(self, synth_train, synth_test, linear_apr, lbf_setup):
        bundle = self.bundle(synth_train, linear_apr, lbf_setup)
        f = synth_test[0]
        trace = []
        out = full_pipeline(f.load_image(), f.bbox, bundle, ("apr", "lbf"), trace=trace)
        assert [label for label, _ in trace] == ["init", "apr", "lbf1", "lbf2"]
        np.testing.assert_allclose(trace[0][1], place_in_bbox(bundle.unit_mean, f.bbox))
        np.testing.assert_array_equal(trace[-1][1], out)

    def test_missing_stage(self, synth_train, synth_test, linear_apr, lbf_setup):
        bundle = self.bundle(synth_train, linear_apr, lbf_setup)
        f = synth_test[0]
        with pytest.raises(UsageError):
            full_pipeline(f.load_image(), f.bbox, bundle, ("apr", "apr3d"))
        with pytest.raises(UsageError):
            full_pipeline(f.load_image(), f.bbox, bundle, ("lbf2",))

    def test_merge(self, synth_train, linear_apr, lbf_setup):
        unit_mean = mean_unit_shape(synth_train)
        a = PipelineBundle(scheme="face5", unit_mean=unit_mean, face_size=FACE_SIZE, apr=linear_apr)
        b = PipelineBundle(scheme="face5", unit_mean=unit_mean, face_size=FACE_SIZE, lbf=lbf_setup[0])
        assert merge_bundles(a, b).available() == ("apr", "lbf")
        with pytest.raises(UsageError):
            merge_bundles(a, PipelineBundle(scheme="ibug68", unit_mean=unit_mean))

    def test_saved_bundle_predicts_the_same(self, synth_train, synth_test, linear_apr, lbf_setup, tmp_path):
        bundle = self.bundle(synth_train, linear_apr, lbf_setup)
        directory = str(tmp_path / "model")
        save_bundle(bundle, directory)
        with open(os.path.join(directory, "manifest.json")) as foo:
            manifest = json.load(foo)
        assert manifest["stage_order"] == ["apr", "apr3d", "lbf"]
        assert sorted(manifest["stages"]) == ["apr", "lbf"]
        assert manifest["stages"]["lbf"]["features"]["placement"] == "landmarks"

        loaded = load_bundle(directory)
        assert loaded.available() == ("apr", "lbf")
        for f in synth_test[:3]:
            np.testing.assert_allclose(full_pipeline(f.load_image(), f.bbox, loaded, ("apr", "lbf")),
                                       full_pipeline(f.load_image(), f.bbox, bundle, ("apr", "lbf")), atol=1e-12)


    def test_bundle_files_are_reproducible(self, synth_train, linear_apr, lbf_setup, tmp_path):
        bundle = self.bundle(synth_train, linear_apr, lbf_setup)
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        save_bundle(bundle, a)
        save_bundle(bundle, b)
        assert sorted(os.listdir(a)) == sorted(os.listdir(b))
        for name in os.listdir(a):
            with open(os.path.join(a, name), "rb") as fa, open(os.path.join(b, name), "rb") as fb:
                assert fa.read() == fb.read(), name

    def test_saved_model(self, linear_apr, synth_test, tmp_path):
        fname = str(tmp_path / "apr.krfws")
        save_model(linear_apr, fname)
        loaded = load_model(fname)
        assert loaded.kind == "apr" and loaded.features == linear_apr.features
        f = synth_test[1]
        np.testing.assert_allclose(apr_apply(f.load_image(), f.shape, loaded, f.bbox),
                                   apr_apply(f.load_image(), f.shape, linear_apr, f.bbox), atol=1e-12)

    def test_missing_bundle(self, tmp_path):
        with pytest.raises(DataError):
            load_bundle(str(tmp_path))
