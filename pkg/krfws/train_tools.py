from krfws.run_base import RunBase
from krfws.align_tools import (INIT_STAGES, PipelineBundle, STAGES, apr_train, apr3d_train,
                               full_pipeline, initialize_shape, lbf_train, load_bundle,
                               make_lbf_inits, make_perturbed_inits, mean_unit_shape,
                               merge_bundles, save_bundle)
from krfws.config_tools import apr_params, apr3d_params, lbf_params, train_config
from krfws.data_tools import get_scheme, load_annotated_image, load_bbox_file, make_300w_splits, \
    load_pts, load_split_list, save_pts, synth_faces
from krfws.evaluate_tools import NORMS, evaluate_shapes
from krfws.exceptions import DataError, UsageError
from krfws.geom_tools import load_mean_shape
from krfws.helpers import announce, progress, worker_count

import os
from logging import getLogger, NullHandler

import numpy as np
from joblib import Parallel, delayed

logger = getLogger(__name__)
logger.addHandler(NullHandler())


class TrainPipeline(RunBase):

    '''
    Class defining methods that train the stages of the face alignment
    pipeline and use the trained models.
    '''

    def mean3d(self):

        '''
        The 3D mean shape of the configured landmark scheme.
        '''

        fname = self.cfg["mean_shape"] or None
        return get_scheme(self.cfg["scheme"]).select(load_mean_shape(fname))

    def load_faces(self, data_root=None, split="training", list_file=None, bbox_file=None, synthetic=None):

        '''
        Loads annotated faces.

        :data_root:
            Root of a 300-W style dataset.
        :split:
            Name of the split: training, common, challenging, full or custom
            (the images named in list_file).
        :synthetic:
            If an integer, that many synthetic faces are rendered instead
            (seeded with the run seed; the 'test' split uses a different
            stream than the others).

        Returns:
            A list of AnnotatedFace objects.
        '''

        if synthetic:
            stream = 61 if split in ("test", "common", "challenging", "full") else 60
            seed = int(np.random.SeedSequence([self.seed, stream]).generate_state(1)[0])
            return synth_faces(synthetic, seed=seed, scheme=self.cfg["scheme"], mean3d=load_mean_shape(
                self.cfg["mean_shape"] or None), size=self.cfg["synth.size"])

        if data_root is None:
            raise UsageError("a dataset directory is needed")
        if split == "custom":
            if list_file is None:
                raise UsageError("the custom split needs a list file")
            if bbox_file is None and os.path.isfile(os.path.join(data_root, "bboxes.txt")):
                bbox_file = os.path.join(data_root, "bboxes.txt")
            bboxes = load_bbox_file(bbox_file) if bbox_file else {}
            return [load_annotated_image(data_root, rel, bboxes, self.cfg["scheme"])
                    for rel in load_split_list(list_file)]
        splits = make_300w_splits(data_root, bbox_file=bbox_file, scheme=self.cfg["scheme"])
        if split not in splits:
            raise UsageError(f"unknown split '{split}', expected one of {sorted(splits)} or custom")
        faces = list(splits[split].members)
        if not faces:
            raise DataError(f"{data_root}: the '{split}' split is empty")
        return faces

    def get_bundle(self):

        '''
        The bundle saved in the model directory, or None.
        '''

        if os.path.isfile(os.path.join(self.model_dir, "manifest.json")):
            return load_bundle(self.model_dir)
        return None

    def hand_over(self, faces, inits, bundle, stages):

        '''
        Passes initial shapes through trained initialization stages.

        :inits:
            One array of initial shapes (m, n, 2) per face.
        :stages:
            Initialization stages to run (a subset of apr, apr3d).

        Returns:
            The shapes the stages hand over, in the layout of inits.
        '''

        def one(f, init):
            image = f.load_image()
            return np.stack([initialize_shape(image, S, bundle, f.bbox, stages) for S in init])

        return Parallel(n_jobs=worker_count(self.n_jobs), prefer="threads")(
            delayed(one)(f, init) for f, init in zip(faces, inits))

    def train_stage(self, stage, faces, bundle=None, save=True, init_stages=None):

        '''
        Trains one stage on faces and adds it to the model bundle.

        :stage:
            'apr', 'apr3d' or 'lbf'.
        :faces:
            Training faces.
        :bundle:
            PipelineBundle the stage is added to; the bundle saved in the
            model directory (if any) when None.
        :save:
            If True, the updated bundle is saved in the model directory.
        :init_stages:
            Trained stages that precede this one at prediction time. 3D-APR
            and LBF are trained on the shapes these stages hand over. If
            None, all earlier stages present in the bundle are used.

        Returns:
            The updated PipelineBundle.
        '''

        if stage not in STAGES:
            raise UsageError(f"unknown stage '{stage}'")
        if bundle is None:
            bundle = self.get_bundle()
        if bundle is not None and bundle.scheme != self.cfg["scheme"]:
            raise UsageError(f"the saved models use the {bundle.scheme} scheme, not {self.cfg['scheme']}")
        earlier = INIT_STAGES[:STAGES.index(stage)]
        if bundle is None:
            init_stages = ()
        elif init_stages is None:
            init_stages = tuple(s for s in earlier if getattr(bundle, s) is not None)
        else:
            init_stages = tuple(s for s in earlier if s in init_stages)
            for s in init_stages:
                if getattr(bundle, s) is None:
                    raise UsageError(f"stage '{s}' must be trained before {stage}")
        config = train_config(self.cfg)
        unit_mean = mean_unit_shape(faces)
        announce(f"Training {stage} on {len(faces)} faces")

        if stage == "lbf":
            inits = make_lbf_inits(faces, config)
        else:
            inits = make_perturbed_inits(faces, unit_mean, config)
        if init_stages:
            announce(f"Passing initial shapes through {', '.join(init_stages)}")
            inits = self.hand_over(faces, inits, bundle, init_stages)

        if stage == "apr":
            model = apr_train(faces, inits, apr_params(self.cfg), seed=self.seed, n_jobs=self.n_jobs)
        elif stage == "apr3d":
            model = apr3d_train(faces, inits, self.mean3d(), apr3d_params(self.cfg),
                                seed=self.seed, n_jobs=self.n_jobs)
        else:
            model = lbf_train(faces, inits, lbf_params(self.cfg), seed=self.seed, n_jobs=self.n_jobs)

        new = PipelineBundle(scheme=self.cfg["scheme"], unit_mean=unit_mean,
                             face_size=self.cfg["face.size"], **{stage: model})
        bundle = new if bundle is None else merge_bundles(bundle, new)
        if save:
            self.make_dirs()
            save_bundle(bundle, self.model_dir)
            info = {"faces": len(faces), "iterations": len(model.stages)}
            if init_stages:
                info["init_stages"] = list(init_stages)
            self.record_command(f"train-{stage.replace('apr3d', '3dapr')}", info)
        announce(f"Finished training {stage}")
        return bundle

    def align(self, faces, bundle, stages, trace=False):

        '''
        Runs the pipeline on faces, one worker thread per image.

        :trace:
            If True, every result is the list of (label, shape) pairs
            recorded after each stage instead of the final shape.

        Returns:
            A list with one result per face, in the order of faces.
        '''

        def one(i, f):
            progress(f"Aligning face {i + 1}/{len(faces)}")
            steps = [] if trace else None
            S = full_pipeline(f.load_image(), f.bbox, bundle, stages, trace=steps)
            return steps if trace else S

        return Parallel(n_jobs=worker_count(self.n_jobs), prefer="threads")(
            delayed(one)(i, f) for i, f in enumerate(faces))

    def predict(self, faces, stages=None, bundle=None, save=True):

        '''
        Aligns faces with the trained bundle.

        :stages:
            Stages to run; all trained stages if None.
        :save:
            If True, predictions are written as .pts files under
            main_dir/predictions, mirroring the face names.

        Returns:
            A dictionary face name -> predicted shape.
        '''

        bundle = bundle or self.get_bundle()
        if bundle is None:
            raise UsageError(f"{self.model_dir}: no trained models")
        stages = bundle.available() if stages is None else tuple(stages)
        shapes = self.align(faces, bundle, stages)
        preds = {f.name: S for f, S in zip(faces, shapes)}
        if save:
            for f in faces:
                fname = os.path.join(self.main_dir, "predictions", os.path.splitext(f.name)[0] + ".pts")
                save_pts(fname, preds[f.name])
        announce(f"Aligned {len(faces)} faces")
        if save:
            self.record_command("predict", {"faces": len(faces), "stages": list(stages)})
        return preds

    def evaluate(self, faces, norms=NORMS, subsets=None, predictions_dir=None, label="eval", save=True):

        '''
        Computes the normalized landmark errors of faces.

        :faces:
            List of AnnotatedFace objects with ground truth shapes.
        :norms:
            Normalization modes to report.
        :subsets:
            Optional dictionary face name -> subset label.
        :predictions_dir:
            Directory of .pts predictions named after the faces; if None
            the faces are aligned with the trained bundle.
        :label:
            Prefix of the CSV reports written to the reports directory.

        Returns:
            An EvalReport.
        '''

        gts = {f.name: f.shape for f in faces}
        if predictions_dir is None:
            preds = self.predict(faces, save=False)
        else:
            preds = {}
            for f in faces:
                fname = os.path.join(predictions_dir, os.path.splitext(f.name)[0] + ".pts")
                preds[f.name] = load_pts(fname)
        report = evaluate_shapes(preds, gts, subsets=subsets, modes=norms, scheme=self.cfg["scheme"])
        for mode in report.modes:
            announce(f"Mean {mode} error: {report.mean(mode):.3f}%")
        if save:
            self.make_dirs()
            report.write(self.reports_dir, prefix=label)
            self.record_command(label, {"faces": len(faces), "norms": list(report.modes)})
        return report

    def load_labeled_faces(self, data_root=None, split="full", list_file=None, bbox_file=None, synthetic=None):

        '''
        Like load_faces, but also returns a dictionary face name -> subset
        label; faces of the full 300-W split are labeled 'common' or
        'challenging'.
        '''

        if split == "full" and not synthetic:
            if data_root is None:
                raise UsageError("a dataset directory is needed")
            splits = make_300w_splits(data_root, bbox_file=bbox_file, scheme=self.cfg["scheme"])
            faces = list(splits["full"].members)
            if not faces:
                raise DataError(f"{data_root}: the 'full' split is empty")
            subsets = {f.name: name for name in ("common", "challenging") for f in splits[name].members}
            return faces, subsets
        faces = self.load_faces(data_root, split, list_file, bbox_file, synthetic)
        return faces, {f.name: split for f in faces}
