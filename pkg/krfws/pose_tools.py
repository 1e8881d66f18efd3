from krfws.run_base import RunBase
from krfws.align_tools import _derive_seed, normalize_face
from krfws.config_tools import forest_params, pose_features
from krfws.data_tools import load_pointing04, pose_folds, synth_faces
from krfws.evaluate_tools import pose_mae
from krfws.exceptions import DataError
from krfws.forest_tools import train_forest
from krfws.geom_tools import load_mean_shape
from krfws.helpers import announce, progress, worker_count

import os
from dataclasses import replace
from logging import getLogger, NullHandler

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

logger = getLogger(__name__)
logger.addHandler(NullHandler())


class HeadPoseExperiment(RunBase):

    '''
    Class defining methods of a head pose estimation experiment: a single
    forest regressing (yaw, pitch) from a PHOG descriptor of the face,
    evaluated with cross-validation.
    '''

    def __init__(self, main_dir=None, config=None, overrides=None, n_jobs=None):
        super().__init__(main_dir=main_dir, config=config, overrides=overrides, n_jobs=n_jobs)

        # per-image predictions of all folds
        self.predictions_csv = os.path.join(self.reports_dir, "pose_predictions.csv")
        # MAE of every fold with their mean and standard deviation
        self.folds_csv = os.path.join(self.reports_dir, "pose_folds.csv")

    def load_faces(self, data_root=None, bbox_file=None, synthetic=None):

        '''
        Loads faces with pose labels.

        :data_root:
            Root of a Pointing'04 style dataset.
        :synthetic:
            If an integer, that many synthetic faces are rendered instead;
            they are split into two sessions so that 2-fold validation
            has something to split on.
        '''

        if synthetic:
            seed = _derive_seed(self.seed, 62)
            faces = synth_faces(synthetic, seed=seed, scheme=self.cfg["synth.scheme"],
                                mean3d=load_mean_shape(self.cfg["mean_shape"] or None),
                                size=self.cfg["synth.size"], yaw_range=1.2, pitch_range=0.6)
            half = (len(faces) + 1) // 2
            return [replace(f, session=1 if i < half else 2) for i, f in enumerate(faces)]
        if data_root is None:
            raise DataError("a head pose dataset directory is needed")
        return load_pointing04(data_root, bbox_file=bbox_file)

    def descriptors(self, faces):

        '''
        PHOG descriptor of every face, computed at the center of the
        normalized face box.

        Returns:
            Array of shape (num_faces, descriptor_length).
        '''

        features = pose_features(self.cfg)
        face_size = self.cfg["face.size"]

        def describe(f):
            frame, img = normalize_face(f, face_size)
            center = np.array([[frame.size/2, frame.size/2]])
            return features.extract(img, center)

        rows = Parallel(n_jobs=worker_count(self.n_jobs), prefer="threads")(
            delayed(describe)(f) for f in faces)
        return np.vstack(rows)

    def run(self, faces, n_folds=None, save=True):

        '''
        Runs cross-validation.

        :faces:
            List of AnnotatedFace objects with pose labels.
        :n_folds:
            Number of folds; the pose.folds configuration value if None.
            2 folds split by recording session, other values at random.
        :save:
            If True, CSV reports and the run manifest are written.

        Returns:
            A pandas DataFrame with columns 'fold', 'yaw_mae', 'pitch_mae',
            'average_mae': one row per fold followed by 'mean' and 'std'
            rows.
        '''

        if n_folds is None:
            n_folds = self.cfg["pose.folds"]
        missing = [f.name for f in faces if f.pose is None]
        if missing:
            raise DataError(f"{len(missing)} faces have no pose label, e.g. {missing[0]}")

        names = np.array([f.name for f in faces])
        labels = np.array([f.pose for f in faces], dtype=np.float64)
        announce(f"Computing descriptors of {len(faces)} faces")
        X = self.descriptors(faces)
        params = forest_params(self.cfg, self.cfg["pose.trees"], self.cfg["pose.depth"])

        pred_rows = []
        fold_rows = []
        seconds = []
        for k, (train, test) in enumerate(pose_folds(faces, n_folds, seed=self.seed)):
            progress(f"Training fold {k + 1}/{n_folds} on {len(train)} faces")
            forest = train_forest(X[train], labels[train], params,
                                  seed=_derive_seed(self.seed, 50, k), n_jobs=self.n_jobs)
            seconds.extend(forest.train_seconds)
            preds = forest.predict(X[test])
            mae = pose_mae(preds, labels[test])
            logger.info("fold %d: yaw MAE %.3f, pitch MAE %.3f", k, mae.yaw, mae.pitch)
            fold_rows.append({"fold": str(k), "yaw_mae": mae.yaw, "pitch_mae": mae.pitch,
                              "average_mae": mae.average})
            for i, p in zip(test, preds):
                pred_rows.append({"name": names[i], "fold": k, "yaw": labels[i, 0],
                                  "pitch": labels[i, 1], "yaw_pred": p[0], "pitch_pred": p[1]})

        folds = pd.DataFrame(fold_rows, columns=["fold", "yaw_mae", "pitch_mae", "average_mae"])
        stats = folds[["yaw_mae", "pitch_mae", "average_mae"]]
        # population std, so that a single fold gives 0 instead of NaN
        folds = pd.concat([folds, pd.DataFrame([{"fold": "mean", **stats.mean().to_dict()},
                                                {"fold": "std", **stats.std(ddof=0).to_dict()}])],
                          ignore_index=True)
        predictions = pd.DataFrame(pred_rows, columns=["name", "fold", "yaw", "pitch",
                                                       "yaw_pred", "pitch_pred"])
        predictions = predictions.sort_values("name").reset_index(drop=True)
        average = float(stats["average_mae"].mean())
        announce(f"Average MAE over {n_folds} folds: {average:.3f} degrees")

        if save:
            self.make_dirs()
            predictions.to_csv(self.predictions_csv, index=False)
            folds.to_csv(self.folds_csv, index=False)
            self.record_command("train-pose", {"faces": len(faces), "folds": int(n_folds),
                                               "weighted": bool(params.weighted),
                                               "seconds_per_tree": float(np.mean(seconds))})
        return folds
