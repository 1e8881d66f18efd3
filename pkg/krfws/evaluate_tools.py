'''
Landmark and head pose error metrics and their CSV reports.
'''

import os
from dataclasses import dataclass

import numpy as np
import pandas as pd

from krfws.exceptions import DataError, NumericError
from krfws.data_tools import get_scheme
from krfws.geom_tools import as_shape


NORMS = ("inter-pupil", "inter-ocular")


def normalization_distance(gt, mode="inter-pupil", scheme="ibug68"):

    '''
    Distance used to normalize landmark errors.

    :gt:
        Ground truth shape.
    :mode:
        'inter-pupil': distance of the centroids of the landmarks around the
        two eyes; 'inter-ocular': distance of the outer eye corners.
    :scheme:
        Landmark scheme name or LandmarkScheme.
    '''

    scheme = get_scheme(scheme)
    gt = as_shape(gt)
    if len(gt) != scheme.n_points:
        raise DataError(f"shape has {len(gt)} landmarks, the {scheme.name} scheme {scheme.n_points}")
    if mode == "inter-pupil":
        left = gt[list(scheme.left_eye)].mean(axis=0)
        right = gt[list(scheme.right_eye)].mean(axis=0)
    elif mode == "inter-ocular":
        left, right = gt[scheme.outer_corners[0]], gt[scheme.outer_corners[1]]
    else:
        raise ValueError(f"unknown normalization '{mode}', expected one of {NORMS}")
    dist = float(np.linalg.norm(right - left))
    if dist <= 1e-12:
        raise NumericError("eye positions coincide, the error cannot be normalized")
    return dist


def normalized_error(pred, gt, mode="inter-pupil", scheme="ibug68"):

    '''
    Mean Euclidean landmark error as a percentage of the normalization
    distance of the ground truth shape.
    '''

    pred, gt = as_shape(pred), as_shape(gt)
    if pred.shape != gt.shape:
        raise DataError(f"predicted shape {pred.shape} does not match ground truth {gt.shape}")
    dist = normalization_distance(gt, mode, scheme)
    return 100.0 * float(np.mean(np.linalg.norm(pred - gt, axis=1))) / dist


@dataclass(frozen=True)
class PoseMae:

    yaw: float
    pitch: float
    average: float


def pose_mae(preds, labels):

    '''
    Mean absolute errors of head pose predictions.

    :preds:
    :labels:
        Arrays of (yaw, pitch) pairs in degrees.

    Returns:
        PoseMae with the yaw MAE, the pitch MAE and their mean.
    '''

    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 2)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 2)
    if len(preds) == 0:
        raise DataError("no pose predictions to evaluate")
    if preds.shape != labels.shape:
        raise DataError(f"{len(preds)} predictions for {len(labels)} labels")
    yaw, pitch = np.mean(np.abs(preds - labels), axis=0)
    return PoseMae(yaw=float(yaw), pitch=float(pitch), average=float((yaw + pitch) / 2))


@dataclass(frozen=True, eq=False)
class EvalReport:

    '''
    Landmark errors of a set of images.

    :table:
        pandas DataFrame with one row per image (sorted by name): columns
        'name', 'subset' and one error column per normalization mode.
    :modes:
        Normalization modes present in the table.
    '''

    table: pd.DataFrame
    modes: tuple

    def summary(self):

        '''
        Mean error of every subset and of all images together ('full').

        Returns:
            DataFrame with columns 'split', 'norm', 'count', 'mean_error'.
        '''

        rows = []
        subsets = sorted(self.table["subset"].unique())
        groups = [(s, self.table[self.table["subset"] == s]) for s in subsets if s != "full"]
        groups.append(("full", self.table))
        for mode in self.modes:
            for name, df in groups:
                rows.append({"split": name, "norm": mode, "count": len(df),
                             "mean_error": float(df[mode].mean()) if len(df) else float("nan")})
        return pd.DataFrame(rows, columns=["split", "norm", "count", "mean_error"])

    def mean(self, mode="inter-pupil", subset=None):
        df = self.table if subset in (None, "full") else self.table[self.table["subset"] == subset]
        return float(df[mode].mean())

    def write(self, out_dir, prefix="eval"):

        '''
        Saves the per-image table and the summary as CSV files.

        Returns:
            Names of the two files.
        '''

        if not os.path.isdir(out_dir):
            os.makedirs(out_dir)
        per_image = os.path.join(out_dir, f"{prefix}_images.csv")
        summary = os.path.join(out_dir, f"{prefix}_summary.csv")
        self.table.to_csv(per_image, index=False)
        self.summary().to_csv(summary, index=False)
        return per_image, summary


def evaluate_shapes(preds, gts, subsets=None, modes=NORMS, scheme="ibug68"):

    '''
    Computes the landmark errors of predicted shapes.

    :preds:
    :gts:
        Dictionaries image name -> shape; every ground truth shape needs
        a prediction.
    :subsets:
        Optional dictionary image name -> subset label ('common',
        'challenging', ...). Images without a label belong to 'full'.
    :modes:
        Normalization modes to report.

    Returns:
        An EvalReport.
    '''

    modes = tuple(modes)
    for m in modes:
        if m not in NORMS:
            raise ValueError(f"unknown normalization '{m}', expected one of {NORMS}")
    subsets = subsets or {}
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise DataError(f"no prediction for {len(missing)} images, e.g. {missing[0]}")

    rows = []
    for name in sorted(gts):
        row = {"name": name, "subset": subsets.get(name, "full")}
        for m in modes:
            row[m] = normalized_error(preds[name], gts[name], m, scheme)
        rows.append(row)
    table = pd.DataFrame(rows, columns=["name", "subset"] + list(modes))
    return EvalReport(table=table, modes=modes)
