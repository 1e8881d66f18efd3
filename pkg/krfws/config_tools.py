'''
Run configuration: a flat dictionary of dotted keys.

Configuration files hold one "key = value" pair per line; text after #
is a comment. Values are converted to the type of the default value of
the key. Lists (pyramid levels, ridge penalties) are comma separated.
'''

import os

from krfws.exceptions import UsageError
from krfws.forest_tools import ForestParams
from krfws.align_tools import (AprParams, Apr3dParams, FeatureConfig, LbfParams, REGRESSORS,
                               TrainConfig)


DEFAULTS = {
    "seed": 0,
    "scheme": "ibug68",
    "mean_shape": "",
    "forest.k": 2,
    "forest.min_samples": 5,
    "forest.bagging": 0.63,
    "forest.weighted": True,
    "svm.cost": 1.0,
    "svm.tol": 0.1,
    "svm.max_iter": 1000,
    "kmeans.restarts": 5,
    "face.size": 64,
    "apr.iterations": 2,
    "apr.trees": 10,
    "apr.depth": 7,
    "apr.patch": 64,
    "apr.levels": (64, 32, 16),
    "apr.hog": "extended",
    "apr.regressor": "krfws",
    "apr.features": "center",
    "apr3d.iterations": 1,
    "apr3d.trees": 10,
    "apr3d.depth": 7,
    "lbf.iterations": 5,
    "lbf.trees": 5,
    "lbf.depth": 7,
    "lbf.patch": 32,
    "lbf.levels": (32, 16, 8),
    "lbf.hog": "basic",
    "lbf.inits": 5,
    "lbf.lambdas": (0.1, 1.0, 10.0),
    "train.perturbations": 10,
    "train.scale_range": 0.1,
    "train.shift_range": 0.05,
    "train.rotation_deg": 15.0,
    "pose.trees": 20,
    "pose.depth": 20,
    "pose.patch": 64,
    "pose.levels": (64, 32, 16),
    "pose.hog": "extended",
    "pose.folds": 2,
    "synth.count": 300,
    "synth.test": 200,
    "synth.size": 128,
    "synth.scheme": "face5",
}

_TRUE = ("true", "yes", "on", "1")
_FALSE = ("false", "no", "off", "0")


def coerce(key, value):

    '''
    Converts value to the type of the default value of key.
    '''

    if key not in DEFAULTS:
        raise UsageError(f"unknown configuration key '{key}'")
    default = DEFAULTS[key]
    if not isinstance(value, str):
        value = str(value) if not isinstance(value, (tuple, list)) else ",".join(str(v) for v in value)
    value = value.strip()
    try:
        if isinstance(default, bool):
            if value.lower() in _TRUE:
                return True
            if value.lower() in _FALSE:
                return False
            raise ValueError
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            cast = type(default[0])
            return tuple(cast(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"invalid value '{value}' for configuration key '{key}'")
    return value


def read_config(fname):

    '''
    Reads a configuration file.

    Returns:
        A dictionary with the keys set in the file.
    '''

    if not os.path.isfile(fname):
        raise UsageError(f"{fname}: configuration file not found")
    values = {}
    with open(fname) as foo:
        for lineno, line in enumerate(foo, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{fname}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                values[key] = coerce(key, value)
            except UsageError as ex:
                raise UsageError(f"{fname}:{lineno}: {ex}")
    return values


def make_config(fname=None, overrides=None):

    '''
    Full configuration: defaults, updated by the file fname (if given) and
    then by the overrides dictionary.
    '''

    cfg = dict(DEFAULTS)
    if fname is not None:
        cfg.update(read_config(fname))
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = coerce(key, value)
    return cfg


def forest_params(cfg, trees, depth):
    return ForestParams(n_trees=trees, K=cfg["forest.k"], max_depth=depth,
                        min_samples=cfg["forest.min_samples"], weighted=cfg["forest.weighted"],
                        bagging_fraction=cfg["forest.bagging"], cost=cfg["svm.cost"],
                        tol=cfg["svm.tol"], max_iter=cfg["svm.max_iter"],
                        restarts=cfg["kmeans.restarts"])


def _regressor(cfg, kind="krfws"):
    if kind not in REGRESSORS:
        raise UsageError(f"unknown regressor '{kind}', expected one of {REGRESSORS}")
    # forest.weighted=false turns every KRFWS regressor into a plain KRF
    if kind == "krfws" and not cfg["forest.weighted"]:
        return "krf"
    return kind


def _landmark_features(cfg):
    return FeatureConfig(patch=cfg["lbf.patch"], levels=cfg["lbf.levels"], hog=cfg["lbf.hog"],
                         placement="landmarks")


def _center_features(cfg):
    if cfg["apr.features"] == "landmarks":
        return _landmark_features(cfg)
    if cfg["apr.features"] != "center":
        raise UsageError(f"unknown APR feature placement '{cfg['apr.features']}'")
    return FeatureConfig(patch=cfg["apr.patch"], levels=cfg["apr.levels"], hog=cfg["apr.hog"],
                         placement="center")


def apr_params(cfg):
    return AprParams(iterations=cfg["apr.iterations"],
                     forest=forest_params(cfg, cfg["apr.trees"], cfg["apr.depth"]),
                     features=_center_features(cfg), regressor=_regressor(cfg, cfg["apr.regressor"]),
                     face_size=cfg["face.size"])


def apr3d_params(cfg):
    features = FeatureConfig(patch=cfg["apr.patch"], levels=cfg["apr.levels"], hog=cfg["apr.hog"])
    return Apr3dParams(iterations=cfg["apr3d.iterations"],
                       forest=forest_params(cfg, cfg["apr3d.trees"], cfg["apr3d.depth"]),
                       features=features, regressor=_regressor(cfg), face_size=cfg["face.size"])


def lbf_params(cfg):
    return LbfParams(iterations=cfg["lbf.iterations"],
                     forest=forest_params(cfg, cfg["lbf.trees"], cfg["lbf.depth"]),
                     features=_landmark_features(cfg), regressor=_regressor(cfg),
                     lambdas=cfg["lbf.lambdas"], face_size=cfg["face.size"])


def train_config(cfg):
    return TrainConfig(perturbations=cfg["train.perturbations"], scale_range=cfg["train.scale_range"],
                       shift_range=cfg["train.shift_range"], rotation_deg=cfg["train.rotation_deg"],
                       lbf_inits=cfg["lbf.inits"], seed=cfg["seed"])


def pose_features(cfg):
    return FeatureConfig(patch=cfg["pose.patch"], levels=cfg["pose.levels"], hog=cfg["pose.hog"])
