'''
Face shape initialization and alignment.

Three stages refine a landmark shape inside a face box:

    APR     regresses an affine transform of the whole shape from a single
            PHOG descriptor at the shape center,
    3D-APR  fits the scaled orthographic pose of a 3D mean shape to the
            current shape, regresses a pose update and re-projects the
            mean shape,
    LBF     a cascade in which per-landmark forests turn local PHOG
            descriptors into sparse leaf codes, and a global ridge
            regression maps the codes to a shape update.

Every stage works on faces normalized with FaceFrame: the image is cropped
around the face box and rescaled so that the box diagonal becomes
face_size*sqrt(2) pixels. Shapes passed to the public functions are in
image pixels.
'''

import json
import os
from dataclasses import asdict, dataclass, field
from logging import getLogger, NullHandler

import numpy as np
import scipy.sparse as sp
from joblib import Parallel, delayed
from sklearn.linear_model import Ridge

from krfws.exceptions import DataError, UsageError
from krfws.forest_tools import (ForestParams, KForest, forest_from_arrays, forest_to_arrays,
                                leaf_codes, train_forest)
from krfws.geom_tools import (AffineParams, MeanShape3D, apply_about_centroid, apply_affine,
                              fit_pose, project, similarity_align)
from krfws.helpers import progress, worker_count
from krfws.imgproc_tools import HogParams, crop_and_scale, descriptor_length, phog_at
from krfws.store_tools import read_container, write_container

logger = getLogger(__name__)
logger.addHandler(NullHandler())


BUNDLE_FORMAT = 1
MODEL_FORMAT = 1
STAGES = ("apr", "apr3d", "lbf")
# stages that move the starting shape before LBF
INIT_STAGES = ("apr", "apr3d")

# target columns of the APR regressors: a, b, c, d and joint (tx, ty)
APR_GROUPS = ((0,), (1,), (2,), (3,), (4, 5))
# target columns of the 3D-APR regressors: k, (yaw, pitch, roll), (tx, ty)
APR3D_GROUPS = ((0,), (1, 2, 3), (4, 5))

REGRESSORS = ("krfws", "krf", "linear")


def _derive_seed(*keys):
    return int(np.random.SeedSequence([abs(int(k)) for k in keys]).generate_state(1)[0])


@dataclass(frozen=True)
class FaceFrame:

    '''
    Similarity normalizing a face.

    :cx:
    :cy:
        Center of the face box in image pixels.
    :scale:
        Normalized pixels per image pixel.
    :size:
        Side of the normalized image.
    '''

    cx: float
    cy: float
    scale: float
    size: int

    @classmethod
    def from_bbox(cls, bbox, face_size=64):
        x, y, w, h = (float(v) for v in bbox)
        if not (w > 0 and h > 0):
            raise DataError(f"face box must have positive area, got {bbox}")
        return cls(cx=x + w/2, cy=y + h/2, scale=face_size*np.sqrt(2) / np.hypot(w, h),
                   size=2*int(face_size))

    def to_frame(self, S):
        return (np.asarray(S, dtype=np.float64) - [self.cx, self.cy]) * self.scale + self.size/2

    def from_frame(self, S):
        return (np.asarray(S, dtype=np.float64) - self.size/2) / self.scale + [self.cx, self.cy]

    def normalize(self, img):
        return crop_and_scale(img, (self.cx, self.cy), self.scale, self.size)


def unit_shape(shape, bbox):

    '''
    Shape expressed in coordinates of its face box, (0, 0) being the
    top-left and (1, 1) the bottom-right corner.
    '''

    x, y, w, h = bbox
    return (np.asarray(shape, dtype=np.float64) - [x, y]) / [w, h]


def place_in_bbox(unit, bbox):

    '''
    Inverse of unit_shape.
    '''

    x, y, w, h = bbox
    return np.asarray(unit, dtype=np.float64) * [w, h] + [x, y]


def _check_shapes(faces):
    if len(faces) == 0:
        raise DataError("no training faces")
    for f in faces:
        if f.shape is None:
            raise DataError(f"{f.name}: no ground truth shape")
    n = len(faces[0].shape)
    for f in faces:
        if len(f.shape) != n:
            raise DataError(f"{f.name}: landmark count differs from {n}")
    return n


def mean_unit_shape(faces):

    '''
    Mean of the ground truth shapes of faces in face box coordinates.
    '''

    _check_shapes(faces)
    return np.mean([unit_shape(f.shape, f.bbox) for f in faces], axis=0)


def estimate_bbox(S, unit_mean):

    '''
    Square face box in which the mean unit shape best matches S.
    '''

    p = similarity_align(unit_mean, S)
    side = float(np.hypot(p.a, p.c))
    cx, cy = apply_affine([[0.5, 0.5]], p)[0]
    return (cx - side/2, cy - side/2, side, side)


def _reference_shape(unit_mean, face_size):
    # mean shape in normalized coordinates of a square face box
    return (unit_mean - 0.5) * face_size + face_size


@dataclass(frozen=True)
class FeatureConfig:

    '''
    :patch:
        Side of the PHOG patch in normalized pixels.
    :levels:
        Cell sizes of the PHOG levels.
    :hog:
        HOG variant, 'basic' or 'extended'.
    :placement:
        'center': one patch at the shape centroid; 'landmarks': one patch
        at every landmark, concatenated.
    '''

    patch: int = 64
    levels: tuple = (64, 32, 16)
    hog: str = "extended"
    placement: str = "center"

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(c) for c in self.levels))
        if self.placement not in ("center", "landmarks"):
            raise UsageError(f"unknown feature placement '{self.placement}'")
        descriptor_length(self.patch, self.levels, self.hog_params())

    def hog_params(self):
        return HogParams(variant=self.hog)

    def length(self, n_points):
        one = descriptor_length(self.patch, self.levels, self.hog_params())
        return one if self.placement == "center" else one * n_points

    def extract(self, img, S):
        params = self.hog_params()
        if self.placement == "center":
            return phog_at(img, S.mean(axis=0), self.patch, self.levels, params)
        return np.concatenate([phog_at(img, p, self.patch, self.levels, params) for p in S])

    def extract_per_landmark(self, img, S):
        params = self.hog_params()
        return np.stack([phog_at(img, p, self.patch, self.levels, params) for p in S])


@dataclass(frozen=True, eq=False)
class LinearMap:

    '''
    Affine map X -> X coef^T + intercept; X may be a scipy sparse matrix.
    '''

    coef: np.ndarray
    intercept: np.ndarray

    def predict(self, X):
        out = X @ self.coef.T
        return np.asarray(out) + self.intercept


def fit_ridge(X, Y, alpha=1.0):

    '''
    Ridge regression of Y on X (dense or sparse) as a LinearMap.
    '''

    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    solver = "sparse_cg" if sp.issparse(X) else "auto"
    ridge = Ridge(alpha=alpha, fit_intercept=True, solver=solver).fit(X, Y)
    return LinearMap(coef=np.atleast_2d(ridge.coef_).reshape(Y.shape[1], -1),
                     intercept=np.atleast_1d(ridge.intercept_).astype(np.float64))


def _fit_regressor(kind, X, Y, params, seed, n_jobs):
    if kind == "linear":
        return fit_ridge(X, Y)
    if kind not in REGRESSORS:
        raise UsageError(f"unknown regressor '{kind}', expected one of {REGRESSORS}")
    params = ForestParams(**{**asdict(params), "weighted": kind == "krfws"})
    return train_forest(X, Y, params, seed=seed, n_jobs=n_jobs)


def _regressor_to_arrays(reg, prefix):
    if isinstance(reg, KForest):
        meta, arrays = forest_to_arrays(reg, prefix)
        return {"type": "forest", "forest": meta}, arrays
    return {"type": "linear"}, {prefix + "coef": reg.coef, prefix + "intercept": reg.intercept}


def _regressor_from_arrays(meta, arrays, prefix):
    if meta["type"] == "forest":
        return forest_from_arrays(meta["forest"], arrays, prefix)
    return LinearMap(coef=arrays[prefix + "coef"], intercept=arrays[prefix + "intercept"])


@dataclass(frozen=True)
class TrainConfig:

    '''
    :perturbations:
        Initial shapes generated per training image for APR and 3D-APR.
    :scale_range:
        Initial shapes are scaled by a factor drawn from [1 - r, 1 + r].
    :shift_range:
        Translation range per axis as a fraction of the face size.
    :rotation_deg:
        In-plane rotation range in degrees.
    :lbf_inits:
        Initial shapes per training image for LBF, taken from other images.
    :seed:
        Seed of the initial shape generation.
    '''

    perturbations: int = 10
    scale_range: float = 0.1
    shift_range: float = 0.05
    rotation_deg: float = 15.0
    lbf_inits: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.perturbations < 1 or self.lbf_inits < 1:
            raise UsageError("the number of initial shapes per image must be at least 1")


def perturb_shape(S, rng, face_side, config):

    '''
    Random similarity perturbation of a shape about its centroid.
    '''

    c = S.mean(axis=0)
    s = rng.uniform(1 - config.scale_range, 1 + config.scale_range)
    th = np.radians(rng.uniform(-config.rotation_deg, config.rotation_deg))
    t = rng.uniform(-config.shift_range, config.shift_range, 2) * face_side
    R = s * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    return (S - c) @ R.T + c + t


def make_perturbed_inits(faces, unit_mean, config):

    '''
    Initial shapes for APR and 3D-APR training: the mean shape placed in
    the face box of every image, randomly perturbed.

    Returns:
        A list with an array of shape (perturbations, n, 2) per face.
    '''

    rng = np.random.default_rng(_derive_seed(config.seed, 1))
    inits = []
    for f in faces:
        base = place_in_bbox(unit_mean, f.bbox)
        side = np.hypot(f.bbox[2], f.bbox[3]) / np.sqrt(2)
        inits.append(np.stack([perturb_shape(base, rng, side, config) for _ in range(config.perturbations)]))
    return inits


def make_lbf_inits(faces, config):

    '''
    Initial shapes for LBF training: ground truth shapes of other images,
    transferred through face box coordinates.

    Returns:
        A list with an array of shape (lbf_inits, n, 2) per face.
    '''

    rng = np.random.default_rng(_derive_seed(config.seed, 2))
    units = np.stack([unit_shape(f.shape, f.bbox) for f in faces])
    inits = []
    for i, f in enumerate(faces):
        others = np.delete(np.arange(len(faces)), i)
        if len(others) == 0:
            picks = np.zeros(config.lbf_inits, dtype=np.int64)
        else:
            picks = rng.choice(others, size=config.lbf_inits, replace=len(others) < config.lbf_inits)
        inits.append(np.stack([place_in_bbox(units[j], f.bbox) for j in picks]))
    return inits


@dataclass(eq=False)
class _Samples:

    '''
    Training samples in normalized coordinates: one entry of images,
    frames and gt per face, one entry of owner and shapes per initial shape.
    '''

    images: list
    frames: list
    gt: np.ndarray
    owner: np.ndarray
    shapes: np.ndarray


def normalize_face(face, face_size):
    frame = FaceFrame.from_bbox(face.bbox, face_size)
    return frame, frame.normalize(face.load_image())


def _prepare(faces, inits, face_size, n_jobs):
    n = _check_shapes(faces)
    if len(inits) != len(faces):
        raise DataError(f"{len(inits)} sets of initial shapes for {len(faces)} faces")

    normalized = Parallel(n_jobs=worker_count(n_jobs), prefer="threads")(
        delayed(normalize_face)(f, face_size) for f in faces)
    frames = [fr for fr, _ in normalized]
    images = [img for _, img in normalized]
    gt = np.stack([fr.to_frame(f.shape) for fr, f in zip(frames, faces)])

    owner, shapes = [], []
    for i, (fr, init) in enumerate(zip(frames, inits)):
        init = np.asarray(init, dtype=np.float64)
        if init.ndim == 2:
            init = init[None]
        if init.shape[1:] != (n, 2):
            raise DataError(f"{faces[i].name}: initial shapes must have {n} landmarks")
        for S in init:
            owner.append(i)
            shapes.append(fr.to_frame(S))
    return _Samples(images=images, frames=frames, gt=gt, owner=np.array(owner), shapes=np.stack(shapes))


def _features(samples, shapes, features, n_jobs, idx=None):
    idx = np.arange(len(shapes)) if idx is None else idx
    rows = Parallel(n_jobs=worker_count(n_jobs), prefer="threads")(
        delayed(features.extract)(samples.images[samples.owner[i]], shapes[i]) for i in idx)
    return np.vstack(rows)


# ---------------------------------------------------------------- APR

@dataclass(frozen=True)
class AprParams:

    iterations: int = 2
    forest: ForestParams = ForestParams(n_trees=10, max_depth=7)
    features: FeatureConfig = FeatureConfig()
    regressor: str = "krfws"
    face_size: int = 64


@dataclass(frozen=True, eq=False)
class AprModel:

    '''
    :stages:
        One tuple of five regressors per iteration, predicting a, b, c, d
        and (tx, ty) of the affine correction about the shape centroid.
    :features:
        FeatureConfig of the descriptor.
    :regressor:
        'krfws', 'krf' or 'linear'.
    :face_size:
        Face size of the normalized images.
    :unit_mean:
        Mean shape in face box coordinates.
    '''

    stages: tuple
    features: FeatureConfig
    regressor: str
    face_size: int
    unit_mean: np.ndarray
    kind: str = field(default="apr", init=False)

    @property
    def iterations(self):
        return len(self.stages)


def apr_target(S, gt):

    '''
    Affine parameters (a, b, c, d, tx, ty) of the similarity mapping S onto
    gt, expressed about the centroid of S.
    '''

    c = S.mean(axis=0)
    return similarity_align(S - c, gt - c).to_vector()


def _apr_predict(regressors, X):
    out = np.zeros((len(X), 6))
    for reg, cols in zip(regressors, APR_GROUPS):
        out[:, list(cols)] = np.asarray(reg.predict(X)).reshape(len(X), len(cols))
    return out


def _apr_move(shapes, params):
    return np.stack([apply_about_centroid(S, AffineParams.from_vector(p)) for S, p in zip(shapes, params)])


def apr_train(faces, inits, params=None, seed=0, n_jobs=None):

    '''
    Trains Affine Pose Regression.

    :faces:
        AnnotatedFace objects with ground truth shapes.
    :inits:
        One array of initial shapes (n, 2) or (m, n, 2) per face, in image pixels.
    :params:
        AprParams.
    :seed:
        Integer seed of the forests.
    :n_jobs:
        Number of worker threads.

    Returns:
        An AprModel. Each iteration is trained on the shapes corrected by
        the previous iterations.
    '''

    params = params or AprParams()
    samples = _prepare(faces, inits, params.face_size, n_jobs)
    shapes = samples.shapes.copy()
    gt = samples.gt[samples.owner]

    stages = []
    for it in range(params.iterations):
        progress(f"APR iteration {it + 1}/{params.iterations}: extracting features")
        X = _features(samples, shapes, params.features, n_jobs)
        T = np.stack([apr_target(S, G) for S, G in zip(shapes, gt)])
        regs = []
        for g, cols in enumerate(APR_GROUPS):
            progress(f"APR iteration {it + 1}/{params.iterations}: regressor {g + 1}/{len(APR_GROUPS)}")
            regs.append(_fit_regressor(params.regressor, X, T[:, list(cols)], params.forest,
                                       _derive_seed(seed, 10, it, g), n_jobs))
        stages.append(tuple(regs))
        shapes = _apr_move(shapes, _apr_predict(regs, X))
        logger.info("APR iteration %d: mean landmark error %.3f px (normalized)",
                    it + 1, float(np.mean(np.linalg.norm(shapes - gt, axis=2))))

    return AprModel(stages=tuple(stages), features=params.features, regressor=params.regressor,
                    face_size=params.face_size, unit_mean=mean_unit_shape(faces))


def _apr_apply_normalized(img, S, model):
    for regs in model.stages:
        x = model.features.extract(img, S)[None, :]
        S = apply_about_centroid(S, AffineParams.from_vector(_apr_predict(regs, x)[0]))
    return S


def _in_frame(image, S, model, bbox, fn):
    if bbox is None:
        bbox = estimate_bbox(S, model.unit_mean)
    frame = FaceFrame.from_bbox(bbox, model.face_size)
    out = fn(frame.normalize(image), frame.to_frame(S), model)
    return frame.from_frame(out)


def apr_apply(image, S, model, bbox=None):

    '''
    Refines a shape with a trained APR model.

    :image:
        GrayImage.
    :S:
        Current shape (n, 2) in image pixels.
    :model:
        AprModel.
    :bbox:
        Face box defining the normalization; estimated from S if None.

    Returns:
        The shape after all iterations: an affine image of S.
    '''

    return _in_frame(image, S, model, bbox, _apr_apply_normalized)


# ---------------------------------------------------------------- 3D-APR

@dataclass(frozen=True)
class Apr3dParams:

    iterations: int = 1
    forest: ForestParams = ForestParams(n_trees=10, max_depth=7)
    features: FeatureConfig = FeatureConfig()
    regressor: str = "krfws"
    face_size: int = 64


@dataclass(frozen=True, eq=False)
class Apr3dModel:

    '''
    :stages:
        One tuple of three regressors per iteration, predicting the pose
        update of k, of (yaw, pitch, roll) and of (tx, ty).
    :mean3d:
        MeanShape3D projected to form the output shape.
    '''

    stages: tuple
    mean3d: MeanShape3D
    features: FeatureConfig
    regressor: str
    face_size: int
    unit_mean: np.ndarray
    kind: str = field(default="apr3d", init=False)


def _apr3d_predict(regressors, X):
    out = np.zeros((len(X), 6))
    for reg, cols in zip(regressors, APR3D_GROUPS):
        out[:, list(cols)] = np.asarray(reg.predict(X)).reshape(len(X), len(cols))
    return out


def apr3d_train(faces, inits, mean3d, params=None, seed=0, n_jobs=None):

    '''
    Trains 3D Affine Pose Regression.

    For every sample the pose of mean3d is fitted to the initial shape and
    to the ground truth shape; the regressors learn the difference of the
    two poses from the PHOG descriptor. Samples for which either fit is
    degenerate are left out with a warning.

    Returns:
        An Apr3dModel.
    '''

    params = params or Apr3dParams()
    samples = _prepare(faces, inits, params.face_size, n_jobs)
    if mean3d.n != samples.gt.shape[1]:
        raise DataError(f"the mean shape has {mean3d.n} points, the faces {samples.gt.shape[1]}")
    shapes = samples.shapes.copy()

    gt_fits = [fit_pose(mean3d, G) for G in samples.gt]
    stages = []
    for it in range(params.iterations):
        progress(f"3D-APR iteration {it + 1}/{params.iterations}: fitting poses")
        fits = [fit_pose(mean3d, S) for S in shapes]
        valid = np.array([not (f.degenerate or gt_fits[o].degenerate)
                          for f, o in zip(fits, samples.owner)])
        if not valid.any():
            raise DataError("pose fitting failed on every training sample")
        if not valid.all():
            logger.warning("3D-APR: %d of %d samples excluded, degenerate pose fit",
                           int((~valid).sum()), len(valid))
        idx = np.flatnonzero(valid)

        progress(f"3D-APR iteration {it + 1}/{params.iterations}: extracting features")
        X = _features(samples, shapes, params.features, n_jobs, idx)
        T = np.stack([fits[i].pose.difference(gt_fits[samples.owner[i]].pose) for i in idx])
        regs = []
        for g, cols in enumerate(APR3D_GROUPS):
            progress(f"3D-APR iteration {it + 1}/{params.iterations}: regressor {g + 1}/{len(APR3D_GROUPS)}")
            regs.append(_fit_regressor(params.regressor, X, T[:, list(cols)], params.forest,
                                       _derive_seed(seed, 20, it, g), n_jobs))
        stages.append(tuple(regs))

        delta = _apr3d_predict(regs, X)
        for i, d in zip(idx, delta):
            shapes[i] = project(mean3d, fits[i].pose.moved(d))

    return Apr3dModel(stages=tuple(stages), mean3d=mean3d, features=params.features,
                      regressor=params.regressor, face_size=params.face_size,
                      unit_mean=mean_unit_shape(faces))


def _apr3d_apply_normalized(img, S, model):
    for regs in model.stages:
        fit = fit_pose(model.mean3d, S)
        if fit.degenerate:
            logger.warning("3D-APR: degenerate pose fit, shape left unchanged")
            return S
        x = model.features.extract(img, S)[None, :]
        S = project(model.mean3d, fit.pose.moved(_apr3d_predict(regs, x)[0]))
    return S


def apr3d_apply(image, S, model, bbox=None):

    '''
    Replaces a shape by the projection of the mean 3D shape at the pose
    fitted to it, corrected by the regressed pose update.
    '''

    return _in_frame(image, S, model, bbox, _apr3d_apply_normalized)


# ---------------------------------------------------------------- LBF

@dataclass(frozen=True)
class LbfParams:

    iterations: int = 5
    forest: ForestParams = ForestParams(n_trees=5, max_depth=7)
    features: FeatureConfig = FeatureConfig(patch=32, levels=(32, 16, 8), hog="basic", placement="landmarks")
    regressor: str = "krfws"
    lambdas: tuple = (0.1, 1.0, 10.0)
    face_size: int = 64


@dataclass(frozen=True, eq=False)
class LbfModel:

    '''
    :stages:
        One (forests, regression) pair per iteration: a KForest per
        landmark and the LinearMap from concatenated leaf codes to the
        flattened shape update in the mean shape frame.
    :reference:
        Mean shape in normalized coordinates; residuals are expressed in
        the similarity frame of this shape.
    '''

    stages: tuple
    reference: np.ndarray
    features: FeatureConfig
    regressor: str
    face_size: int
    unit_mean: np.ndarray
    kind: str = field(default="lbf", init=False)

    @property
    def iterations(self):
        return len(self.stages)

    def code_length(self, it):
        return sum(f.code_length for f in self.stages[it][0])


def _to_reference(shapes, reference):
    # linear parts of the similarities taking each shape onto the reference
    return np.stack([similarity_align(S, reference).matrix for S in shapes])


def _lbf_codes(forests, D):
    return sp.hstack([leaf_codes(f, D[:, j]) for j, f in enumerate(forests)], format="csr")


def _select_ridge(codes, Y, lambdas, seed):

    '''
    Ridge regression with the penalty picked on a held-out fifth of the data.
    '''

    lambdas = sorted(float(v) for v in lambdas)
    m = codes.shape[0]
    if len(lambdas) == 1 or m < 5:
        best = lambdas[len(lambdas) // 2]
    else:
        perm = np.random.default_rng(seed).permutation(m)
        n_val = max(1, m // 5)
        val, fit = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        errors = []
        for lam in lambdas:
            pred = fit_ridge(codes[fit], Y[fit], lam).predict(codes[val])
            errors.append(float(np.mean((pred - Y[val])**2)))
        best = lambdas[int(np.argmin(errors))]
        logger.debug("LBF ridge penalties %s, held-out errors %s", lambdas, errors)
    return fit_ridge(codes, Y, best), best


def _train_landmark_forest(D, R, params, seed, weighted):
    fparams = ForestParams(**{**asdict(params), "weighted": weighted})
    return train_forest(D, R, fparams, seed=seed, n_jobs=1)


def lbf_train(faces, inits, params=None, seed=0, n_jobs=None):

    '''
    Trains the cascaded LBF shape regressor.

    :faces:
        AnnotatedFace objects with ground truth shapes.
    :inits:
        One array of initial shapes (n, 2) or (m, n, 2) per face, in image pixels.
    :params:
        LbfParams.

    Returns:
        An LbfModel. Per-landmark forests of an iteration are trained
        concurrently; iterations are sequential.
    '''

    params = params or LbfParams()
    if params.regressor == "linear":
        raise UsageError("LBF needs forest regressors")
    weighted = params.regressor == "krfws"
    samples = _prepare(faces, inits, params.face_size, n_jobs)
    unit_mean = mean_unit_shape(faces)
    reference = _reference_shape(unit_mean, params.face_size)
    shapes = samples.shapes.copy()
    gt = samples.gt[samples.owner]
    m, n = shapes.shape[:2]
    jobs = worker_count(n_jobs)

    stages = []
    for it in range(params.iterations):
        progress(f"LBF iteration {it + 1}/{params.iterations}: extracting features")
        D = np.stack(Parallel(n_jobs=jobs, prefer="threads")(
            delayed(params.features.extract_per_landmark)(samples.images[samples.owner[i]], shapes[i])
            for i in range(m)))
        M = _to_reference(shapes, reference)
        R = np.einsum("iab,inb->ina", M, gt - shapes)

        progress(f"LBF iteration {it + 1}/{params.iterations}: training {n} landmark forests")
        forests = tuple(Parallel(n_jobs=jobs, prefer="threads")(
            delayed(_train_landmark_forest)(D[:, j], R[:, j], params.forest,
                                            _derive_seed(seed, 30, it, j), weighted)
            for j in range(n)))

        progress(f"LBF iteration {it + 1}/{params.iterations}: global regression")
        codes = _lbf_codes(forests, D)
        regression, lam = _select_ridge(codes, R.reshape(m, 2*n), params.lambdas, _derive_seed(seed, 40, it))
        stages.append((forests, regression))

        update = regression.predict(codes).reshape(m, n, 2)
        shapes = shapes + np.einsum("iab,inb->ina", np.linalg.inv(M), update)
        logger.info("LBF iteration %d: lambda %g, mean landmark error %.3f px (normalized)",
                    it + 1, lam, float(np.mean(np.linalg.norm(shapes - gt, axis=2))))

    return LbfModel(stages=tuple(stages), reference=reference, features=params.features,
                    regressor=params.regressor, face_size=params.face_size, unit_mean=unit_mean)


def _lbf_step(img, S, stage, model):
    forests, regression = stage
    D = model.features.extract_per_landmark(img, S)[None]
    Minv = np.linalg.inv(similarity_align(S, model.reference).matrix)
    update = regression.predict(_lbf_codes(forests, D)).reshape(len(S), 2)
    return S + update @ Minv.T


def _lbf_apply_normalized(img, S, model, n_iter=None):
    for stage in model.stages[:n_iter]:
        S = _lbf_step(img, S, stage, model)
    return S


def lbf_apply(image, S, model, bbox=None, n_iter=None):

    '''
    Refines a shape with a trained LBF model.

    :n_iter:
        Number of cascade iterations to run; all of them if None.
    '''

    return _in_frame(image, S, model, bbox, lambda img, s, mod: _lbf_apply_normalized(img, s, mod, n_iter))


# ---------------------------------------------------------------- pipeline

@dataclass(frozen=True, eq=False)
class PipelineBundle:

    '''
    Trained stage models sharing a landmark scheme.

    :scheme:
        Landmark scheme name.
    :unit_mean:
        Mean shape in face box coordinates used as the starting shape.
    :face_size:
        Face size of the normalized images.
    :apr:
    :apr3d:
    :lbf:
        Stage models, None for stages that were not trained.
    '''

    scheme: str
    unit_mean: np.ndarray
    face_size: int = 64
    apr: AprModel = None
    apr3d: Apr3dModel = None
    lbf: LbfModel = None

    def available(self):
        return tuple(s for s in STAGES if getattr(self, s) is not None)


def full_pipeline(image, bbox, bundle, stages=STAGES, trace=None):

    '''
    Aligns a face.

    :image:
        GrayImage.
    :bbox:
        Face box (x, y, w, h).
    :bundle:
        PipelineBundle.
    :stages:
        Enabled stages, run in the order apr, apr3d, lbf.
    :trace:
        Optional list; the shape after every stage (and after every LBF
        iteration) is appended as a (label, shape) pair, starting with
        ('init', ...).

    Returns:
        The final shape (n, 2) in image pixels.
    '''

    for s in stages:
        if s not in STAGES:
            raise UsageError(f"unknown stage '{s}', expected a subset of {STAGES}")
        if getattr(bundle, s) is None:
            raise UsageError(f"stage '{s}' is enabled but the bundle has no {s} model")

    frame = FaceFrame.from_bbox(bbox, bundle.face_size)
    img = frame.normalize(image)
    S = frame.to_frame(place_in_bbox(bundle.unit_mean, bbox))

    def record(label):
        if trace is not None:
            trace.append((label, frame.from_frame(S)))

    record("init")
    if "apr" in stages:
        S = _apr_apply_normalized(img, S, bundle.apr)
        record("apr")
    if "apr3d" in stages:
        S = _apr3d_apply_normalized(img, S, bundle.apr3d)
        record("apr3d")
    if "lbf" in stages:
        for it, stage in enumerate(bundle.lbf.stages):
            S = _lbf_step(img, S, stage, bundle.lbf)
            record(f"lbf{it + 1}")
    return frame.from_frame(S)


def initialize_shape(image, S, bundle, bbox, stages=INIT_STAGES):

    '''
    Runs the initialization stages of a bundle on a shape, the way
    full_pipeline runs them before LBF.

    :S:
        Starting shape (n, 2) in image pixels.
    :stages:
        Initialization stages to run; those without a model in the
        bundle are skipped.

    Returns:
        The shape handed over to the next stage, in image pixels.
    '''

    frame = FaceFrame.from_bbox(bbox, bundle.face_size)
    img = frame.normalize(image)
    S = frame.to_frame(S)
    if "apr" in stages and bundle.apr is not None:
        S = _apr_apply_normalized(img, S, bundle.apr)
    if "apr3d" in stages and bundle.apr3d is not None:
        S = _apr3d_apply_normalized(img, S, bundle.apr3d)
    return frame.from_frame(S)


# ---------------------------------------------------------------- storage

def _model_to_container(model):
    meta = {"kind": model.kind, "format": MODEL_FORMAT, "regressor": model.regressor,
            "face_size": int(model.face_size), "features": asdict(model.features), "stages": []}
    arrays = {"unit_mean": model.unit_mean}
    if model.kind == "apr3d":
        arrays["mean3d"] = np.asarray(model.mean3d.points)
    if model.kind == "lbf":
        arrays["reference"] = model.reference

    for it, stage in enumerate(model.stages):
        if model.kind == "lbf":
            forests, regression = stage
            regs = list(forests) + [regression]
        else:
            regs = list(stage)
        metas = []
        for g, reg in enumerate(regs):
            rmeta, rarrays = _regressor_to_arrays(reg, f"it{it}.r{g:03d}.")
            metas.append(rmeta)
            arrays.update(rarrays)
        meta["stages"].append(metas)
    return meta, arrays


def _model_from_container(meta, arrays, source):
    kind = meta.get("kind")
    if kind not in STAGES or meta.get("format") != MODEL_FORMAT:
        raise DataError(f"{source}: not a supported stage model")
    features = FeatureConfig(**meta["features"])
    stages = []
    for it, metas in enumerate(meta["stages"]):
        regs = [_regressor_from_arrays(m, arrays, f"it{it}.r{g:03d}.") for g, m in enumerate(metas)]
        stages.append((tuple(regs[:-1]), regs[-1]) if kind == "lbf" else tuple(regs))
    common = dict(stages=tuple(stages), features=features, regressor=meta["regressor"],
                  face_size=meta["face_size"], unit_mean=arrays["unit_mean"])
    if kind == "apr":
        return AprModel(**common)
    if kind == "apr3d":
        return Apr3dModel(mean3d=MeanShape3D(arrays["mean3d"]), **common)
    return LbfModel(reference=arrays["reference"], **common)


def save_model(model, fname):

    '''
    Saves an AprModel, Apr3dModel or LbfModel to a container file.
    '''

    meta, arrays = _model_to_container(model)
    write_container(fname, meta, arrays)


def load_model(fname):
    meta, arrays = read_container(fname)
    return _model_from_container(meta, arrays, fname)


def save_bundle(bundle, directory, extra=None):

    '''
    Saves a PipelineBundle: one container file per stage and manifest.json
    listing the stage order, landmark scheme, feature configurations and
    format version.

    :extra:
        Optional JSON-serializable dictionary stored in the manifest.
    '''

    if not os.path.isdir(directory):
        os.makedirs(directory)
    manifest = {"format": BUNDLE_FORMAT, "scheme": bundle.scheme, "face_size": int(bundle.face_size),
                "stage_order": list(STAGES), "stages": {}}
    write_container(os.path.join(directory, "init.krfws"), {"kind": "init"}, {"unit_mean": bundle.unit_mean})
    for s in bundle.available():
        model = getattr(bundle, s)
        fname = f"{s}.krfws"
        save_model(model, os.path.join(directory, fname))
        manifest["stages"][s] = {"file": fname, "features": asdict(model.features),
                                 "regressor": model.regressor, "iterations": len(model.stages)}
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(directory, "manifest.json"), "w") as foo:
        json.dump(manifest, foo, sort_keys=True, indent=2)


def load_bundle(directory):

    '''
    Loads a PipelineBundle saved with save_bundle.
    '''

    mfile = os.path.join(directory, "manifest.json")
    if not os.path.isfile(mfile):
        raise DataError(f"{directory}: model bundle manifest not found")
    with open(mfile) as foo:
        try:
            manifest = json.load(foo)
        except json.JSONDecodeError as ex:
            raise DataError(f"{mfile}: corrupted manifest ({ex})")
    if manifest.get("format") != BUNDLE_FORMAT:
        raise DataError(f"{mfile}: unsupported bundle format {manifest.get('format')}")

    _, arrays = read_container(os.path.join(directory, "init.krfws"))
    models = {s: load_model(os.path.join(directory, d["file"])) for s, d in manifest["stages"].items()}
    return PipelineBundle(scheme=manifest["scheme"], unit_mean=arrays["unit_mean"],
                          face_size=manifest["face_size"], **models)


def merge_bundles(*bundles):

    '''
    Combines stage models of several bundles; later bundles win.
    '''

    out = bundles[0]
    for b in bundles[1:]:
        if b.scheme != out.scheme:
            raise UsageError(f"cannot combine models of schemes {out.scheme} and {b.scheme}")
        out = PipelineBundle(scheme=out.scheme, unit_mean=b.unit_mean, face_size=b.face_size,
                             apr=b.apr or out.apr, apr3d=b.apr3d or out.apr3d, lbf=b.lbf or out.lbf)
    return out
