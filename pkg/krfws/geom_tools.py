'''
Landmark shapes, affine shape transforms, scaled orthographic projection
of a 3D mean shape and Gauss-Newton fitting of its pose.

A 2D shape is a numpy array of shape (n, 2), one (x, y) row per landmark,
in pixels. A 3D shape is an array of shape (n, 3).

Rotations are parametrized by Euler angles composed as

    R = Rz(roll) @ Ry(yaw) @ Rx(pitch)

with

    Rx(p) = [[1, 0, 0], [0, cos p, -sin p], [0, sin p, cos p]]
    Ry(y) = [[cos y, 0, sin y], [0, 1, 0], [-sin y, 0, cos y]]
    Rz(r) = [[cos r, -sin r, 0], [sin r, cos r, 0], [0, 0, 1]]

so that a positive yaw moves the x axis toward the viewer (+z).
'''

import os
from dataclasses import dataclass

import numpy as np

from krfws.exceptions import DataError, NumericError


# mean shape shipped with the package
MEAN_SHAPE_FILE = os.path.join(os.path.dirname(__file__), "data", "mean_shape_68.txt")

_POSE_FIELDS = ("k", "yaw", "pitch", "roll", "tx", "ty")


def as_shape(points, min_points=1):

    '''
    Validates a 2D shape.

    :points:
        Array-like of shape (n, 2).
    :min_points:
        Minimal number of landmarks.

    Returns:
        A float64 array of shape (n, 2).
    '''

    S = np.asarray(points, dtype=np.float64)
    if S.ndim != 2 or S.shape[1] != 2:
        raise ValueError(f"a 2D shape must have shape (n, 2), got {S.shape}")
    if len(S) < min_points:
        raise ValueError(f"at least {min_points} landmarks are needed, got {len(S)}")
    if not np.all(np.isfinite(S)):
        raise ValueError("shape coordinates must be finite")
    return S


def rms_extent(S):

    '''
    Root mean square distance of the points of a shape from their centroid.
    '''

    S = np.asarray(S, dtype=np.float64)
    return float(np.sqrt(np.mean(np.sum((S - S.mean(axis=0))**2, axis=1))))


def wrap_angle(angle):

    '''
    Maps an angle (radians, scalar or array) into (-pi, pi].
    '''

    angle = np.asarray(angle, dtype=np.float64)
    out = angle - 2*np.pi*np.ceil((angle - np.pi) / (2*np.pi))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class AffineParams:

    '''
    Parameters of the transform

        S' = [[a, b], [c, d]] S + [tx, ty]

    applied to every landmark (x, y) of a shape.
    '''

    a: float = 1.0
    b: float = 0.0
    c: float = 0.0
    d: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("affine parameters must be finite")

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, M, t=(0.0, 0.0)):
        M = np.asarray(M, dtype=np.float64)
        return cls(a=float(M[0, 0]), b=float(M[0, 1]), c=float(M[1, 0]), d=float(M[1, 1]),
                   tx=float(t[0]), ty=float(t[1]))

    @classmethod
    def from_vector(cls, v):
        return cls(*(float(x) for x in v))

    @property
    def matrix(self):
        return np.array([[self.a, self.b], [self.c, self.d]])

    @property
    def translation(self):
        return np.array([self.tx, self.ty])

    @property
    def det(self):
        return self.a*self.d - self.b*self.c

    def to_vector(self):
        return np.array([self.a, self.b, self.c, self.d, self.tx, self.ty], dtype=np.float64)

    def then(self, other):

        '''
        The transform equal to applying self first and other second.
        '''

        M = other.matrix @ self.matrix
        t = other.matrix @ self.translation + other.translation
        return AffineParams.from_matrix(M, t)

    def inverse(self):
        if abs(self.det) <= 1e-8:
            raise NumericError(f"affine transform is not invertible (det = {self.det:g})")
        Minv = np.linalg.inv(self.matrix)
        return AffineParams.from_matrix(Minv, -Minv @ self.translation)


def apply_affine(S, p):

    '''
    Transforms every landmark of a shape.

    :S:
        Array of shape (n, 2).
    :p:
        AffineParams.

    Returns:
        A new array of shape (n, 2).
    '''

    S = as_shape(S)
    return S @ p.matrix.T + p.translation


def apply_about_centroid(S, p):

    '''
    Applies p to a shape in coordinates centered at the shape centroid:
    S' = A (S - c) + c + t.
    '''

    S = as_shape(S)
    c = S.mean(axis=0)
    return (S - c) @ p.matrix.T + c + p.translation


def similarity_align(src, dst):

    '''
    Least squares similarity transform (scale, rotation, translation,
    no reflection) mapping src onto dst.

    :src:
    :dst:
        Arrays of shape (n, 2) with n >= 2.

    Returns:
        AffineParams with a = d and b = -c.
    '''

    src = as_shape(src, min_points=2)
    dst = as_shape(dst, min_points=2)
    if src.shape != dst.shape:
        raise ValueError(f"shapes differ: {src.shape} and {dst.shape}")

    ms, md = src.mean(axis=0), dst.mean(axis=0)
    s, t = src - ms, dst - md
    norm = np.sum(s**2)
    if norm <= 1e-12 * max(1.0, np.sum(src**2)):
        raise NumericError("cannot align a shape whose points all coincide")

    ca = np.sum(s[:, 0]*t[:, 0] + s[:, 1]*t[:, 1]) / norm
    cb = np.sum(s[:, 0]*t[:, 1] - s[:, 1]*t[:, 0]) / norm
    M = np.array([[ca, -cb], [cb, ca]])
    return AffineParams.from_matrix(M, md - M @ ms)


@dataclass(frozen=True, eq=False)
class MeanShape3D:

    '''
    Canonical 3D face shape.

    :points:
        Array of shape (n, 3). It is translated so that its centroid is
        at the origin.
    '''

    points: np.ndarray

    def __post_init__(self):
        P = np.array(self.points, dtype=np.float64)
        if P.ndim != 2 or P.shape[1] != 3:
            raise ValueError(f"a 3D shape must have shape (n, 3), got {P.shape}")
        if len(P) < 3:
            raise ValueError("a 3D shape needs at least 3 points")
        if not np.all(np.isfinite(P)):
            raise ValueError("3D shape coordinates must be finite")
        P = P - P.mean(axis=0)
        P.setflags(write=False)
        object.__setattr__(self, "points", P)

    def __len__(self):
        return len(self.points)

    @property
    def n(self):
        return len(self.points)

    def subset(self, indices):

        '''
        Mean shape restricted to the given landmarks (re-centered).
        '''

        return MeanShape3D(self.points[list(indices)])


def load_mean_shape(fname=None):

    '''
    Reads a 3D mean shape.

    :fname:
        Plain text file: the first line holds the number of points n,
        followed by n lines of "x y z"; lines starting with # are
        skipped. If None, the 68-point shape
        shipped with the package is used.

    Returns:
        A MeanShape3D.
    '''

    if fname is None:
        fname = MEAN_SHAPE_FILE
    if not os.path.isfile(fname):
        raise DataError(f"{fname}: mean shape file not found")

    with open(fname) as foo:
        lines = [(i + 1, line.strip()) for i, line in enumerate(foo)]
    lines = [(i, line) for i, line in lines if line and not line.startswith("#")]
    if not lines:
        raise DataError(f"{fname}: empty mean shape file")

    try:
        n = int(lines[0][1])
    except ValueError:
        raise DataError(f"{fname}:{lines[0][0]}: expected the number of points")
    if len(lines) - 1 != n:
        raise DataError(f"{fname}: header announces {n} points, found {len(lines) - 1}")

    points = []
    for lineno, line in lines[1:]:
        parts = line.split()
        try:
            if len(parts) != 3:
                raise ValueError
            points.append([float(v) for v in parts])
        except ValueError:
            raise DataError(f"{fname}:{lineno}: expected three coordinates, got '{line}'")
    try:
        return MeanShape3D(np.array(points))
    except ValueError as ex:
        raise DataError(f"{fname}: {ex}")


@dataclass(frozen=True)
class OrthoPose:

    '''
    Scaled orthographic pose.

    :k:
        Scale, positive.
    :yaw:
    :pitch:
    :roll:
        Euler angles in radians, wrapped into (-pi, pi].
    :tx:
    :ty:
        Translation in pixels.
    '''

    k: float = 1.0
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        values = [getattr(self, f) for f in _POSE_FIELDS]
        if not np.all(np.isfinite(values)):
            raise ValueError("pose parameters must be finite")
        if self.k <= 0:
            raise ValueError(f"pose scale must be positive, got {self.k}")
        for f in _POSE_FIELDS:
            object.__setattr__(self, f, float(getattr(self, f)))
        for f in ("yaw", "pitch", "roll"):
            object.__setattr__(self, f, wrap_angle(getattr(self, f)))

    @classmethod
    def from_vector(cls, v):
        return cls(*(float(x) for x in v))

    def to_vector(self):
        return np.array([getattr(self, f) for f in _POSE_FIELDS])

    def moved(self, delta):

        '''
        Pose with an update added to its parameters.

        :delta:
            Vector (dk, dyaw, dpitch, droll, dtx, dty). Angles are wrapped;
            a scale update that would make k non-positive is limited to
            shrinking k by a factor of 10.
        '''

        v = self.to_vector() + np.asarray(delta, dtype=np.float64)
        v[0] = max(v[0], 0.1*self.k)
        return OrthoPose.from_vector(v)

    def difference(self, other):

        '''
        Update vector taking self to other, with wrapped angle differences.
        '''

        d = other.to_vector() - self.to_vector()
        d[1:4] = wrap_angle(d[1:4])
        return d


def _rotations(yaw, pitch, roll):

    '''
    The three elementary rotations and their derivatives.
    '''

    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    dRx = np.array([[0, 0, 0], [0, -sp, -cp], [0, cp, -sp]])
    dRy = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    dRz = np.array([[-sr, -cr, 0], [cr, -sr, 0], [0, 0, 0]])
    return (Rx, Ry, Rz), (dRx, dRy, dRz)


def rotation_matrix(yaw, pitch, roll):
    (Rx, Ry, Rz), _ = _rotations(yaw, pitch, roll)
    return Rz @ Ry @ Rx


def euler_to_projection(pose):

    '''
    The 2x3 matrix k*P, P being the first two rows of the rotation matrix.
    '''

    return pose.k * rotation_matrix(pose.yaw, pose.pitch, pose.roll)[:2]


def project(mean3d, pose):

    '''
    Scaled orthographic projection k*P*S3 + t of a 3D shape.

    Returns:
        Array of shape (n, 2).
    '''

    return mean3d.points @ euler_to_projection(pose).T + np.array([pose.tx, pose.ty])


def projection_jacobian(mean3d, pose):

    '''
    Jacobian of the flattened projection (x0, y0, x1, y1, ...) with respect
    to (k, yaw, pitch, roll, tx, ty).

    Returns:
        Array of shape (2n, 6).
    '''

    X = mean3d.points
    n = len(X)
    (Rx, Ry, Rz), (dRx, dRy, dRz) = _rotations(pose.yaw, pose.pitch, pose.roll)
    R = Rz @ Ry @ Rx
    k = pose.k

    J = np.zeros((n, 2, 6))
    J[:, :, 0] = X @ R[:2].T
    J[:, :, 1] = k * X @ (Rz @ dRy @ Rx)[:2].T
    J[:, :, 2] = k * X @ (Rz @ Ry @ dRx)[:2].T
    J[:, :, 3] = k * X @ (dRz @ Ry @ Rx)[:2].T
    J[:, 0, 4] = 1.0
    J[:, 1, 5] = 1.0
    return J.reshape(2*n, 6)


@dataclass(frozen=True)
class PoseFit:

    '''
    Result of fit_pose.

    :pose:
        Best pose found.
    :residual:
        Euclidean norm of the residual vector at that pose.
    :n_iter:
        Number of Gauss-Newton iterations performed.
    :degenerate:
        True if the normal equations became singular; pose is then the
        best pose found before that happened.
    '''

    pose: OrthoPose
    residual: float
    n_iter: int
    degenerate: bool = False


def initial_pose(mean3d, S):

    '''
    Starting point of pose fitting: zero angles, translation at the centroid
    of S, scale equal to the ratio of the RMS extent of S to that of the
    frontal projection of the mean shape.
    '''

    S = as_shape(S)
    extent_3d = rms_extent(mean3d.points[:, :2])
    extent_2d = rms_extent(S)
    if extent_3d == 0 or extent_2d == 0:
        raise NumericError("cannot estimate the scale of a shape with zero extent")
    c = S.mean(axis=0)
    return OrthoPose(k=extent_2d / extent_3d, tx=c[0], ty=c[1])


def _pose_residual(mean3d, S, pose):
    return (project(mean3d, pose) - S).ravel()


def fit_pose(mean3d, S, init=None, max_iter=50, tol=1e-10):

    '''
    Fits the pose minimizing |project(mean3d, pose) - S|^2 with a damped
    Gauss-Newton method.

    :mean3d:
        MeanShape3D with the same number of points as S.
    :S:
        Target 2D shape of shape (n, 2), n >= 3.
    :init:
        Starting OrthoPose; initial_pose(mean3d, S) if None.
    :max_iter:
        Maximal number of iterations.
    :tol:
        Iterations stop when the norm of the Gauss-Newton step drops
        below tol.

    Returns:
        A PoseFit. Every iteration halves the Gauss-Newton step (at most 10
        times) until it decreases the residual and keeps k positive; if no
        such step exists the current pose is returned.
    '''

    S = as_shape(S, min_points=3)
    if len(S) != mean3d.n:
        raise ValueError(f"shape has {len(S)} points, the mean shape {mean3d.n}")

    if init is None:
        try:
            init = initial_pose(mean3d, S)
        except NumericError:
            c = S.mean(axis=0)
            pose = OrthoPose(tx=c[0], ty=c[1])
            return PoseFit(pose=pose, residual=float(np.linalg.norm(_pose_residual(mean3d, S, pose))),
                           n_iter=0, degenerate=True)

    pose = init
    r = _pose_residual(mean3d, S, pose)
    cost = float(r @ r)
    degenerate = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        J = projection_jacobian(mean3d, pose)
        JtJ = J.T @ J
        if not np.isfinite(JtJ).all() or np.linalg.cond(JtJ) > 1e14:
            degenerate = True
            break
        step = -np.linalg.solve(JtJ, J.T @ r)
        if np.linalg.norm(step) < tol:
            break

        accepted = False
        base = pose.to_vector()
        for _ in range(11):
            cand = base + step
            if cand[0] > 0:
                cand_pose = OrthoPose.from_vector(cand)
                cand_r = _pose_residual(mean3d, S, cand_pose)
                cand_cost = float(cand_r @ cand_r)
                if cand_cost < cost:
                    accepted = True
                    break
            step = step / 2
        if not accepted:
            break
        pose, r, cost = cand_pose, cand_r, cand_cost
        if np.linalg.norm(step) < tol:
            break

    return PoseFit(pose=pose, residual=float(np.sqrt(cost)), n_iter=n_iter, degenerate=degenerate)


def pose_from_degrees(yaw=0.0, pitch=0.0, roll=0.0, **kwargs):
    return OrthoPose(yaw=np.radians(yaw), pitch=np.radians(pitch), roll=np.radians(roll), **kwargs)
