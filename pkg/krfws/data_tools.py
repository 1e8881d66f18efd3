'''
Datasets: 300-W style landmark annotations, detector bounding boxes,
Pointing'04 head pose images and procedurally rendered synthetic faces.
'''

import os
import re
import glob
from dataclasses import dataclass, field
from logging import getLogger, NullHandler

import numpy as np
import cv2

from krfws.exceptions import DataError, UsageError
from krfws.helpers import IMAGE_EXTENSIONS, read_gray_image
from krfws.imgproc_tools import GrayImage
from krfws.geom_tools import (OrthoPose, as_shape, load_mean_shape, project, rms_extent)

logger = getLogger(__name__)
logger.addHandler(NullHandler())


# subdirectories of a 300-W root and the split they belong to
SPLIT_LAYOUT_300W = {"training": ("afw", "helen/trainset", "lfpw/trainset"),
                     "common": ("helen/testset", "lfpw/testset"),
                     "challenging": ("ibug",)}

# split sizes of the complete 300-W release
SPLIT_SIZES_300W = {"training": 3148, "common": 554, "challenging": 135}

_POINTING04_NAME = re.compile(r"^personne(\d{2})(\d)(\d{1,2})([+-]\d+)([+-]\d+)\.(jpg|jpeg|png)$",
                              re.IGNORECASE)


@dataclass(frozen=True)
class LandmarkScheme:

    '''
    :name:
        Name of the scheme.
    :n_points:
        Number of landmarks.
    :left_eye:
    :right_eye:
        Indices of the landmarks around each eye; the pupil is taken to be
        their centroid.
    :outer_corners:
        Indices of the two outer eye corners.
    :from_68:
        Indices of the scheme's landmarks in the 68-point iBUG scheme.
    '''

    name: str
    n_points: int
    left_eye: tuple
    right_eye: tuple
    outer_corners: tuple
    from_68: tuple

    def select(self, shape68):

        '''
        Restricts a 68-point shape (or a 68-point 3D mean shape) to this scheme.
        '''

        if len(shape68) == self.n_points:
            return shape68
        if len(shape68) != 68:
            raise DataError(f"cannot convert a {len(shape68)}-point shape to the {self.name} scheme")
        if hasattr(shape68, "subset"):
            return shape68.subset(self.from_68)
        return np.asarray(shape68)[list(self.from_68)]


SCHEMES = {
    "ibug68": LandmarkScheme(name="ibug68", n_points=68,
                             left_eye=tuple(range(36, 42)), right_eye=tuple(range(42, 48)),
                             outer_corners=(36, 45), from_68=tuple(range(68))),
    # outer eye corners, nose tip, mouth corners
    "face5": LandmarkScheme(name="face5", n_points=5,
                            left_eye=(0,), right_eye=(1,), outer_corners=(0, 1),
                            from_68=(36, 45, 30, 48, 54)),
}


def get_scheme(scheme):
    if isinstance(scheme, LandmarkScheme):
        return scheme
    try:
        return SCHEMES[scheme]
    except KeyError:
        raise UsageError(f"unknown landmark scheme '{scheme}', expected one of {sorted(SCHEMES)}")


@dataclass(frozen=True, eq=False)
class AnnotatedFace:

    '''
    A face image with its annotations.

    :name:
        Identifier of the face, unique within a dataset.
    :image_path:
        Image file, or None if the image is held in memory.
    :shape:
        Ground truth landmarks, array of shape (n, 2), or None for
        pose-only datasets.
    :bbox:
        Face detector box (x, y, w, h) in pixels.
    :pose:
        Optional (yaw, pitch) label in degrees.
    :image:
        Optional in-memory GrayImage.
    :session:
        Recording session, used to form cross-validation folds.
    :true_pose:
        OrthoPose that generated a synthetic face.
    '''

    name: str
    image_path: str = None
    shape: np.ndarray = None
    bbox: tuple = (0.0, 0.0, 1.0, 1.0)
    pose: tuple = None
    image: GrayImage = field(default=None, repr=False)
    session: int = None
    true_pose: OrthoPose = None

    def __post_init__(self):
        x, y, w, h = (float(v) for v in self.bbox)
        if not (w > 0 and h > 0):
            raise DataError(f"{self.name}: bounding box must have positive area, got {self.bbox}")
        object.__setattr__(self, "bbox", (x, y, w, h))
        if self.shape is not None:
            object.__setattr__(self, "shape", as_shape(self.shape))
        if self.image is not None and self.shape is not None:
            tol = 0.25 * max(self.image.width, self.image.height)
            lo, hi = self.shape.min(axis=0), self.shape.max(axis=0)
            if lo.min() < -tol or hi[0] > self.image.width + tol or hi[1] > self.image.height + tol:
                raise DataError(f"{self.name}: landmarks lie far outside the image")

    def load_image(self):

        '''
        The face image as a GrayImage.
        '''

        if self.image is not None:
            return self.image
        if self.image_path is None:
            raise DataError(f"{self.name}: no image")
        return GrayImage(read_gray_image(self.image_path))


@dataclass(frozen=True)
class DatasetSplit:

    '''
    :name:
        One of training, common, challenging, full, custom.
    :members:
        Tuple of AnnotatedFace objects.
    '''

    name: str
    members: tuple = ()

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


def load_pts(path):

    '''
    Reads landmarks from a .pts file:

        version: 1
        n_points: 68
        {
        x y
        ...
        }

    Coordinates in the file are 1-based and are shifted to 0-based pixel
    coordinates.

    Returns:
        Array of shape (n_points, 2).
    '''

    if not os.path.isfile(path):
        raise DataError(f"{path}: file not found")
    with open(path) as foo:
        lines = [line.strip() for line in foo]

    def header_value(lineno, key):
        if lineno > len(lines):
            raise DataError(f"{path}:{lineno}: missing '{key}' header")
        parts = lines[lineno - 1].split(":")
        if len(parts) != 2 or parts[0].strip() != key:
            raise DataError(f"{path}:{lineno}: expected '{key}: <value>', got '{lines[lineno - 1]}'")
        try:
            return int(float(parts[1]))
        except ValueError:
            raise DataError(f"{path}:{lineno}: invalid value for '{key}'")

    header_value(1, "version")
    n_points = header_value(2, "n_points")
    if len(lines) < 3 or lines[2] != "{":
        raise DataError(f"{path}:3: expected '{{'")

    points = []
    lineno = 3
    for line in lines[3:]:
        lineno += 1
        if line == "}":
            break
        parts = line.split()
        try:
            if len(parts) != 2:
                raise ValueError
            points.append((float(parts[0]) - 1.0, float(parts[1]) - 1.0))
        except ValueError:
            raise DataError(f"{path}:{lineno}: expected 'x y', got '{line}'")
    else:
        raise DataError(f"{path}:{lineno}: missing closing '}}'")

    if len(points) != n_points:
        raise DataError(f"{path}:{lineno}: header announces {n_points} points, found {len(points)}")
    return np.array(points, dtype=np.float64).reshape(n_points, 2)


def save_pts(path, shape):

    '''
    Writes landmarks (0-based pixel coordinates) to a .pts file.
    '''

    shape = as_shape(shape)
    head = os.path.dirname(path)
    if head and not os.path.isdir(head):
        os.makedirs(head)
    lines = ["version: 1", f"n_points:  {len(shape)}", "{"]
    lines += ["%f %f" % (x + 1.0, y + 1.0) for x, y in shape]
    lines.append("}")
    with open(path, "w") as foo:
        foo.write("\n".join(lines) + "\n")


def _read_records(path, n_values):

    '''
    Lines of "name v1 ... vn"; empty lines and # comments are skipped.
    '''

    if not os.path.isfile(path):
        raise DataError(f"{path}: file not found")
    records = {}
    with open(path) as foo:
        for lineno, line in enumerate(foo, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != n_values + 1:
                raise DataError(f"{path}:{lineno}: expected a name and {n_values} numbers")
            try:
                records[parts[0]] = tuple(float(v) for v in parts[1:])
            except ValueError:
                raise DataError(f"{path}:{lineno}: invalid number in '{line}'")
    return records


def load_bbox_file(path):

    '''
    Reads detector boxes, one "name x y w h" line per image.

    Returns:
        A dictionary name -> (x, y, w, h).
    '''

    return _read_records(path, 4)


def load_split_list(path):

    '''
    Reads a list of image names (one per line, # comments allowed).
    '''

    return list(_read_records(path, 0))


def shape_bbox(shape):

    '''
    Tight box (x, y, w, h) around a shape.
    '''

    lo, hi = shape.min(axis=0), shape.max(axis=0)
    return (float(lo[0]), float(lo[1]), float(max(hi[0] - lo[0], 1.0)), float(max(hi[1] - lo[1], 1.0)))


def _find_bbox(bboxes, root, image_path):
    rel = os.path.relpath(image_path, root).replace(os.sep, "/")
    for key in (rel, os.path.basename(image_path), os.path.splitext(os.path.basename(image_path))[0]):
        if key in bboxes:
            return bboxes[key]
    return None


def load_annotated_image(root, rel_path, bboxes=None, scheme="ibug68"):

    '''
    Loads one image entry of a landmark dataset.

    :root:
        Dataset root directory.
    :rel_path:
        Image path relative to root; the landmarks are read from the .pts
        file next to it.
    :bboxes:
        Dictionary of detector boxes (see load_bbox_file). If the image has
        no box, the tight box of its landmarks is used.
    :scheme:
        Landmark scheme the annotations are converted to.

    Returns:
        An AnnotatedFace.
    '''

    scheme = get_scheme(scheme)
    image_path = os.path.join(root, rel_path)
    shape = scheme.select(load_pts(os.path.splitext(image_path)[0] + ".pts"))
    box = _find_bbox(bboxes or {}, root, image_path)
    if box is None:
        logger.warning("%s: no detector box, using the landmark box", rel_path)
        box = shape_bbox(shape)
    return AnnotatedFace(name=rel_path.replace(os.sep, "/"), image_path=image_path, shape=shape, bbox=box)


def _list_images(directory):
    files = []
    for ext in IMAGE_EXTENSIONS:
        files += glob.glob(os.path.join(directory, "*" + ext))
    return sorted(f for f in files if os.path.isfile(os.path.splitext(f)[0] + ".pts"))


def make_300w_splits(root, bbox_file=None, list_file=None, scheme="ibug68"):

    '''
    Forms the 300-W splits from a dataset directory.

    :root:
        Directory containing afw/, helen/trainset/, helen/testset/,
        lfpw/trainset/, lfpw/testset/ and ibug/, each holding images with
        .pts annotations next to them.
    :bbox_file:
        Detector boxes ("name x y w h" lines, names relative to root).
        Defaults to root/bboxes.txt if that file exists.
    :list_file:
        Optional list of image paths relative to root forming a 'custom' split.
    :scheme:
        Landmark scheme.

    Returns:
        A dictionary split name -> DatasetSplit with keys training, common,
        challenging, full (common followed by challenging) and custom if
        list_file is given. Missing directories give empty splits; split
        sizes different from the complete release are reported as warnings.
    '''

    if not os.path.isdir(root):
        raise DataError(f"{root}: dataset directory not found")
    if bbox_file is None and os.path.isfile(os.path.join(root, "bboxes.txt")):
        bbox_file = os.path.join(root, "bboxes.txt")
    bboxes = load_bbox_file(bbox_file) if bbox_file is not None else {}

    splits = {}
    for name, subdirs in SPLIT_LAYOUT_300W.items():
        members = []
        for sub in subdirs:
            directory = os.path.join(root, sub)
            if not os.path.isdir(directory):
                logger.warning("%s: directory not found, split '%s' will be incomplete", directory, name)
                continue
            for f in _list_images(directory):
                members.append(load_annotated_image(root, os.path.relpath(f, root), bboxes, scheme))
        if len(members) != SPLIT_SIZES_300W[name]:
            logger.warning("split '%s' has %d images, the complete dataset has %d",
                           name, len(members), SPLIT_SIZES_300W[name])
        splits[name] = DatasetSplit(name=name, members=tuple(members))

    splits["full"] = DatasetSplit(name="full", members=splits["common"].members + splits["challenging"].members)

    if list_file is not None:
        members = []
        for rel in load_split_list(list_file):
            if not os.path.isfile(os.path.join(root, rel)):
                raise DataError(f"{list_file}: listed image '{rel}' not found under {root}")
            members.append(load_annotated_image(root, rel, bboxes, scheme))
        splits["custom"] = DatasetSplit(name="custom", members=tuple(members))
    return splits


@dataclass(frozen=True)
class Pointing04Label:

    person: int
    series: int
    number: int
    tilt: int
    pan: int


def parse_pointing04_name(filename):

    '''
    Parses a Pointing'04 file name such as "personne01146+0-30.jpg":
    person 01, series 1, image 46, tilt +0 and pan -30 degrees.

    Returns:
        A Pointing04Label.
    '''

    base = os.path.basename(filename).replace("−", "-")
    m = _POINTING04_NAME.match(base)
    if m is None:
        raise DataError(f"{filename}: not a Pointing'04 image name")
    person, series, number, tilt, pan = (int(g) for g in m.groups()[:5])
    return Pointing04Label(person=person, series=series, number=number, tilt=tilt, pan=pan)


def _pointing04_box(txt_path):

    # the last four numbers of the file: box center x, y, width, height
    with open(txt_path) as foo:
        numbers = []
        for token in foo.read().split():
            try:
                numbers.append(float(token))
            except ValueError:
                pass
    if len(numbers) < 4:
        raise DataError(f"{txt_path}: expected the face center and size")
    cx, cy, w, h = numbers[-4:]
    return (cx - w/2, cy - h/2, w, h)


def load_pointing04(root, bbox_file=None):

    '''
    Loads the Pointing'04 head pose images found under root (recursively).

    Pose labels come from the file names (yaw = pan, pitch = tilt, in
    degrees) and the session from the series digit. Face boxes come from
    bbox_file, from a .txt file next to the image, or else span the whole
    image.

    Returns:
        A list of AnnotatedFace objects sorted by name.
    '''

    if not os.path.isdir(root):
        raise DataError(f"{root}: dataset directory not found")
    bboxes = load_bbox_file(bbox_file) if bbox_file is not None else {}

    faces = []
    for dirpath, _, fnames in sorted(os.walk(root)):
        for fname in sorted(fnames):
            if not fname.lower().startswith("personne"):
                continue
            if os.path.splitext(fname)[1].lower() not in IMAGE_EXTENSIONS:
                continue
            label = parse_pointing04_name(fname)
            path = os.path.join(dirpath, fname)
            box = _find_bbox(bboxes, root, path)
            txt = os.path.splitext(path)[0] + ".txt"
            if box is None and os.path.isfile(txt):
                box = _pointing04_box(txt)
            if box is None:
                h, w = read_gray_image(path).shape
                box = (0.0, 0.0, float(w), float(h))
            faces.append(AnnotatedFace(name=os.path.relpath(path, root).replace(os.sep, "/"),
                                       image_path=path, bbox=box,
                                       pose=(float(label.pan), float(label.tilt)),
                                       session=label.series))
    if not faces:
        raise DataError(f"{root}: no Pointing'04 images found")
    return sorted(faces, key=lambda f: f.name)


def pose_folds(faces, n_folds=2, seed=0):

    '''
    Cross-validation folds of a head pose dataset.

    :faces:
        List of AnnotatedFace objects.
    :n_folds:
        2 gives one fold per recording session (each fold holds the
        images of a single session); any other value gives folds of a
        seeded random shuffle.

    Returns:
        A list of (train_indices, test_indices) pairs.
    '''

    n = len(faces)
    if n_folds < 2:
        raise UsageError(f"at least 2 folds are needed, got {n_folds}")
    if n < n_folds:
        raise DataError(f"cannot form {n_folds} folds from {n} images")

    if n_folds == 2 and all(f.session is not None for f in faces):
        sessions = sorted(set(f.session for f in faces))
        if len(sessions) == 2:
            groups = [np.array([i for i, f in enumerate(faces) if f.session == s]) for s in sessions]
        else:
            logger.warning("%d sessions found, falling back to random folds", len(sessions))
            groups = None
    else:
        groups = None

    if groups is None:
        perm = np.random.default_rng(seed).permutation(n)
        groups = [np.sort(g) for g in np.array_split(perm, n_folds)]

    folds = []
    for k, test in enumerate(groups):
        train = np.sort(np.concatenate([g for j, g in enumerate(groups) if j != k]))
        folds.append((train, test))
    return folds


def _stamp_grating(img, center, theta, wavelength, sigma, amplitude):

    '''
    Adds a Gaussian windowed grating of the given orientation at center.
    '''

    h, w = img.shape
    r = int(np.ceil(3*sigma))
    cx, cy = center
    x0, x1 = max(int(cx) - r, 0), min(int(cx) + r + 2, w)
    y0, y1 = max(int(cy) - r, 0), min(int(cy) + r + 2, h)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx, dy = xs - cx, ys - cy
    u = dx*np.cos(theta) + dy*np.sin(theta)
    window = np.exp(-(dx**2 + dy**2) / (2*sigma**2))
    img[y0:y1, x0:x1] += amplitude * window * np.cos(2*np.pi*u / wavelength)


def render_synthetic_face(mean3d, pose, size, rng, noise=0.02, full3d=None):

    '''
    Renders a synthetic face.

    :mean3d:
        MeanShape3D of the landmark scheme; its projection gives the
        ground truth landmarks.
    :pose:
        OrthoPose of the face.
    :size:
        Side of the square image in pixels.
    :rng:
        numpy Generator used for the background noise.
    :noise:
        Standard deviation of the pixel noise.
    :full3d:
        Optional denser 3D shape used for the face outline; mean3d if None.

    Returns:
        A tuple (image, shape) of a GrayImage and the (n, 2) landmarks.
    '''

    shape = project(mean3d, pose)
    outline = project(full3d if full3d is not None else mean3d, pose)

    img = np.full((size, size), 0.35)
    # face: an ellipse around the outline, brighter on the side facing the viewer
    c = outline.mean(axis=0)
    extent = rms_extent(outline)
    axes = (int(round(1.25*extent)), int(round(1.45*extent)))
    mask = np.zeros((size, size), dtype=np.uint8)
    cv2.ellipse(mask, (int(round(c[0])), int(round(c[1]))), axes, float(np.degrees(pose.roll)), 0, 360, 1, -1)
    xs = (np.arange(size) - c[0]) / max(extent, 1.0)
    shading = 0.62 + 0.08*np.sin(pose.yaw)*np.clip(xs, -1.5, 1.5)[None, :]
    img = np.where(mask > 0, shading, img)

    n = len(shape)
    sigma = max(1.5, 0.12*extent)
    for j, p in enumerate(shape):
        theta = np.pi*j/n + pose.roll
        wavelength = sigma*(1.6 + 0.8*(j % 3))
        _stamp_grating(img, p, theta, wavelength, sigma, 0.22)

    img = cv2.GaussianBlur(img, (3, 3), 0.6)
    img = img + rng.normal(0.0, noise, img.shape)
    return GrayImage(np.clip(img, 0.0, 1.0)), shape


def synth_faces(count, seed=0, scheme="ibug68", mean3d=None, size=128, poses=None,
                noise=0.02, annotation_noise=0.0, yaw_range=0.6, pitch_range=0.3, roll_range=0.3,
                bbox_jitter=0.05):

    '''
    Generates synthetic annotated faces.

    Each face projects the 3D mean shape at a random pose, stamps a
    distinct oriented grating at every landmark and adds background noise.

    :count:
        Number of faces.
    :seed:
        Integer seed; the same seed gives identical faces.
    :scheme:
        Landmark scheme name or LandmarkScheme.
    :mean3d:
        68-point or scheme-sized MeanShape3D; the shipped shape if None.
    :size:
        Image side in pixels.
    :poses:
        Optional list of OrthoPose objects to render instead of random ones.
    :noise:
        Pixel noise standard deviation.
    :annotation_noise:
        Standard deviation (pixels) of noise added to the ground truth
        landmarks; 0 keeps them exactly on the projection.
    :yaw_range:
    :pitch_range:
    :roll_range:
        Angles are drawn uniformly from [-range, range] radians.
    :bbox_jitter:
        Relative random shift and scaling of the face box.

    Returns:
        A list of AnnotatedFace objects with in-memory images, pose labels
        (degrees) and the generating pose.
    '''

    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    scheme = get_scheme(scheme)
    if mean3d is None:
        mean3d = load_mean_shape()
    full3d = mean3d if mean3d.n == 68 else None
    mean3d = scheme.select(mean3d)
    if poses is not None and len(poses) != count:
        raise ValueError(f"{len(poses)} poses given for {count} faces")

    rng = np.random.default_rng(seed)
    faces = []
    for i in range(count):
        if poses is not None:
            pose = poses[i]
        else:
            pose = OrthoPose(k=size*rng.uniform(0.22, 0.28),
                             yaw=rng.uniform(-yaw_range, yaw_range),
                             pitch=rng.uniform(-pitch_range, pitch_range),
                             roll=rng.uniform(-roll_range, roll_range),
                             tx=size/2 + size*rng.uniform(-0.05, 0.05),
                             ty=size/2 + size*rng.uniform(-0.05, 0.05))
        image, shape = render_synthetic_face(mean3d, pose, size, rng, noise=noise, full3d=full3d)
        if annotation_noise > 0:
            shape = shape + rng.normal(0.0, annotation_noise, shape.shape)

        # detector-like box: square around the face outline, jittered
        outline = project(full3d, pose) if full3d is not None else shape
        x, y, w, h = shape_bbox(outline)
        side = max(w, h) * (1 + rng.uniform(-bbox_jitter, bbox_jitter))
        cx = x + w/2 + side*rng.uniform(-bbox_jitter, bbox_jitter)
        cy = y + h/2 + side*rng.uniform(-bbox_jitter, bbox_jitter)
        faces.append(AnnotatedFace(name=f"synth{seed}_{i:05d}", shape=shape,
                                   bbox=(cx - side/2, cy - side/2, side, side),
                                   pose=(float(np.degrees(pose.yaw)), float(np.degrees(pose.pitch))),
                                   image=image, true_pose=pose))
    return faces
