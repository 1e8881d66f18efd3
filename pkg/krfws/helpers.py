import os
import threading

import numpy as np
import cv2

from krfws.exceptions import DataError


# lock shared by all console output, so that progress lines written
# from worker threads do not interleave
_console_lock = threading.Lock()

# image file extensions accepted by read_gray_image
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


def progress(msg):

    '''
    Prints a progress message which is overwritten by the next one.

    :msg:
        The text of the message.
    '''

    with _console_lock:
        print(msg + 40*" " + "\r", end="", flush=True)


def announce(msg):

    '''
    Prints a message on its own line.
    '''

    with _console_lock:
        print(msg + 40*" ")


def worker_count(n_jobs=None):

    '''
    Number of worker threads to use.

    :n_jobs:
        Requested number of workers. If None, the number of CPUs is used.

    Returns:
        The requested number capped by the KRFWS_THREADS environment
        variable (if it is set) and by 1 from below.
    '''

    if n_jobs is None or n_jobs < 1:
        n_jobs = os.cpu_count() or 1
    cap = os.environ.get("KRFWS_THREADS", "").strip()
    if cap:
        try:
            n_jobs = min(n_jobs, int(cap))
        except ValueError:
            pass
    return max(1, n_jobs)


def read_gray_image(fname):

    '''
    Reads an 8-bit PNG or JPEG file and converts it to grayscale intensities.

    :fname:
        Name of the image file.

    Returns:
        A 2D float64 numpy array with values in [0, 1]. Color images are
        converted with the luma weights 0.299, 0.587, 0.114.
    '''

    ext = os.path.splitext(fname)[1].lower()
    if ext not in IMAGE_EXTENSIONS:
        raise DataError(f"{fname}: unsupported image format '{ext}', expected PNG or JPEG")
    if not os.path.isfile(fname):
        raise DataError(f"{fname}: file not found")

    img = cv2.imread(fname, cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DataError(f"{fname}: the file could not be decoded")
    if img.dtype != np.uint8:
        raise DataError(f"{fname}: only 8-bit images are supported, got {img.dtype}")

    img = img.astype(np.float32) / 255.0
    if img.ndim == 3:
        # drop the alpha channel if present
        if img.shape[2] == 4:
            img = img[:, :, :3]
        img = cv2.cvtColor(img, cv2.COLOR_BGR2GRAY)
    return np.clip(img.astype(np.float64), 0.0, 1.0)


def write_gray_image(fname, data):

    '''
    Saves intensities in [0, 1] as an 8-bit grayscale image.
    '''

    head = os.path.dirname(fname)
    if head and not os.path.isdir(head):
        os.makedirs(head)
    img = np.round(np.clip(data, 0.0, 1.0) * 255).astype(np.uint8)
    if not cv2.imwrite(fname, img):
        raise DataError(f"{fname}: the image could not be written")
