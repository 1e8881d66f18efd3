'''
Binary container used to store trained models.

Layout of a container file (all integers little-endian):

    6 bytes   magic b"KRFWS\\0"
    uint16    container version (currently 1)
    uint32    length H of the header in bytes
    H bytes   UTF-8 JSON header, keys sorted, no whitespace:
                {"arrays": [{"dtype": "<f8", "name": ..., "nbytes": ...,
                             "offset": ..., "shape": [...]}, ...],
                 "meta": {...}}
    payload   raw C-order little-endian bytes of every array, in header
              order; "offset" counts from the start of the payload

Arrays are listed in sorted name order and the JSON header is written
deterministically, so saving the same model twice gives identical bytes
and loading restores every array bit for bit.
'''

import json
import os
import struct

import numpy as np

from krfws.exceptions import DataError


MAGIC = b"KRFWS\0"
CONTAINER_VERSION = 1


def to_bytes(meta, arrays):

    '''
    Encodes a metadata dictionary and a dictionary of numpy arrays.

    :meta:
        A JSON-serializable dictionary.
    :arrays:
        A dictionary name -> numpy array.

    Returns:
        The encoded container as bytes.
    '''

    descr = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        a = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))
        descr.append({"name": name,
                      "dtype": a.dtype.str,
                      "shape": list(a.shape),
                      "offset": offset,
                      "nbytes": a.nbytes})
        blobs.append(a.tobytes(order="C"))
        offset += a.nbytes

    header = json.dumps({"meta": meta, "arrays": descr}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<HI", CONTAINER_VERSION, len(header)) + header + b"".join(blobs)


def from_bytes(buf, source="<bytes>"):

    '''
    Decodes a container produced by to_bytes.

    Returns:
        A tuple (meta, arrays).
    '''

    prefix = len(MAGIC) + 6
    if len(buf) < prefix or buf[:len(MAGIC)] != MAGIC:
        raise DataError(f"{source}: not a krfws model container")
    version, hlen = struct.unpack("<HI", buf[len(MAGIC):prefix])
    if version != CONTAINER_VERSION:
        raise DataError(f"{source}: unsupported container version {version}")
    try:
        header = json.loads(buf[prefix:prefix + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as ex:
        raise DataError(f"{source}: corrupted container header ({ex})")

    payload = buf[prefix + hlen:]
    arrays = {}
    for d in header["arrays"]:
        start, stop = d["offset"], d["offset"] + d["nbytes"]
        if stop > len(payload):
            raise DataError(f"{source}: truncated array '{d['name']}'")
        a = np.frombuffer(payload[start:stop], dtype=np.dtype(d["dtype"]))
        arrays[d["name"]] = a.reshape(d["shape"]).copy()
    return header["meta"], arrays


def write_container(fname, meta, arrays):

    '''
    Saves a container file, creating its directory if needed.
    '''

    head = os.path.dirname(fname)
    if head and not os.path.isdir(head):
        os.makedirs(head)
    with open(fname, "wb") as foo:
        foo.write(to_bytes(meta, arrays))


def read_container(fname):

    '''
    Reads a container file.

    Returns:
        A tuple (meta, arrays).
    '''

    if not os.path.isfile(fname):
        raise DataError(f"{fname}: model file not found")
    with open(fname, "rb") as foo:
        return from_bytes(foo.read(), source=fname)
