"""
Model container

Self-describing binary files for trained conversion models:

    magic  b'CLPM'
    header <H version> <B kind> <B reserved> <I ndims> ndims x <I dim>
    payload row-major little-endian float64 arrays

GMM dims: Q, joint_dim, order, include_c0. Payload: weights, means, covariances.
NMF dims: num_bins, R, frame_len, hop. Payload: w_src, w_tgt.
"""
import logging
import os
import struct

import numpy as np

from errors import ModelFormatError
from transforms import GmmJointModel, NmfDictionaries

# Initialize logger
logger = logging.getLogger(__name__)

MAGIC = b'CLPM'
FORMAT_VERSION = 1
KIND_GMM = 1
KIND_NMF = 2
KIND_NAMES = {KIND_GMM: 'gmm', KIND_NMF: 'nmf'}

_HEADER = struct.Struct('<4sHBBI')
_DIM = struct.Struct('<I')
_FLOAT = np.dtype('<f8')


def _pack(kind, dims, arrays):
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, kind, 0, len(dims))]
    parts.extend(_DIM.pack(int(d)) for d in dims)
    parts.extend(np.ascontiguousarray(a, dtype=_FLOAT).tobytes() for a in arrays)
    return b''.join(parts)


def _unpack_header(data):
    if len(data) < _HEADER.size:
        raise ModelFormatError("Model file is truncated")
    magic, version, kind, _, ndims = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ModelFormatError(f"Not a model container (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"Unsupported model version {version}, expected {FORMAT_VERSION}")
    if kind not in KIND_NAMES:
        raise ModelFormatError(f"Unknown model kind {kind}")
    offset = _HEADER.size
    if len(data) < offset + ndims * _DIM.size:
        raise ModelFormatError("Model header is truncated")
    dims = [_DIM.unpack_from(data, offset + i * _DIM.size)[0] for i in range(ndims)]
    return kind, dims, offset + ndims * _DIM.size


def _read_arrays(data, offset, shapes):
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        end = offset + count * _FLOAT.itemsize
        if end > len(data):
            raise ModelFormatError("Model payload is truncated")
        arrays.append(np.frombuffer(data, dtype=_FLOAT, count=count, offset=offset).reshape(shape).copy())
        offset = end
    if offset != len(data):
        raise ModelFormatError(f"Model payload has {len(data) - offset} trailing bytes")
    return arrays


def dumps_gmm(model):
    dims = [model.num_components, model.means.shape[1], model.order, int(model.include_c0)]
    return _pack(KIND_GMM, dims, [model.weights, model.means, model.covariances])


def loads_gmm(data, expected_order=None):
    kind, dims, offset = _unpack_header(data)
    if kind != KIND_GMM:
        raise ModelFormatError(f"Expected a gmm model, found {KIND_NAMES[kind]}")
    if len(dims) != 4:
        raise ModelFormatError(f"GMM header needs 4 dimensions, found {len(dims)}")
    q, joint, order, include_c0 = dims
    if expected_order is not None and order != expected_order:
        raise ModelFormatError(f"Model cepstral order {order} does not match expected {expected_order}")
    weights, means, covs = _read_arrays(data, offset, [(q,), (q, joint), (q, joint, joint)])
    try:
        return GmmJointModel(weights, means, covs, order=order, include_c0=bool(include_c0))
    except ValueError as e:
        raise ModelFormatError(f"Invalid GMM payload: {str(e)}") from e


def dumps_nmf(dicts):
    dims = [dicts.w_src.shape[0], dicts.rank, dicts.frame_len, dicts.hop]
    return _pack(KIND_NMF, dims, [dicts.w_src, dicts.w_tgt])


def loads_nmf(data, expected_frame_len=None):
    kind, dims, offset = _unpack_header(data)
    if kind != KIND_NMF:
        raise ModelFormatError(f"Expected an nmf model, found {KIND_NAMES[kind]}")
    if len(dims) != 4:
        raise ModelFormatError(f"NMF header needs 4 dimensions, found {len(dims)}")
    bins, rank, frame_len, hop = dims
    if expected_frame_len is not None and frame_len != expected_frame_len:
        raise ModelFormatError(f"Model frame length {frame_len} does not match expected {expected_frame_len}")
    w_src, w_tgt = _read_arrays(data, offset, [(bins, rank), (bins, rank)])
    try:
        return NmfDictionaries(w_src, w_tgt, frame_len=frame_len, hop=hop)
    except ValueError as e:
        raise ModelFormatError(f"Invalid NMF payload: {str(e)}") from e


def save_model(model, path):
    """Write a GmmJointModel or NmfDictionaries to path."""
    if isinstance(model, GmmJointModel):
        data = dumps_gmm(model)
    elif isinstance(model, NmfDictionaries):
        data = dumps_nmf(model)
    else:
        raise TypeError(f"Cannot serialize {type(model).__name__}")
    with open(path, 'wb') as f:
        f.write(data)
    logger.info(f"Saved {type(model).__name__} to {path} ({len(data) / 1024:.1f} KB)")


def model_kind(path):
    """'gmm' or 'nmf' from the container header."""
    with open(path, 'rb') as f:
        kind, _, _ = _unpack_header(f.read())
    return KIND_NAMES[kind]


def load_gmm(path, expected_order=None):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, 'rb') as f:
        return loads_gmm(f.read(), expected_order)


def load_nmf(path, expected_frame_len=None):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, 'rb') as f:
        return loads_nmf(f.read(), expected_frame_len)
