"""Versioned binary checkpoints.

Layout: magic ``b'SWFA'``, format version (uint32), header length (uint32),
UTF-8 JSON header, then every array as little-endian float64 in manifest
order. The header carries the model config echo, free-form metadata and the
manifest (name, shape, original dtype, offset) of the named arrays.
"""
import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DataError

logger = logging.getLogger(__name__)

MAGIC = b'SWFA'
VERSION = 1
_PREFIX = struct.Struct('<4sII')

PARAMETER, OPTIMIZER, FORWARDED, BEST = 'param/', 'optim/', 'forward/', 'best/'


@dataclass
class Checkpoint:
    config: dict
    parameters: dict
    optimizer: dict = field(default_factory=dict)
    forwarded: dict = field(default_factory=dict)
    best: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def arrays(self):
        named = {}
        for prefix, group in ((PARAMETER, self.parameters), (OPTIMIZER, self.optimizer), (FORWARDED, self.forwarded),
                              (BEST, self.best)):
            for name, value in group.items():
                named[prefix + name] = value
        return named

    def save(self, path):
        save_arrays(path, self.arrays(), {'config': self.config, 'metadata': self.metadata})
        logger.info(f"Checkpoint written to {path}")
        return path

    @classmethod
    def load(cls, path):
        header, arrays = load_arrays(path)
        groups = {PARAMETER: {}, OPTIMIZER: {}, FORWARDED: {}, BEST: {}}
        for name, value in arrays.items():
            for prefix, group in groups.items():
                if name.startswith(prefix):
                    group[name[len(prefix):]] = value
                    break
            else:
                raise DataError(f"Checkpoint {path} holds an array with unknown group: {name}")
        return cls(header.get('config', {}), groups[PARAMETER], groups[OPTIMIZER], groups[FORWARDED],
                   groups[BEST], header.get('metadata', {}))


def _as_array(value):
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().numpy(), str(value.dtype).replace('torch.', '')
    array = np.asarray(value)
    return array, str(array.dtype)


def save_arrays(path, arrays, header):
    manifest, blobs, offset = [], [], 0
    for name, value in arrays.items():
        array, dtype = _as_array(value)
        data = np.ascontiguousarray(array, dtype='<f8').tobytes()
        manifest.append({'name': name, 'shape': list(array.shape), 'dtype': dtype, 'offset': offset})
        blobs.append(data)
        offset += len(data)
    encoded = json.dumps(dict(header, manifest=manifest), sort_keys=True).encode('utf-8')
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    temporary = path + '.tmp'
    with open(temporary, 'wb') as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(encoded)))
        f.write(encoded)
        for blob in blobs:
            f.write(blob)
    os.replace(temporary, path)


def load_arrays(path):
    """``(header, {name: torch.Tensor})`` with every tensor in its original dtype."""
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"Cannot read checkpoint {path}: {e}")
    if len(raw) < _PREFIX.size:
        raise DataError(f"{path} is too short to be a checkpoint")
    magic, version, length = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path} is not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise DataError(f"{path} has checkpoint format version {version}, expected {VERSION}")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"Corrupt checkpoint header in {path}: {e}")
    body = raw[_PREFIX.size + length:]
    arrays = {}
    for entry in header.pop('manifest'):
        count = int(np.prod(entry['shape'], dtype=np.int64))
        start, end = entry['offset'], entry['offset'] + 8 * count
        if end > len(body):
            raise DataError(f"Checkpoint {path} is truncated at array {entry['name']}")
        values = np.frombuffer(body[start:end], dtype='<f8').reshape(entry['shape'])
        arrays[entry['name']] = torch.from_numpy(values.copy()).to(getattr(torch, entry['dtype']))
    return header, arrays


def optimizer_arrays(optimizer):
    """Flatten ``optimizer.state_dict()`` into named tensors plus JSON-able groups."""
    state = optimizer.state_dict()
    arrays = {}
    for index, values in state['state'].items():
        for key, value in values.items():
            arrays[f'{index}/{key}'] = value if isinstance(value, torch.Tensor) else torch.tensor(value)
    return arrays, state['param_groups']


def load_optimizer_arrays(optimizer, arrays, param_groups):
    state = {}
    for name, value in arrays.items():
        index, key = name.split('/', 1)
        state.setdefault(int(index), {})[key] = value
    optimizer.load_state_dict({'state': state, 'param_groups': param_groups})
