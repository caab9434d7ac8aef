import os
import configparser

import torch

from .errors import UsageError

SECTIONS = ('controller', 'stack', 'tasks', 'training', 'cli')


class Config:
    DATA_DIR = os.getenv('STACKWFA_DATA_DIR', 'artifacts')
    LOG_LEVEL = os.getenv('STACKWFA_LOG_LEVEL', 'INFO')
    LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    DTYPE = torch.float64


def _convert(value):
    """Typed value from an INI string: int, float, bool, none, comma list or str."""
    text = value.strip()
    lowered = text.lower()
    if lowered in ('true', 'yes', 'on'):
        return True
    if lowered in ('false', 'no', 'off'):
        return False
    if lowered in ('none', ''):
        return None
    if ',' in text:
        return [_convert(part) for part in text.split(',')]
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def load_config(path):
    """Read an INI-style config file into ``{section: {key: value}}``.

    Only the known sections are accepted; keys use underscores the way
    :class:`stackwfa.training.TrainConfig` names its fields.
    """
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding='utf-8') as f:
            parser.read_file(f)
    except OSError as e:
        raise UsageError(f"Cannot read config file {path}: {e}")
    sections = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise UsageError(f"Unknown config section [{name}] in {path}")
        sections[name] = {key.replace('-', '_'): _convert(value) for key, value in parser.items(name)}
    return sections


def data_dir(override=None):
    return override or Config.DATA_DIR
