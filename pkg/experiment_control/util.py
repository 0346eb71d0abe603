from __future__ import annotations
import errno
import json
import os
from pathlib import Path

"""
Utility methods shared across the experiment scripts
"""


def make_directory(directory: str | os.PathLike) -> Path:
    """
    Create a directory (and parents) if it does not exist yet.
    """
    directory = Path(directory)
    if not directory.exists():
        try:
            os.makedirs(directory)
            print(f"Created directory: {directory}")
        except OSError as e:
            # another worker may have created it in the meantime
            if e.errno != errno.EEXIST:
                raise
    return directory


def run_id(method: str, regime: float, seed: int, probe: str) -> str:
    """
    Build the identifier of one (method, regime, seed, probe) run

    e.g. HPCA-r1-s0-L3
    """
    return f"{method}-r{regime:g}-s{seed}-{probe}"


def checkpoint_name(seed: int) -> str:
    return f"hpca_seed{seed}.ckpt"


def write_json(path: str | os.PathLike, content: dict) -> Path:
    """
    Write a json file with sorted keys so identical content gives identical bytes.
    """
    path = Path(path)
    make_directory(path.parent)
    try:
        with open(path, "w") as f:
            json.dump(content, f, indent=2, sort_keys=True)
            f.write("\n")
    except IOError as e:
        print(f"Error writing to file {path}: {e}")
        raise
    return path


def read_json(path: str | os.PathLike) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"File not found: {path}")
    with open(path) as f:
        return json.load(f)
