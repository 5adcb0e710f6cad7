import hashlib
import json
from contextlib import contextmanager

import numpy as np


@contextmanager
def ignore_exception(*exceptions: Exception):
    """
    Ignores the given exceptions

    Parameters
    ----------
    *exceptions tuple[Exception]: The exceptions you want to ignore
    """

    try:
        yield
    except exceptions:
        pass


def rng_stream(seed: int, *names: str | int) -> np.random.Generator:
    """
    Derives a named random stream from a root seed

    Every source of randomness (data, init, shuffle, ...) gets its own stream so that changing one
    component never shifts the numbers drawn by another.

    Parameters
    ----------
    seed (int): The root seed
    *names (str | int): Path of the stream, e.g. ('init', 'f', 0)

    Returns
    ----------
    np.random.Generator: A generator seeded from the root seed and the stream path
    """

    path = '/'.join(str(name) for name in names).encode('utf8')
    digest = hashlib.sha256(path).digest()
    spawn_key = tuple(int.from_bytes(digest[i:i + 4], 'little') for i in range(0, 16, 4))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key))


def checksum(*arrays: np.ndarray) -> str:
    """
    SHA-256 over the raw little-endian float64 bytes of the given arrays

    Returns
    ----------
    str: Hex digest
    """

    digest = hashlib.sha256()
    for array in arrays:
        array = np.ascontiguousarray(array)
        digest.update(str(array.shape).encode('utf8'))
        digest.update(array.astype(array.dtype.newbyteorder('<'), copy=False).tobytes())
    return digest.hexdigest()


def config_hash(config: dict) -> str:
    """
    Hashes a resolved config through its canonical JSON form

    Parameters
    ----------
    config (dict): A JSON-serialisable config snapshot

    Returns
    ----------
    str: Hex digest
    """

    canonical = json.dumps(config, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode('utf8')).hexdigest()


def ema(values: list[float], factor: float = 0.9) -> list[float]:
    """
    Exponential moving average, s_0 = x_0 and s_t = factor * s_(t-1) + (1 - factor) * x_t
    """

    smoothed = []
    for value in values:
        smoothed.append(value if not smoothed else factor * smoothed[-1] + (1 - factor) * value)
    return smoothed
