from typing import Literal, Tuple, Union
import os

import numpy as np

from fmsr.errors import ValidationError


def keyed_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    Independent random stream for (seed, *keys), e.g. (seed, member, lead, draw).
    Streams do not depend on the order in which they are requested.
    """
    if seed < 0 or any(k < 0 for k in keys):
        raise ValidationError(f"seed and keys must be non-negative: {seed}, {keys}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def torch_seed(rng: np.random.Generator) -> int:
    """Draw a seed for a torch.Generator from a numpy stream."""
    return int(rng.integers(0, 2**62))


def split_times(
    n_times: int,
    n_train: int,
    n_val: int,
    n_test: int,
    by: Literal["ordered", "random"] = "ordered",
    random_seed: int = 0,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Split time indices into train, validation and test sets.
    :param n_times: # of available time steps
    :param by: "ordered" uses the earliest steps for training (default: "ordered")
    :param random_seed: random seed for by="random"; (default: 0, int)
    :return: train, val, test index arrays
    """
    if min(n_train, n_val, n_test) < 0:
        raise ValidationError("split sizes must be non-negative")
    if n_train + n_val + n_test > n_times:
        raise ValidationError(
            f"split {n_train}/{n_val}/{n_test} needs {n_train + n_val + n_test} "
            f"time steps, only {n_times} available"
        )
    if by == "ordered":
        idx = np.arange(n_times)
    elif by == "random":
        idx = keyed_rng(random_seed).permutation(n_times)
    else:
        raise ValidationError(f"invalid by: {by}, expected: ordered, random")
    train = np.sort(idx[:n_train])
    val = np.sort(idx[n_train : n_train + n_val])
    test = np.sort(idx[n_train + n_val : n_train + n_val + n_test])
    return train, val, test


def get_full_path(*args: Union[str, os.PathLike]) -> str:
    _path = os.path.expanduser(os.path.abspath(os.path.join(*args)))
    if not os.path.exists(os.path.dirname(_path)) and not os.path.isdir(
        os.path.dirname(_path)
    ):
        os.makedirs(os.path.dirname(_path))
    return _path

