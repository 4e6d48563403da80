import hashlib

import numpy as np

# имена подпотоков: imu, pixels, gnss, gmm-init, city, landmarks, ...


def substream(root_seed: int, name: str) -> np.random.Generator:
    key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "little")
    return np.random.default_rng([int(root_seed), key])


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
