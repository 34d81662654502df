import hashlib
import math
import time
from contextlib import contextmanager

import rapidjson as json


def derive_seed(seed, *keys):
    """Derive a child seed from the master `seed` and any number of keys.

    The same (seed, keys) always maps to the same 32-bit integer, independent of
    the order traces are scheduled in.
    """
    blob = ":".join(str(k) for k in (seed,) + keys)
    return int.from_bytes(hashlib.sha1(blob.encode()).digest()[:4], "big")


def compute_config_hash(config):
    blob = json.dumps(config, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def format_float(value):
    # 17 significant digits round-trip every float64
    return format(float(value), ".17g")


def mean_std(values):
    """Population mean and standard deviation; (0.0, 0.0) for no values.

    fsum keeps the result independent of the order of `values`.
    """
    values = [float(v) for v in values]
    if not values:
        return 0.0, 0.0
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / len(values)
    return mean, var ** 0.5


@contextmanager
def timer(head, msg, indent=0, result=True):
    _id = " " * (4 * indent)
    print(head + _id + msg, flush=True)
    start = time.time()
    yield None
    if result:
        dt = time.time() - start
        print(head + _id + msg + f" took {dt:0.2f} seconds", flush=True)
