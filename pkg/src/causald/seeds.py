import hashlib


def derive_seed(master: int, *labels) -> int:
    """Stable 63-bit sub-seed for ``labels`` under ``master``."""
    key = ":".join([str(master), *map(str, labels)]).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") >> 1
