import base64

from hashlib import sha256

import jsoncanon


def format_hash(digest: bytes) -> str:
    return base64.b32encode(digest).decode("ascii").lower().rstrip("=")


def normalize_config(value: dict) -> bytes:
    return jsoncanon.canonicalize(value)


def config_hash(value: dict) -> str:
    return format_hash(sha256(normalize_config(value)).digest())


def format_float(value: float) -> str:
    # shortest repr that round-trips; empty cell for missing
    if value is None or value != value:
        return ""
    return repr(float(value))
