import asyncio
import json

from pathlib import Path
from typing import Dict, Union

import aiofiles

from multiformats import multibase, multihash

from .const import MANIFEST_FILENAME, VERSION

Content = Union[str, bytes]


def _as_bytes(content: Content) -> bytes:
    return content.encode("utf-8") if isinstance(content, str) else content


def content_hash(content: Content) -> str:
    return multibase.encode(multihash.digest(_as_bytes(content), "sha2-256"), "base58btc")


async def _write_one(path: Path, content: Content):
    path.parent.mkdir(parents=True, exist_ok=True)
    async with aiofiles.open(path, "wb") as out:
        await out.write(_as_bytes(content))


async def write_artifacts(out_dir: Union[str, Path], files: Dict[str, Content]):
    """Write each relative path in `files` below `out_dir`."""
    out_dir = Path(out_dir)
    for name in files:
        if Path(name).is_absolute() or ".." in Path(name).parts:
            raise ValueError(f"Invalid artifact path: {name}")
    await asyncio.gather(*(_write_one(out_dir.joinpath(n), c) for n, c in files.items()))


def build_manifest(
    files: Dict[str, Content], *, seed: int, config_hash: str, version: str = VERSION
) -> str:
    manifest = {
        "version": version,
        "seed": seed,
        "configHash": config_hash,
        "files": {name: content_hash(files[name]) for name in sorted(files)},
    }
    return json.dumps(manifest, indent=2, sort_keys=True) + "\n"


def save_run(
    out_dir: Union[str, Path], files: Dict[str, Content], *, seed: int, config_hash: str
) -> Dict[str, Content]:
    """Write artifacts and a manifest covering them, returning everything written."""
    files = dict(files)
    files[MANIFEST_FILENAME] = build_manifest(files, seed=seed, config_hash=config_hash)
    asyncio.run(write_artifacts(out_dir, files))
    return files
