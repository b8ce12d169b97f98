import asyncio
import json

from hashlib import sha256

import pytest

from multiformats import multibase, multihash

from dynpred_bench.artifacts import build_manifest, content_hash, save_run, write_artifacts
from dynpred_bench.const import MANIFEST_FILENAME, VERSION

FILES = {
    "results.csv": "method,landmark\nprc,2.0\n",
    "fits/prc/landmark_2.0/coefficients.csv": "term,coefficient\n",
    "figure.svg": b"<svg/>",
}


def test_content_hash():
    encoded = content_hash("abc")
    assert encoded.startswith("z")
    assert multihash.unwrap(multibase.decode(encoded)) == sha256(b"abc").digest()
    assert content_hash(b"abc") == encoded
    assert content_hash("abd") != encoded


def test_write_artifacts(tmp_path):
    asyncio.run(write_artifacts(tmp_path, FILES))
    assert (tmp_path / "results.csv").read_text() == FILES["results.csv"]
    assert (tmp_path / "fits" / "prc" / "landmark_2.0" / "coefficients.csv").exists()
    assert (tmp_path / "figure.svg").read_bytes() == b"<svg/>"


@pytest.mark.parametrize("name", ["../escape.csv", "/tmp/absolute.csv", "fits/../../up.csv"])
def test_write_artifacts_rejects_paths(tmp_path, name):
    with pytest.raises(ValueError):
        asyncio.run(write_artifacts(tmp_path / "out", {name: "x"}))
    assert not (tmp_path / "out").exists()


def test_manifest():
    text = build_manifest(FILES, seed=7, config_hash="abc")
    manifest = json.loads(text)
    assert manifest["version"] == VERSION
    assert manifest["seed"] == 7
    assert manifest["configHash"] == "abc"
    assert list(manifest["files"]) == sorted(FILES)
    assert manifest["files"]["figure.svg"] == content_hash(b"<svg/>")
    assert text == build_manifest(dict(reversed(FILES.items())), seed=7, config_hash="abc")


def test_save_run_covers_every_file(tmp_path):
    written = save_run(tmp_path, FILES, seed=1, config_hash="h")
    assert set(written) == {*FILES, MANIFEST_FILENAME}
    manifest = json.loads((tmp_path / MANIFEST_FILENAME).read_text())
    assert set(manifest["files"]) == set(FILES)
    for name, digest in manifest["files"].items():
        assert content_hash((tmp_path / name).read_bytes()) == digest
