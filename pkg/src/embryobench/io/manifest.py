"""Run manifests: resolved config plus a checksum for every output file."""
import datetime as _dt
import hashlib
import json
from pathlib import Path

from .. import __version__

MANIFEST_NAME = "manifest.json"


def sha256_file(path, chunk=1 << 20):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


def checksums(out_dir):
    """``{relative posix path: sha256}`` for every file except the manifest."""
    out_dir = Path(out_dir)
    result = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != MANIFEST_NAME:
            result[p.relative_to(out_dir).as_posix()] = sha256_file(p)
    return result


def write_manifest(config, out_dir, extra=None):
    out_dir = Path(out_dir)
    manifest = {
        "tool": "embryobench",
        "version": __version__,
        "seed": config["seed"],
        "config": config,
        **(extra or {}),
        "files": checksums(out_dir),
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(out_dir):
    return json.loads((Path(out_dir) / MANIFEST_NAME).read_text(encoding="utf-8"))


def verify_manifest(out_dir):
    """Relative paths whose checksum differs from, or is missing in, the manifest."""
    recorded = read_manifest(out_dir)["files"]
    actual = checksums(out_dir)
    return sorted(k for k in set(recorded) | set(actual) if recorded.get(k) != actual.get(k))
