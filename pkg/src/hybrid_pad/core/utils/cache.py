"""Content hashing for bundles and scene directories."""
import hashlib
import logging
from pathlib import Path
from typing import Dict

logger = logging.getLogger(__name__)


def file_hash(path: Path) -> str:
    """blake2b digest of a file's bytes."""
    digest = hashlib.blake2b(digest_size=32)
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def directory_hashes(folder: Path) -> Dict[str, str]:
    """Relative posix path -> content hash for every file under `folder`, sorted by path."""
    if not folder.exists():
        return {}
    hashes = {}
    for path in sorted(p for p in folder.rglob("*") if p.is_file()):
        hashes[path.relative_to(folder).as_posix()] = file_hash(path)
    return hashes


def directory_hash(folder: Path) -> str:
    """Single digest over all relative paths and file contents of a directory."""
    digest = hashlib.blake2b(digest_size=32)
    for rel, content_hash in directory_hashes(folder).items():
        digest.update(f"{rel}:{content_hash}\n".encode())
    return digest.hexdigest()
