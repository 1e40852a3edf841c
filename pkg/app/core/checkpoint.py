"""Versioned binary container used for every checkpoint the pipeline writes.

Layout (little endian):

    offset  size  field
    0       8     magic b"NERFSR\\x00\\x01"
    8       2     uint16 format version
    10      4     uint32 header length N
    14      N     UTF-8 JSON header: kind, version, created, payload_sha256,
                  payload_bytes, meta
    14+N    ...   torch.save payload (dict of tensors and plain values)
"""
import hashlib
import io
import json
import logging
import struct
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping

import torch

from app.core.errors import IngestionError

logger = logging.getLogger(__name__)

MAGIC = b"NERFSR\x00\x01"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sHI")


def save_container(path: str | Path, kind: str, payload: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(dict(payload), buf)
    body = buf.getvalue()
    header = {
        "kind": kind,
        "version": FORMAT_VERSION,
        "created": datetime.now(timezone.utc).isoformat(),
        "payload_sha256": hashlib.sha256(body).hexdigest(),
        "payload_bytes": len(body),
        "meta": dict(meta or {}),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(body)
    tmp.replace(path)
    logger.debug("Wrote %s container %s (%d bytes)", kind, path, len(body))
    return path


def read_header(path: str | Path) -> dict:
    header, _ = _read(Path(path), with_body=False)
    return header


def load_container(path: str | Path, kind: str) -> tuple[dict, dict]:
    """Returns (payload, header) after validating magic, version, kind and payload hash."""
    path = Path(path)
    header, body = _read(path, with_body=True)
    if header.get("kind") != kind:
        raise IngestionError(f"Expected a '{kind}' container, found '{header.get('kind')}'", path)
    if hashlib.sha256(body).hexdigest() != header.get("payload_sha256"):
        raise IngestionError("Container payload hash mismatch", path)
    payload = torch.load(io.BytesIO(body), map_location="cpu", weights_only=False)
    return payload, header


def _read(path: Path, with_body: bool) -> tuple[dict, bytes]:
    if not path.is_file():
        raise IngestionError("Checkpoint not found", path)
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) != _PREFIX.size:
            raise IngestionError("Truncated container", path)
        magic, version, header_len = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise IngestionError("Not a checkpoint container (bad magic)", path)
        if version > FORMAT_VERSION:
            raise IngestionError(f"Unsupported container version {version}", path)
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise IngestionError(f"Malformed container header: {e}", path) from e
        body = fh.read() if with_body else b""
    return header, body


def tensor_hash(tensors: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]]) -> str:
    items = tensors.items() if isinstance(tensors, Mapping) else tensors
    h = hashlib.sha256()
    for name, t in sorted(items, key=lambda kv: kv[0]):
        t = t.detach().cpu().contiguous()
        h.update(name.encode("utf-8"))
        h.update(str(t.dtype).encode("utf-8"))
        h.update(str(tuple(t.shape)).encode("utf-8"))
        h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
    return h.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return tensor_hash(module.state_dict())
