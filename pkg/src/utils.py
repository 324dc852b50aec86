import os
import json
import hashlib
import tempfile
import logging

from src.errors import CorpusError

logger = logging.getLogger(__name__)


def dumps_line(obj):
    """Serialize one JSONL line (UTF-8 text, no ASCII escaping, LF terminated)."""
    return json.dumps(obj, ensure_ascii=False, separators=(', ', ': ')) + '\n'


def iter_jsonl(source, error=CorpusError):
    """
    Yield (line_number, raw_line) for every non-blank line of a UTF-8 byte
    stream or text. Line numbers are 1-based. Undecodable input raises
    `error` with kind Encoding.
    """
    data = source.read() if hasattr(source, 'read') else source
    if isinstance(data, bytes):
        try:
            data = data.decode('utf-8')
        except UnicodeDecodeError as e:
            raise error('Encoding', f"input is not valid UTF-8: {e}") from e
    for line_number, line in enumerate(data.split('\n'), 1):
        if line.strip():
            yield line_number, line


def write_jsonl(rows, sink):
    """Write dict rows to a binary sink, one JSON object per line. Returns rows written."""
    count = 0
    for row in rows:
        sink.write(dumps_line(row).encode('utf-8'))
        count += 1
    return count


def atomic_write_bytes(path, payload):
    """
    Write bytes to path via a temp file in the same folder and os.replace,
    so readers never observe a half written checkpoint.
    """
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=folder, prefix='.tmp-', suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_path, path)
    except Exception:
        logger.error(f"Failed to write {path}", exc_info=True)
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_jsonl(path, rows):
    atomic_write_bytes(path, ''.join(dumps_line(row) for row in rows).encode('utf-8'))


def write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + '\n').encode('utf-8'))


def read_json(path):
    with open(path, 'r', encoding='utf-8') as handle:
        return json.load(handle)


def stable_hash(obj):
    """sha256 hex digest of the canonical JSON form of obj."""
    canonical = json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def round_half_up(numerator, denominator=1):
    """Round numerator/denominator to the nearest integer, halves away from zero (non-negative inputs)."""
    return (2 * numerator + denominator) // (2 * denominator)
