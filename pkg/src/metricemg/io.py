"""Binary recording files (``.emgrec``) and model checkpoints.

Recording layout, little-endian::

    offset  size  field
    0       8     magic b"EMGREC\\x00\\x01"
    8       2     format version (uint16, currently 1)
    10      8     sample_rate_hz (float64)
    18      4     channel count (uint32)
    22      8     sample count per channel (uint64)
    30      1     label-track flag (uint8, 0 or 1)
    31      4*C*T samples, float32, channel-major
    ...     2*T   label ids, uint16 (only when the flag is 1)

Checkpoints are ``.npz`` archives: float64 arrays plus a JSON ``meta`` entry
holding the model config, training config and seed.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .dsp import EmgRecording

MAGIC = b"EMGREC\x00\x01"
VERSION = 1
_HEADER = struct.Struct("<8sHdIQB")


class RecordingFormatError(ValueError):
    """Malformed recording file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def encode_recording(rec: EmgRecording) -> bytes:
    has_labels = rec.label_track is not None
    if has_labels and (rec.label_track.min(initial=0) < 0 or rec.label_track.max(initial=0) > 0xFFFF):
        raise ValueError("label ids must fit in uint16")
    header = _HEADER.pack(MAGIC, VERSION, float(rec.sample_rate_hz), rec.channels, rec.num_samples, int(has_labels))
    body = rec.samples.astype("<f4").tobytes(order="C")
    labels = rec.label_track.astype("<u2").tobytes() if has_labels else b""
    return header + body + labels


def decode_recording(buf: bytes) -> EmgRecording:
    if len(buf) < _HEADER.size:
        raise RecordingFormatError(f"header needs {_HEADER.size} bytes, file has {len(buf)}", len(buf))
    magic, version, fs, channels, count, flag = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise RecordingFormatError("bad magic", 0)
    if version != VERSION:
        raise RecordingFormatError(f"unsupported version {version}", 8)
    if flag not in (0, 1):
        raise RecordingFormatError(f"label flag must be 0 or 1, got {flag}", 30)
    if not fs > 0:
        raise RecordingFormatError("sample rate must be positive", 10)
    offset = _HEADER.size
    n_samples = channels * count
    end = offset + 4 * n_samples
    if len(buf) < end:
        raise RecordingFormatError(f"truncated sample block: expected {end} bytes, got {len(buf)}", len(buf))
    samples = np.frombuffer(buf, dtype="<f4", count=n_samples, offset=offset).reshape(channels, count)
    labels = None
    if flag:
        lend = end + 2 * count
        if len(buf) < lend:
            raise RecordingFormatError(f"truncated label track: expected {lend} bytes, got {len(buf)}", len(buf))
        labels = np.frombuffer(buf, dtype="<u2", count=count, offset=end).astype(np.int64)
        end = lend
    if len(buf) != end:
        raise RecordingFormatError(f"{len(buf) - end} trailing bytes", end)
    return EmgRecording(fs, samples.astype(np.float64), labels)


def save_recording(rec: EmgRecording, path) -> None:
    Path(path).write_bytes(encode_recording(rec))


def load_recording(path) -> EmgRecording:
    return decode_recording(Path(path).read_bytes())


def save_checkpoint(model, path, train_config: dict | None = None, extra: dict | None = None) -> None:
    meta = {"model": model.config(), "train": train_config or {}, "extra": extra or {}, "format": 1}
    arrays = {k: np.asarray(v) for k, v in model.state().items()}
    for key, arr in arrays.items():
        if arr.dtype.kind == "f":
            arrays[key] = arr.astype("<f8")
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    from .models import CenterLossConfig, EcnnConfig, MetricModel, TripletConfig

    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        state = {k: data[k] for k in data.files if k != "__meta__"}
    cfg = meta["model"]
    model = MetricModel(
        cfg["kind"],
        cfg["num_classes"],
        grid=tuple(cfg["grid"]),
        seed=cfg["seed"],
        triplet=TripletConfig(**cfg["triplet"]),
        center=CenterLossConfig(**cfg["center"]),
        ecnn=EcnnConfig(**cfg["ecnn"]),
        class_ids=cfg["class_ids"],
    )
    model.load_state(state)
    return model, meta
