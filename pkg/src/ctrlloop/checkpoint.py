"""Single-file checkpoint container.

Layout: one line of UTF-8 JSON (terminated by ``\\n``) holding configs, step
and round counters, RNG states, the noise schedule as explicit float lists,
and an array directory of {name, shape, offset}; followed by the raw array
payload. Arrays are little-endian 32-bit floats, offsets are byte positions
relative to the start of the payload (the byte after the header newline).
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np
import torch

FORMAT_TAG = "ctrlloop-checkpoint-1"


class CheckpointError(RuntimeError):
    pass


def encode_torch_rng(gen: torch.Generator) -> str:
    return base64.b64encode(gen.get_state().numpy().tobytes()).decode("ascii")


def decode_torch_rng(s: str) -> torch.Generator:
    gen = torch.Generator()
    state = torch.from_numpy(np.frombuffer(base64.b64decode(s), dtype=np.uint8).copy())
    gen.set_state(state)
    return gen


def encode_np_rng(rng: np.random.Generator) -> str:
    return base64.b64encode(json.dumps(rng.bit_generator.state).encode()).decode("ascii")


def decode_np_rng(s: str) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = json.loads(base64.b64decode(s).decode())
    return rng


def save_checkpoint(path: str | Path, header: dict, arrays: dict[str, torch.Tensor | np.ndarray]) -> None:
    """Write header metadata plus named float32 arrays into one container file."""
    directory = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])

    full_header = dict(header)
    full_header["format"] = FORMAT_TAG
    full_header["arrays"] = directory
    header_bytes = json.dumps(full_header, sort_keys=True).encode("utf-8")
    if b"\n" in header_bytes:
        raise CheckpointError("checkpoint header must serialize to a single line")

    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header_bytes)
        f.write(b"\n")
        for blob in blobs:
            f.write(blob)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container back into (header, {name: float32 array})."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path!s}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path!s}: corrupt header: {e}") from e
    if header.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path!s}: unknown format tag {header.get('format')!r}")

    payload = raw[nl + 1 :]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path!s}: array {entry['name']!r} exceeds payload")
        arrays[entry["name"]] = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
    return header, arrays
