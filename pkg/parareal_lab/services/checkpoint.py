"""
Checkpoint file: one JSON header line, then the float64 weight blocks in
layer order (weights row-major as (out, in), then bias), little-endian.
The header carries a SHA-256 of the binary payload.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch

from ..exceptions import ConfigError
from .surrogate import DTYPE, ResNet

logger = logging.getLogger(__name__)

FORMAT = "parareal-lab-resnet/1"


def _blocks(model: ResNet):
    for name, tensor in model.state_dict().items():
        yield name, tensor.detach().cpu().numpy().astype("<f8", copy=False)


def save_checkpoint(path: Union[str, Path], model: ResNet, train_config: Optional[dict] = None,
                    dt: Optional[float] = None, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    payload = bytearray()
    layout = []
    for name, block in _blocks(model):
        layout.append({"name": name, "shape": list(block.shape)})
        payload += np.ascontiguousarray(block).tobytes(order="C")
    header = {
        "format": FORMAT,
        **model.describe(),
        "dt": dt,
        "train_config": train_config or {},
        "blocks": layout,
        "sha256": hashlib.sha256(payload).hexdigest(),
        **(extra or {}),
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(payload)
    logger.info(f"saved checkpoint {path.name} ({len(payload)} bytes of weights)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[ResNet, dict]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    newline = raw.find(b"\n")
    try:
        header = json.loads(raw[:newline].decode())
    except (ValueError, UnicodeDecodeError):
        raise ConfigError(f"{path.name} is not a checkpoint")
    if header.get("format") != FORMAT:
        raise ConfigError(f"{path.name}: unsupported checkpoint format {header.get('format')!r}")
    payload = raw[newline + 1:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ConfigError(f"{path.name}: weight checksum mismatch")

    model = ResNet(header["d"], header["L"], header["n"], header.get("skip_scale", True))
    state = {}
    offset = 0
    for block in header["blocks"]:
        count = int(np.prod(block["shape"])) if block["shape"] else 1
        values = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(block["shape"])
        state[block["name"]] = torch.tensor(values, dtype=DTYPE)
        offset += 8 * count
    if offset != len(payload):
        raise ConfigError(f"{path.name}: payload size does not match the block layout")
    model.load_state_dict(state)
    return model.eval(), header
