"""Single-file training checkpoint.

    b"CAMK" | u32 version | u32 header_len | JSON header | tensor blobs | u32 crc32

The JSON header (sorted keys) carries the resolved run config, its
architecture hash, the step, the seed lineage, normalization statistics and an
index of the little-endian tensor blobs that follow. The CRC covers every byte
between the magic and the checksum. Saving the same state twice yields the
same bytes.
"""
import json
import logging
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from config.settings import RunConfig, apply_overrides, get_preset
from core.errors import BadMagicError, ChecksumError, CheckpointMismatchError, StorageError, TruncatedFileError, VersionMismatchError
from core.rng import RngStream
from training.train_state import PRECISIONS, TrainState, build_optimizer
from models.cam_model import build_model

logger = logging.getLogger(__name__)

MAGIC = b"CAMK"
VERSION = 1
_U32 = struct.Struct("<I")
_NUMPY_DTYPES = {torch.float32: np.dtype("<f4"), torch.float64: np.dtype("<f8")}
_TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}
OPTIMIZER_FIELDS = ("step", "exp_avg", "exp_avg_sq")


def _state_tensors(state: TrainState) -> list[tuple[str, torch.Tensor]]:
    tensors = [(f"model/{name}", t) for name, t in state.model.state_dict().items()]
    for name, param in state.model.named_parameters():
        slot = state.optimizer.state.get(param)
        if not slot:
            continue
        for key in OPTIMIZER_FIELDS:
            value = slot[key]
            if not isinstance(value, torch.Tensor):
                value = torch.tensor(float(value), dtype=torch.float32)
            tensors.append((f"optim/{name}/{key}", value))
    return tensors


def _normalization_to_json(normalization):
    if normalization is None:
        return None
    return {key: value.double().tolist() for key, value in normalization.items()}


def encode_checkpoint(state: TrainState) -> bytes:
    index = []
    blobs = []
    offset = 0
    for name, tensor in _state_tensors(state):
        array = tensor.detach().cpu().contiguous()
        if array.dtype not in _NUMPY_DTYPES:
            array = array.float()
        raw = array.numpy().astype(_NUMPY_DTYPES[array.dtype], copy=False).tobytes()
        index.append({
            "name": name,
            "dtype": str(array.dtype).removeprefix("torch."),
            "shape": list(array.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)

    header = {
        "config": state.config.to_dict(),
        "config_hash": state.config.config_hash(),
        "objective": state.objective,
        "step": state.step,
        "seed": state.config.train.seed,
        "rng_lineage": state.rng.lineage() if state.rng else None,
        "normalization": _normalization_to_json(state.normalization),
        "running": state.running,
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = _U32.pack(VERSION) + _U32.pack(len(header_bytes)) + header_bytes + b"".join(blobs)
    return MAGIC + payload + _U32.pack(zlib.crc32(payload))


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(state)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    logger.info("saved checkpoint at step %d to %s (%d bytes)", state.step, path, len(blob))
    return path


def read_header(blob: bytes, path="<bytes>") -> tuple[dict, int]:
    """Validate framing and checksum; return the header and the offset of the tensor data."""
    if len(blob) < len(MAGIC) + 3 * _U32.size:
        raise TruncatedFileError(path, len(blob), len(MAGIC) + 3 * _U32.size - len(blob))
    if blob[:len(MAGIC)] != MAGIC:
        raise BadMagicError(path, MAGIC, bytes(blob[:len(MAGIC)]))
    (version,) = _U32.unpack_from(blob, len(MAGIC))
    if version != VERSION:
        raise VersionMismatchError(path, VERSION, version)
    (header_len,) = _U32.unpack_from(blob, len(MAGIC) + _U32.size)
    data_start = len(MAGIC) + 2 * _U32.size + header_len
    if data_start + _U32.size > len(blob):
        raise TruncatedFileError(path, len(blob), data_start + _U32.size - len(blob))
    crc_offset = len(blob) - _U32.size
    (stored,) = _U32.unpack_from(blob, crc_offset)
    computed = zlib.crc32(blob[len(MAGIC):crc_offset])
    if stored != computed:
        raise ChecksumError(path, crc_offset, stored, computed)
    header = json.loads(blob[len(MAGIC) + 2 * _U32.size:data_start])
    return header, data_start


def config_from_header(header: dict) -> RunConfig:
    document = dict(header["config"])
    cfg = get_preset(document.get("preset", "desk"))
    return apply_overrides(cfg, document).validate()


def decode_checkpoint(blob: bytes, path="<bytes>", expected: RunConfig | None = None, device="cpu") -> TrainState:
    header, data_start = read_header(blob, path)
    config = config_from_header(header)
    if expected is not None and expected.config_hash() != header["config_hash"]:
        raise CheckpointMismatchError(expected.config_hash(), header["config_hash"])
    if config.config_hash() != header["config_hash"]:
        raise StorageError(f"{path}: stored config does not reproduce its own hash")

    tensors = {}
    data_end = len(blob) - _U32.size
    for entry in header["tensors"]:
        start = data_start + entry["offset"]
        if start + entry["nbytes"] > data_end:
            raise TruncatedFileError(path, start, start + entry["nbytes"] - data_end)
        dtype = _TORCH_DTYPES[entry["dtype"]]
        array = np.frombuffer(blob, dtype=_NUMPY_DTYPES[dtype], count=entry["nbytes"] // _NUMPY_DTYPES[dtype].itemsize, offset=start)
        tensors[entry["name"]] = torch.from_numpy(array.copy()).reshape(entry["shape"])

    cfg = config.train
    config.train.device = device
    model = build_model(config.model, cfg.objective, device=device, dtype=PRECISIONS[cfg.precision])
    model_state = {name.removeprefix("model/"): t for name, t in tensors.items() if name.startswith("model/")}
    model.load_state_dict(model_state, strict=True)
    model.metadata["train_step"] = header["step"]
    model.metadata["ddpm_train_steps"] = cfg.ddpm_train_steps

    optimizer = build_optimizer(model, cfg)
    for name, param in model.named_parameters():
        if f"optim/{name}/step" not in tensors:
            continue
        optimizer.state[param] = {
            "step": tensors[f"optim/{name}/step"].clone(),
            "exp_avg": tensors[f"optim/{name}/exp_avg"].to(device=device, dtype=param.dtype),
            "exp_avg_sq": tensors[f"optim/{name}/exp_avg_sq"].to(device=device, dtype=param.dtype),
        }

    normalization = header.get("normalization")
    if normalization is not None:
        normalization = {key: torch.tensor(value, dtype=torch.float64) for key, value in normalization.items()}
    return TrainState(
        model=model,
        optimizer=optimizer,
        config=config,
        step=header["step"],
        rng=RngStream(cfg.seed).split("train"),
        normalization=normalization,
        running=dict(header.get("running") or {}),
    )


def checkpoint_config(path) -> RunConfig:
    """The run config a checkpoint was trained with, without building the model."""
    path = Path(path)
    if not path.exists():
        raise StorageError(f"checkpoint {path} does not exist")
    header, _ = read_header(path.read_bytes(), path)
    return config_from_header(header)


def load_checkpoint(path, expected: RunConfig | None = None, device="cpu") -> TrainState:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"checkpoint {path} does not exist")
    state = decode_checkpoint(path.read_bytes(), path, expected=expected, device=device)
    logger.info("loaded %s checkpoint at step %d from %s", state.objective, state.step, path)
    return state
