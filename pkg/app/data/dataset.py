"""In-memory corpus of embedding sequences plus the cropping and batching
helpers the trainer draws from."""
import logging
from dataclasses import dataclass, replace

import torch

from config.settings import TrainConfig
from core.errors import DimensionMismatchError, SequenceTooShortError
from core.rng import RngStream

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Dataset:
    sequences: list
    provenance: str = ""
    mean: torch.Tensor | None = None
    std: torch.Tensor | None = None
    embedding_dim: int | None = None

    def __post_init__(self):
        dims = {int(s.shape[-1]) for s in self.sequences}
        if len(dims) > 1:
            raise DimensionMismatchError("dataset sequences", min(dims), max(dims))
        if dims and self.embedding_dim is not None and dims != {self.embedding_dim}:
            raise DimensionMismatchError("dataset sequences", self.embedding_dim, dims.pop())

    def __len__(self):
        return len(self.sequences)

    def __getitem__(self, index):
        return self.sequences[index]

    @property
    def dim(self) -> int:
        if self.sequences:
            return int(self.sequences[0].shape[-1])
        return self.embedding_dim or 0

    @property
    def lengths(self) -> list[int]:
        return [int(s.shape[0]) for s in self.sequences]

    @property
    def is_normalized(self) -> bool:
        return self.mean is not None

    def frames(self) -> torch.Tensor:
        """Every frame of every sequence stacked as (total_frames, dim)."""
        if not self.sequences:
            return torch.empty(0, self.dim)
        return torch.cat(list(self.sequences), dim=0)

    def stacked(self) -> torch.Tensor:
        """(num_sequences, length, dim); all sequences must share one length."""
        if len(set(self.lengths)) > 1:
            raise ValueError(f"sequences have differing lengths {sorted(set(self.lengths))}; crop first")
        return torch.stack(list(self.sequences))

    def normalize(self) -> "Dataset":
        """Per-dimension standardization over the whole corpus; the statistics
        are kept so `denormalize` can map model outputs back."""
        if self.is_normalized:
            return self
        frames = self.frames().double()
        mean = frames.mean(dim=0)
        std = frames.std(dim=0, unbiased=False).clamp_min(STD_FLOOR)
        sequences = [((s.double() - mean) / std).to(s.dtype) for s in self.sequences]
        logger.debug("normalized %d sequences over %d frames", len(sequences), len(frames))
        return replace(self, sequences=sequences, mean=mean, std=std)

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        if not self.is_normalized:
            return x
        return (x.double() * self.std + self.mean).to(x.dtype)

    def with_sequences(self, sequences, provenance=None) -> "Dataset":
        return replace(self, sequences=list(sequences), provenance=provenance or self.provenance)


def crop_random(dataset: Dataset, length: int, rng: RngStream) -> Dataset:
    """Crop every sequence to `length` frames at a uniform random start."""
    cropped = []
    for i, seq in enumerate(dataset.sequences):
        total = int(seq.shape[0])
        if total < length:
            raise SequenceTooShortError(i, total, length)
        start = int(rng.split("crop", i).integers(0, total - length + 1, (1,)).item())
        cropped.append(seq[start:start + length])
    return dataset.with_sequences(cropped, provenance=f"crop({length}) of {dataset.provenance}")


def make_batch(dataset: Dataset, step: int, cfg: TrainConfig, rng: RngStream) -> torch.Tensor:
    """Batch for one training step, a pure function of (dataset, step, seed).

    Sequence indices and crop offsets come from the step's own substream, so a
    resumed run sees exactly the batches an uninterrupted run would.
    """
    stream = rng.split("batch", step)
    indices = stream.split("index").integers(0, len(dataset), (cfg.batch_size,))
    rows = []
    for b, idx in enumerate(indices.tolist()):
        seq = dataset.sequences[idx]
        total = int(seq.shape[0])
        if total < cfg.context_length:
            raise SequenceTooShortError(idx, total, cfg.context_length)
        start = int(stream.split("offset", b).integers(0, total - cfg.context_length + 1, (1,)).item())
        rows.append(seq[start:start + cfg.context_length])
    return torch.stack(rows)
