import hashlib

import torch


class RngStream:
    """Seeded, splittable random stream.

    Children are derived by hashing the parent seed with a key path, so a draw
    never depends on how many draws happened elsewhere. Training keys streams
    by step, generation by trace and position.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._generator = None

    def split(self, *keys) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(str(k) for k in keys))

    @property
    def derived_seed(self) -> int:
        text = "/".join((str(self.seed),) + self.path).encode()
        return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little") & ((1 << 63) - 1)

    @property
    def generator(self) -> torch.Generator:
        if self._generator is None:
            self._generator = torch.Generator(device="cpu")
            self._generator.manual_seed(self.derived_seed)
        return self._generator

    def normal(self, shape, dtype=torch.float32, device="cpu") -> torch.Tensor:
        return torch.randn(shape, generator=self.generator, dtype=dtype).to(device)

    def uniform(self, shape, dtype=torch.float32, device="cpu") -> torch.Tensor:
        return torch.rand(shape, generator=self.generator, dtype=dtype).to(device)

    def integers(self, low: int, high: int, shape, device="cpu") -> torch.Tensor:
        return torch.randint(low, high, shape, generator=self.generator).to(device)

    def lineage(self) -> str:
        return "/".join((str(self.seed),) + self.path)

    def __repr__(self):
        return f"RngStream({self.lineage()})"
