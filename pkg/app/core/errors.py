"""Exception hierarchy shared by every package.

Each error class carries the process exit code the CLI returns for it, grouped
in three families: configuration (2), numeric (3) and storage / I/O (4).
"""


class CAMError(Exception):
    exit_code = 1


class ConfigError(CAMError):
    exit_code = 2

    def __init__(self, message, key=None):
        self.key = key
        if key:
            message = f"{key}: {message}"
        super().__init__(message)


class CheckpointMismatchError(ConfigError):
    def __init__(self, expected_hash, found_hash):
        self.expected_hash = expected_hash
        self.found_hash = found_hash
        super().__init__(
            f"checkpoint was trained with config hash {found_hash[:12]}, "
            f"run expects {expected_hash[:12]}"
        )


class NumericalError(CAMError):
    exit_code = 3


class DimensionMismatchError(NumericalError):
    def __init__(self, what, expected, got):
        self.expected = expected
        self.got = got
        super().__init__(f"{what}: expected dimension {expected}, got {got}")


class IntegrationError(NumericalError):
    def __init__(self, step, total_steps):
        self.step = step
        self.total_steps = total_steps
        super().__init__(f"non-finite drift at integration step {step + 1}/{total_steps}")


class NonFiniteLossError(NumericalError):
    def __init__(self, step, batch_index=None, norms=None):
        self.step = step
        self.batch_index = batch_index
        self.norms = norms or {}
        report = ", ".join(f"{name}={value:.3e}" for name, value in self.norms.items())
        where = f"step {step}" if batch_index is None else f"step {step}, batch element {batch_index}"
        super().__init__(f"non-finite loss at {where}" + (f" ({report})" if report else ""))


class GenerationError(NumericalError):
    def __init__(self, position, trace_index=None):
        self.position = position
        self.trace_index = trace_index
        where = f"position {position}" if trace_index is None else f"trace {trace_index}, position {position}"
        super().__init__(f"non-finite embedding generated at {where}")


class ContextOverflowError(NumericalError):
    def __init__(self, length, max_context):
        self.length = length
        self.max_context = max_context
        super().__init__(f"sequence of length {length} exceeds max context {max_context}")


class InsufficientSamplesError(NumericalError):
    def __init__(self, count, num_features):
        self.count = count
        self.num_features = num_features
        super().__init__(
            f"{count} samples cannot estimate a {num_features}-dim covariance; "
            f"use more than {num_features} samples or a smaller feature map"
        )


class SequenceTooShortError(NumericalError):
    def __init__(self, index, length, required, purpose="crop"):
        self.index = index
        self.length = length
        self.required = required
        super().__init__(f"sequence {index} has length {length}, {purpose} needs {required}")


class StorageError(CAMError):
    exit_code = 4


class BadMagicError(StorageError):
    def __init__(self, path, expected, found):
        self.path = path
        super().__init__(f"{path}: bad magic {found!r}, expected {expected!r}")


class ChecksumError(StorageError):
    def __init__(self, path, offset, expected, found):
        self.path = path
        self.offset = offset
        super().__init__(
            f"{path}: CRC32 mismatch at offset {offset} (stored {expected:#010x}, computed {found:#010x})"
        )


class TruncatedFileError(StorageError):
    def __init__(self, path, offset, needed):
        self.path = path
        self.offset = offset
        super().__init__(f"{path}: truncated at offset {offset}, needed {needed} more bytes")


class VersionMismatchError(StorageError):
    def __init__(self, path, expected, found):
        self.path = path
        super().__init__(f"{path}: format version {found}, this build reads {expected}")
