class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


class DatasetIOError(OSError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, dump_dir=None):
        super().__init__(message if dump_dir is None else f"{message} (batch dumped to {dump_dir})")
        self.dump_dir = dump_dir
