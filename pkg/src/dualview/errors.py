"""Exception types shared across the package."""


class DualViewError(Exception):
    """Base class for all package errors."""


class DimensionError(DualViewError, ValueError):
    pass


class EmptyInputError(DualViewError, ValueError):
    pass


class DegenerateVectorError(DualViewError, ValueError):
    pass


class NonFiniteError(DualViewError, FloatingPointError):
    pass


class ContractError(DualViewError, ValueError):
    """A caller broke an operation's precondition."""


class ConfigError(DualViewError, ValueError):
    def __init__(self, offenders):
        if isinstance(offenders, str):
            offenders = [offenders]
        self.offenders = list(offenders)
        super().__init__("invalid config: " + "; ".join(self.offenders))


class ParseError(DualViewError, ValueError):
    def __init__(self, path, line_no, reason):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


class IntegrityError(DualViewError, ValueError):
    pass


class TrainingDivergedError(DualViewError, RuntimeError):
    def __init__(self, step, detail=""):
        self.step = step
        super().__init__(f"training diverged at step {step}" + (f": {detail}" if detail else ""))


class MissingGroundTruthError(DualViewError, KeyError):
    pass


class UndefinedAPError(DualViewError, ValueError):
    pass
