"""Exception types. Each carries a short ``code`` string used by the CLI."""


class DynBAError(Exception):
    code = "error"

    def __init__(self, message=""):
        super().__init__(f"{self.code}: {message}" if message else self.code)


class LogSingularityError(DynBAError):
    code = "log-singularity"


class NonpositiveDisparityError(DynBAError):
    code = "nonpositive-disparity"


class DegenerateAlignmentError(DynBAError):
    code = "degenerate-alignment"


class NoOverlapError(DynBAError):
    code = "no-overlap"


class SingularSystemError(DynBAError):
    code = "singular-system"

    def __init__(self, message="", condition=float("inf")):
        self.condition = condition
        super().__init__(f"{message} (condition estimate {condition:.3e})")


class NonpositiveUncertaintyError(DynBAError):
    code = "nonpositive-uncertainty"


class FeatureDimMismatchError(DynBAError):
    code = "feature-dim-mismatch"


class ModelFrozenError(DynBAError):
    code = "model-frozen"


class FormatError(DynBAError):
    code = "format-error"


class DegenerateSceneError(DynBAError):
    code = "degenerate-scene"


class InitUnderflowError(DynBAError):
    code = "init-underflow"


class ExtrapolationUnsupportedError(DynBAError):
    code = "extrapolation-unsupported"


class NoAssociationError(DynBAError):
    code = "no-association"


class DegenerateLabelsError(DynBAError):
    code = "degenerate-labels"


class ConfigError(DynBAError):
    code = "config-error"

    def __init__(self, message="", key=None, line=None):
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key `{key}`")
        if line is not None:
            where.append(f"line {line}")
        prefix = (", ".join(where) + ": ") if where else ""
        super().__init__(prefix + message)
