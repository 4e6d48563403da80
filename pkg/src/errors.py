class TwinLocError(Exception):
    code = "twinloc_error"

    def __init__(self, detail: str, **context):
        super().__init__(detail)
        self.detail = detail
        self.context = context

    def to_dict(self) -> dict:
        return {"error": self.code, "detail": self.detail, **self.context}


class ConfigError(TwinLocError):
    code = "config_invalid"


class MeshParseError(TwinLocError):
    code = "mesh_parse_error"

    def __init__(self, detail: str, line: int | None = None):
        super().__init__(detail, line=line)
        self.line = line


class EmptyMeshError(TwinLocError):
    code = "mesh_empty"


class EmptyCropError(TwinLocError):
    code = "crop_empty"


class TooFewCorrespondencesError(TwinLocError):
    code = "too_few_correspondences"


class SingularSystemError(TwinLocError):
    code = "singular_system"


class ZeroInformationError(TwinLocError):
    code = "zero_information"


class ImuGapError(TwinLocError):
    code = "imu_gap"


class SolverDivergedError(TwinLocError):
    code = "solver_diverged"

    def __init__(self, detail: str, last_good_keyframe: int | None = None):
        super().__init__(detail, last_good_keyframe=last_good_keyframe)
        self.last_good_keyframe = last_good_keyframe


class DegenerateGeometryError(TwinLocError):
    code = "degenerate_geometry"


class NonConvergenceError(TwinLocError):
    code = "not_converged"


class DegenerateComponentError(TwinLocError):
    code = "degenerate_component"


class InsufficientSamplesError(TwinLocError):
    code = "insufficient_samples"


class EmptyPairingError(TwinLocError):
    code = "empty_pairing"
