"""Exception types raised across the package.

Every error carries a short machine-readable ``code`` used by the CLI to
pick an exit status and format its error line.
"""


class MitodetError(Exception):
    code = "error"


class SingularMatrix(MitodetError):
    code = "singular_matrix"


class InvalidIndex(MitodetError):
    code = "invalid_index"


class BadDimensions(MitodetError):
    code = "bad_dimensions"


class InvalidGamma(MitodetError):
    code = "invalid_gamma"


class ShapeMismatch(MitodetError):
    code = "shape_mismatch"


class NonFiniteLoss(MitodetError):
    code = "non_finite_loss"


class ModelFileError(MitodetError):
    code = "model_file"


class BadMagic(ModelFileError):
    code = "bad_magic"


class VersionMismatch(ModelFileError):
    code = "version_mismatch"


class TruncatedFile(ModelFileError):
    code = "truncated_file"


class LengthMismatch(MitodetError):
    code = "length_mismatch"


class DegenerateTile(MitodetError):
    code = "degenerate_tile"


class InsufficientTissue(MitodetError):
    code = "insufficient_tissue"


class AllZeroScores(MitodetError):
    code = "all_zero_scores"


class EmptyEnsemble(MitodetError):
    code = "empty_ensemble"


class TileGeometryError(MitodetError):
    code = "tile_geometry"


class NoTissue(MitodetError):
    code = "no_tissue"


class BadThresholds(MitodetError):
    code = "bad_thresholds"


class DegenerateMarginals(MitodetError):
    code = "degenerate_marginals"


class DegenerateInput(MitodetError):
    code = "degenerate_input"


class ConfigInfeasible(MitodetError):
    code = "config_infeasible"


class ConfigError(MitodetError):
    code = "config"
