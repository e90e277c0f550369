"""Exception hierarchy shared by all posevalid modules.

The CLI maps these onto distinct exit codes (config 2, data 3,
training 4, evaluation 5).
"""


class PoseValidError(Exception):
    pass


class ConfigError(PoseValidError):
    pass


class DataError(PoseValidError):
    pass


class TrainingError(PoseValidError):
    pass


class EvalError(PoseValidError):
    pass


class InsufficientSupportError(DataError):
    """A cropped point cloud has too few points to say anything about the pose."""
