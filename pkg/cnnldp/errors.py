"""
Exception hierarchy for the CNN asymptotics lab
Divergent quantities are values (math.inf plus flags), never exceptions
"""


class LabError(Exception):
    """Base class for every error raised by cnnldp"""


class ShapeMismatchError(LabError, ValueError):
    """Array shapes disagree with the architecture or with each other"""


class InvalidSiteError(LabError, ValueError):
    """Spatial site index outside the grid of the next layer"""


class NotPsdError(LabError, ValueError):
    """Matrix has an eigenvalue below the clamp tolerance"""


class ConfigError(LabError):
    """Experiment configuration could not be read or parsed"""


class PresetNotFoundError(ConfigError, KeyError):
    """Unknown preset name"""

    def __str__(self):
        return Exception.__str__(self)
