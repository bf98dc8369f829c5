"""Groupwise deformable coregistration and cosegmentation of image populations.

Each image in a population is warped towards all the others with a discrete
free-form deformation model, so the population's segmentation priors can be
fused by voting in a common space and mapped back to every subject.
"""

from .metrics import UndefinedMetricError, dice, evaluate, hausdorff, contour_mean_distance
from .mrf import ProblemTooLargeError
from .pipeline import (
    IcsResult,
    RegistrationConfig,
    backproject_and_fuse,
    ics_run,
    majority_vote,
    oracle_mode,
    pairwise_baseline,
)
from .transform import ConfigurationError, DenseDeformationField, InversionError
from .volume import (
    DegenerateInputError,
    DomainMismatchError,
    LabelMap,
    MetaImageError,
    ProbabilityMap,
    ScalarVolume,
    VolumeDomain,
    load_metaimage,
    save_metaimage,
)

__version__ = "0.1.0"
