"""Direction fields from local feature matching, with a small gait
recognition head, trained and evaluated on synthetic walkers."""

from .container import FeatureSequence, MaskSequence, read_gff, write_gff
from .diffusion import VarianceSchedule, forward_diffuse_step, linear_beta_schedule, q_sample
from .errors import ConfigError, FormatError, GaitFieldError, NumericError
from .evaluation import SyntheticWalkerSpec, evaluate, rank_k, synth_walkers
from .matching import (
    DirectionTemplate,
    GaitFeatureField,
    assign_directions,
    build_template,
    compute_field,
    texture_suppress,
)
from .viz import FlowColorMap, flow_color_encode

__version__ = "0.1.0"
