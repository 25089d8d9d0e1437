"""Desk-scale latent diffusion UNet with feature inheritance, model assembly
and multi-expert conditional convolutions, on a small numpy autodiff."""

from . import kernels
from . import unet
from . import condconv
from . import sampler
from . import inherit
from . import assembly
from . import checkpoint

from .unet import UNet, UNetConfig, SiteId, build_unet, forward, standard_config
from .sampler import NoiseSchedule, SwitchPolicy, make_schedule, sample
from .inherit import SkipPlan, SamplingMode, compile_plan, make_mode, inherited_forward, flop_estimate
from .assembly import compress_config, assemble, init_student_from_teacher, make_toy_dataset

__version__ = "0.1.0"
