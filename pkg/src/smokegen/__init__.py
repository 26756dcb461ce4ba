"""smokegen: a factory for synthetic forest-fire-smoke detection datasets.

Stages: corpus prep (segmentation + captioning clients), adapter training on
a frozen inpainting backbone with a randomized-mask loss, guided batch
generation, weighted multimodal curation, and YOLO-format export.
"""

__version__ = "0.1.0"

from .corpus import (  # noqa: F401
    BinaryMask,
    DetectionLabel,
    Manifest,
    SmokeSample,
    binarize_mask,
    largest_component_bbox,
    mix_datasets,
    to_yolo_label,
    validate_manifest,
)
from .diffusion import (  # noqa: F401
    ConditioningBundle,
    LatentBatch,
    NoiseSchedule,
    add_noise,
    base_loss,
    make_cosine_schedule,
    make_linear_schedule,
    reverse_step,
    sample_cfg,
)
from .injection import (  # noqa: F401
    AdapterSet,
    FeatureBundle,
    InjectionSchedule,
    attach_adapters,
    default_schedule,
)
from .mrd import MrdConfig, PerturbedMask, downsample_mask, morph, perturb_mask, total_loss  # noqa: F401
