"""Super-resolution root/soil segmentation of volumetric MRI scans."""

from .autodiff import (
    AdamState,
    LossConfig,
    Tensor,
    adam_step,
    backward,
    concat_center_crop,
    conv3d_valid,
    conv_transpose3d_x2,
    maxpool3d,
    no_grad,
    sigmoid,
    weighted_masked_bce,
    zero_grad,
)
from .infer import TilePlan, segment_volume, tile_plan
from .metrics import (
    ConfusionVolume,
    DistanceField,
    ToleranceReport,
    confusion_map,
    distance_tolerant_prf,
    edt_squared,
    export_confusion_slices,
)
from .net import (
    NetConfig,
    Network,
    ShapePlan,
    build,
    forward,
    forward_t,
    load_checkpoint,
    save_checkpoint,
    shape_plan,
)
from .synth import (
    Augment,
    DatasetConfig,
    RootGenParams,
    RootSystem,
    Sample,
    SoilSpec,
    compose_sample,
    generate_dataset,
    generate_root,
    make_dontcare,
    make_soil,
    rasterize,
)
from .train import TrainConfig, TrainLog, sample_crop, train, validate
from .volume import Volume, VoxelBox, center_crop, export_slice, read_rvol, write_rvol

__version__ = "0.1.0"
