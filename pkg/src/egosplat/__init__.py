"""Gaussian splatting with a rolling-shutter, auto-exposure camera model for egocentric captures."""

from .dataset import CaptureDataset, load_dataset, preprocess
from .errors import (
    ConfigurationError,
    ContractViolation,
    DatasetError,
    DomainError,
    EgoSplatError,
    NumericalError,
)
from .formation import (
    FormationConfig,
    FormationMode,
    FormedImage,
    MotionSamplePlan,
    PixelMaps,
    apply_response,
    apply_shot_noise,
    assign_samples,
    form_image,
    form_image_backward,
    invert_response,
    plan_motion_samples,
)
from .geometry import CameraModel, FrameMeta, Pose, Trajectory, build_rectification, pixel_time
from .metrics import ablation_table, psnr, reproj_percentiles, ssim
from .optimizer import TrainConfig, TrainReport, photometric_loss, split_holdout, train
from .rasterizer import GradientBuffer, RasterSettings, rasterize, rasterize_backward
from .scene import GaussianScene, InitConfig, init_from_points
from .simulator import MotionProfile, PoseDegradation, SensorProfile, capture, generate_scene, perturb_scene

__version__ = "0.1.0"
