"""Self-supervised depth adaptation for endoscopic video.

A frozen ViT depth backbone is adapted with dynamic vector-based low-rank
adapters, convolutional necks, and trainable multi-scale disparity heads,
while relative pose and camera intrinsics are learned jointly from raw video.
Includes an evaluation kit and a synthetic-scene generator for desk-scale
verification.
"""

from .config import TrainConfig, desk_config, paper_config
from .data import (FrameTriplet, SequenceManifest, TripletDataset, augment,
                   load_triplet, read_manifest, write_manifest)
from .depth_net import (DecoderConfig, DepthNet, DisparityPyramid,
                        MultiScaleDecoder, count_parameters, disp_to_depth)
from .dvlora import DVLoRAAdapter, TrainPhase, init_dvlora
from .errors import (CheckpointVersionError, ConfigError, DimensionError,
                     EndoDACError, EvaluationError, NumericAbort)
from .evalkit import (DepthMetrics, ate_5frame, depth_metrics,
                      intrinsics_error, median_scale)
from .geometry import Projection, backproject, pixel_grid, project, synthesize, warp
from .losses import (LossConfig, edge_aware_smoothness, photometric_loss,
                     ssim, total_loss)
from .pose_intrinsics import (CameraIntrinsics, PoseIntrinsicsNet, RelativePose,
                              axis_angle_to_matrix, intrinsics_to_matrix)
from .synthetic import (SyntheticScene, TrajectorySpec, camera_pose,
                        generate_synthetic_sequence, occlusion_mask,
                        relative_pose, render_frame)
from .trainer import (TrainingSession, TrainResult, build_models, load_session,
                      make_session, run_inference, save_checkpoint, train,
                      training_step)
from .vit_adapter import AdaptedEncoder, ConvNeck, EncoderConfig, TokenFeatureSet, TuningBlock

__version__ = "0.1.0"
