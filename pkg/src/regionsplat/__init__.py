"""Region-partitioned Gaussian splatting on CPU: scene model, partitioning,
rasterization, training with Patchmatch depth refinement, and local/global
view routing."""

from .errors import (ContractViolation, EmptyRegionError, InvalidInputError, MergeError, PartitionError,
                     RegionSplatError, TrainingCollapseError, TrainingDivergenceError)
from .metrics import MetricReport, memory_report, psnr, ssim
from .partitioner import (KMeansModel, Partition, Region, assign_region, build_region_cloud, camera_mask,
                          fit_kmeans, partition_scene)
from .rasterizer import RenderOptions, render
from .router import DensePoints, RouteDecision, build_global, region_threshold, render_view, route
from .scene_model import Camera, Frame, GaussianCloud, PointCloud, visible_points
from .trainer.train import TrainConfig, train_region

__version__ = "0.1.0"
