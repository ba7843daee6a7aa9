"""Stereo visual odometry with interchangeable feature-noise models.

One probabilistic cost covers classical consensus scorers (RANSAC, MSAC,
MLESAC, AMLESAC), a-contrario validation (AC-RANSAC), a sample-free robust
initializer, and least-squares refinement over motion, structure and noise
parameters. A synthetic harness provides exact ground truth; evaluation
follows the KITTI segment-error protocol.
"""

__version__ = "0.1.0"

from .errors import (AllHypothesesDegenerate, DegenerateSample, FrustumEmpty,
                     InsufficientCorrespondences, InvalidConfig,
                     MalformedFile, NonPositiveDisparity, NoValidModel,
                     OptimizerDiverged, PointBehindCamera, StereoVoError)
from .geometry import (Point3, Pose, StereoCalibration, StereoMeasurement,
                       pnp_minimal, rotation_angle, se3_exp, se3_log, skew,
                       so3_exp, so3_log, stereo_project, stereo_project_many,
                       triangulate, triangulate_many)
from .noise_models import (AcRansac, Amlesac, Cauchy, CostBreakdown,
                           Gaussian, Mlesac, Msac, NoiseModel, PseudoHuber,
                           Ransac, alpha0_stereo, amlesac_estimate, best_nfa,
                           log_partition, mlesac_estimate_gamma, nfa,
                           prob_of_cost, rho, total_cost)
from .refinement import (JacobianBlocks, NoiseParamBlock, RefinementResult,
                         RefinementScope, jacobian, refine)
from .robust_init import (Hypothesis, InitConfig, erode_init,
                          hypothesize_and_test, sample_indices)
from .pipeline import (Correspondence, FramePair, LabeledCorrespondence,
                       RunConfig, Trajectory, process_pair, process_sequence,
                       viso2_weight)
from .io_sim import (DEFAULT_CALIBRATION, SceneConfig, generate_pair,
                     generate_sequence, load_config, read_correspondences,
                     read_poses, write_correspondences, write_poses)
from .evaluation import (EvalReport, SegmentError, StageTiming, build_report,
                         segment_errors, timing_report)
from .kernels import BACKEND

__all__ = [name for name in dir() if not name.startswith("_")]
