"""Reflectivity-augmented triangle descriptors for LiDAR place recognition."""
from .config import PipelineConfig
from .descriptor import Descriptor, DescriptorArray, DescriptorConfig, build_descriptors, canonicalize_triangle, hash_key
from .evaluation import GroundTruth, build_ground_truth, pr_curve, auc, max_f1, average_precision
from .instances import ClusterConfig, Instance, KeyInstanceSet, build_key_instance_set, euclidean_cluster
from .keypoints import KeypointConfig, extract_keypoints
from .pipeline import LoopDetector, extract_features
from .retrieval import DescriptorDB, MatchConfig, load_db, save_db
from .scan_io import PointCloud, load_scan, save_scan, reflectivity_stats
from .verification import RigidTransform, VerifyConfig, estimate_transform, extract_planes, verify_loop

__version__ = "0.1.0"
