import os
from dotenv import load_dotenv

load_dotenv()

# Served artifacts
MODEL_PATH = os.getenv("LOCALIZER_MODEL_PATH")
MAP_PATH = os.getenv("LOCALIZER_MAP_PATH")

# Runtime
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
SHOW_PROGRESS = os.getenv("SHOW_PROGRESS", "0") == "1"
WORKERS = int(os.getenv("LOCALIZER_WORKERS", "1"))

# App settings
APP_NAME = "Context-Boost Localizer"
APP_VERSION = "1.0.0"
APP_DESCRIPTION = (
    "2D-3D matching by landmark classification: boosted shared stumps over "
    "binary descriptors and visual-context embeddings, verified with PnP+RANSAC"
)

# Map
DEFAULT_DESCRIPTOR_BITS = 384
GRAVITY_NORM_TOLERANCE = 1e-9
ROTATION_TOLERANCE = 1e-9

# Vocabulary
DEFAULT_VOCAB_SIZE = 16
VOCAB_SIZES = [4, 8, 16, 32, 64, 128]
DEFAULT_VOCAB_ITERS = 50

# Context regions
DEFAULT_REGION_COUNT = 1000
DEFAULT_AREA_MIN = 1e-4
DEFAULT_AREA_MAX = 0.25
DEFAULT_ASPECT_MIN = 0.25
DEFAULT_ASPECT_MAX = 4.0
DEFAULT_OFFSET_RADIUS = 1.0
DEGENERATE_GRAVITY_NORM = 1e-6

# Boosting
DEFAULT_ROUNDS = 2000
DEFAULT_CANDIDATE_FEATURES = 500
DEFAULT_THRESHOLD_CAP = 64
DEFAULT_LANDMARK_BUDGET = 7500
DEFAULT_BACKGROUND_CAP = 2000
DEFAULT_NEGATIVE_RATIO = 10
DEFAULT_NEGATIVE_CAP = 500
DEFAULT_MINING_PERIOD = 100
DEFAULT_MINING_GROWTH = 0.25
DEFAULT_EXCLUSION_RADIUS = 0.5
DEFAULT_HOLDOUT_FRACTION = 0.1
DEFAULT_EXHAUSTIVE_MAX_CLASSES = 6
BACKGROUND_CLASS = 0

# Matching
MATCHERS = ["boost", "boost-inv", "hamming", "projected"]
DEFAULT_TOP_K = 10
DEFAULT_ACCEPT_MARGIN = 0.0
PROJECTED_DIMS = 16

# Pose
DEFAULT_RANSAC_ITERS = 500
DEFAULT_INLIER_THRESHOLD_PX = 2.0
DEFAULT_MIN_INLIERS = 6
DEFAULT_RANSAC_CONFIDENCE = 0.999
DEFAULT_REFINE_EVALS = 50

# Harness
POSE_THRESHOLD_M = 0.2
POSE_THRESHOLD_DEG = 5.0
MISS_RATE_BUDGETS = [1, 2, 5, 10, 20, 50]
