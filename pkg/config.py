import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# --- Runtime Environment ---
FWS_OUTPUT_ROOT = os.getenv("FWS_OUTPUT_ROOT", "runs")
FWS_DEVICE = os.getenv("FWS_DEVICE", "cpu")
FWS_LOG_LEVEL = os.getenv("FWS_LOG_LEVEL", "INFO")
FWS_NUM_THREADS = os.getenv("FWS_NUM_THREADS")

# --- Label Encoding ---
# Masks are single-channel 8-bit images; 255 marks pixels nobody annotated.
BACKGROUND = 0
DISC_RIM = 1
CUP = 2
NUM_CLASSES = 3
UNANNOTATED = 255
VALID_MASK_VALUES = frozenset({BACKGROUND, DISC_RIM, CUP})

# Structures evaluated separately: the disc includes the cup it surrounds.
OD_GROUP = frozenset({DISC_RIM, CUP})
OC_GROUP = frozenset({CUP})

# --- Numerics ---
LOG_EPS = 1e-12
PARAM_BUDGET = 2_000_000

# --- Artifact Names ---
CHECKPOINT_WEIGHTS = "checkpoint.pt"
CHECKPOINT_MANIFEST = "checkpoint.json"
TRAIN_LOG = "train_log.jsonl"
SCHEDULE_MANIFEST = "schedule.json"
METRICS_FILE = "metrics.jsonl"
TIMINGS_FILE = "timings.jsonl"
PREDICTION_TIMINGS_FILE = "prediction_timings.jsonl"
SKIPPED_FILE = "skipped_cells.jsonl"
RESOLVED_CONFIG = "config.resolved.json"
SWEEP_RESULTS = "sweep_results.csv"


def get_output_root() -> Path:
    """Resolve the directory run outputs are written under."""
    root = Path(FWS_OUTPUT_ROOT).expanduser()
    if not str(root).strip():
        raise ValueError("FWS_OUTPUT_ROOT is set but empty.")
    return root


def get_num_threads() -> int | None:
    if not FWS_NUM_THREADS:
        return None
    try:
        return int(FWS_NUM_THREADS)
    except ValueError:
        print(f"⚠️ FWS_NUM_THREADS '{FWS_NUM_THREADS}' is not an integer; ignoring it")
        return None
