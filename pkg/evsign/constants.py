import os
import torch

__all__ = [
    "PRECISION_TO_TYPE", "PRECISIONS", "BLANK_ID", "BLANK_TOKEN",
    "BOS", "EOS", "PAD", "UNK", "WORD_SPECIALS", "BOS_ID", "EOS_ID", "PAD_ID", "UNK_ID",
    "EVENT_HEADER", "VOXEL_MAGIC", "VOXEL_VERSION", "CHECKPOINT_MAGIC", "CHECKPOINT_VERSION",
    "MANIFEST_NAME", "MANIFEST_FORMAT", "SPLITS", "PROTOCOLS", "FUSION_MODES", "MASK_MODES",
    "HARD_MASK_THRESHOLD", "THREADS_ENV", "CONFIG_DIR", "DEFAULT_SEED",
]

# =================== Constant Values =====================

PRECISION_TO_TYPE = {
    'fp32': torch.float32,
    'fp64': torch.float64,
}
PRECISIONS = set(PRECISION_TO_TYPE)

# ===================== Vocabularies ======================
BLANK_ID = 0
BLANK_TOKEN = "<blank>"

BOS, EOS, PAD, UNK = "<bos>", "<eos>", "<pad>", "<unk>"
WORD_SPECIALS = (BOS, EOS, PAD, UNK)
BOS_ID, EOS_ID, PAD_ID, UNK_ID = range(len(WORD_SPECIALS))

# ===================== File formats ======================
EVENT_HEADER = "# evsign-events v1"
VOXEL_MAGIC = b"EVVG"
VOXEL_VERSION = 1
CHECKPOINT_MAGIC = b"EVCK"
CHECKPOINT_VERSION = 1
MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "evsign-corpus v1"
SPLITS = ("train", "dev", "test")
DEFAULT_SEED = 7

# ======================= Model ===========================
PROTOCOLS = {"s2g", "s2gt"}
FUSION_MODES = {"ltf", "maxpool", "avgpool"}
MASK_MODES = {"soft", "rho", "delta", "hard", "ones", "off"}
HARD_MASK_THRESHOLD = 1e-3

# ===================== Environment =======================
THREADS_ENV = "EVSIGN_THREADS"
CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")
