IMAGES = "images"
LABELS = "labels"

MHA = "mha"
MQA = "mqa"
GQA = "gqa"
KDGQA = "kdgqa"
DGQA_DIFF = "dgqa_diff"
DGQA_EMA = "dgqa_ema"
PGQA = "pgqa"
VARIANTS = (MHA, MQA, GQA, KDGQA, DGQA_DIFF, DGQA_EMA, PGQA)
DYNAMIC_VARIANTS = (DGQA_DIFF, DGQA_EMA)

DEFAULT_WINDOW = 300
DEFAULT_ALPHA = 0.9

UPTRAIN = "uptrain"
FINETUNE = "finetune"
UPTRAIN_LR = 1e-4
FINETUNE_LR = 1e-5

CKPT_MAGIC = b"GQAC"
CKPT_VERSION = 1

METRICS_LOG = "metrics.jsonl"
ALLOCATION_LOG = "allocations.jsonl"
DATA_DIR_ENV = "GQA_DATA_DIR"
