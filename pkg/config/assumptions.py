"""Centralised pipeline assumptions: dataset, model and schedule defaults."""

APP_NAME = "outcrop"
MANIFEST_SCHEMA_VERSION = 1
CHECKPOINT_VERSION = 1

# Outpainting canvas and placement
CANVAS_SIZE = 512
PLACEMENT_AREA_RANGE = (0.1, 0.5)
DEFAULT_AMPLIFY = 4

# Diffusion request
GUIDANCE_SCALE = 4.0
DENOISING_STEPS = 50
NEGATIVE_PROMPT = (
    "unrealistic, unnatural, collage, multiple images, ugly, deformed, disfigured, "
    "watermark, signature, picture-frame, image border, photo album, photo gallery"
)
FALLBACK_CAPTION = "a photo"

# Source pre-filter
MAX_SUBJECTS = 5
MIN_SUBJECT_HEIGHT_FRACTION = 0.1
MAX_SUBJECT_AREA_FRACTION = 0.8
DETECTION_SCORE_THRESHOLD = 0.5
DEFAULT_SUBJECT_CLASS = "subject"

# Quality filter
EXTRA_SUBJECT_AREA_RATIO = 0.25
QUALITY_INPUT_SIZE = 128
QUALITY_THRESHOLD = 0.5
QUALITY_TRAIN = {"epochs": 100, "lr": 1e-4, "batch_size": 64}

# Enclosing-view sampling
VIEW_ASPECT_RANGE = (1.0, 16.0 / 9.0)
VIEW_SCALE_RANGE = (1.0, 2.0)
VIEW_FLIP_PROBABILITY = 0.2
VIEW_EDGE_SNAP_PROBABILITY = 0.25
VIEW_MAX_ATTEMPTS = 100

# Cropping model
MODEL_INPUT_SIZE = 256
AUX_INPUT_SIZE = 224
FEATURE_GRID = 16
FUSED_CHANNELS = 32
ENCODER_HEADS = 8
ENCODER_LAYERS = 2
ROI_POOL = 5
COMPOSITION_HIDDEN = 128
CONDITIONING_HIDDEN = 32
CONDITIONING_DROPOUT = 0.1
ASPECT_SWEEP_AREA = 0.34
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Losses
ANCHOR_LOSS_WEIGHT = 0.1
BOUNDARY_LOSS_WEIGHT = 1.0
BOUNDARY_MARGIN = 0.025
BCE_EPS = 1e-7

# Training schedules
CROPPER_TRAIN = {"lr": 1e-4, "warmup_steps": 500, "batch_size": 32, "epochs": 50}
AUX_TRAIN = {"lr": 1e-4, "warmup_steps": 0, "batch_size": 32, "epochs": 10}
WEIGHT_DECAY = 0.01
RANKING_NEGATIVE_AREA_RANGE = (0.1, 0.9)

# Desk-scale demo (CPU, minutes)
DEMO_SOURCES = 500
DEMO_EVAL_IMAGES = 100
DEMO_EPOCHS = 5
DEMO_TRAIN = {"lr": 1e-3, "warmup_steps": 20, "batch_size": 16}

# Environment variables read by config.settings
ENV_OUTPAINT_URL = "OUTCROP_OUTPAINT_URL"
ENV_DETECT_URL = "OUTCROP_DETECT_URL"
ENV_BACKEND_TIMEOUT = "OUTCROP_BACKEND_TIMEOUT"
ENV_MAX_INFLIGHT = "OUTCROP_MAX_INFLIGHT"
ENV_CAPTION_MODEL = "OUTCROP_CAPTION_MODEL"
DEFAULT_BACKEND_TIMEOUT = 120.0
DEFAULT_MAX_INFLIGHT = 4
DEFAULT_CAPTION_MODEL = "gpt-4o-mini"
