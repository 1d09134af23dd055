# --- config_template.py ---
# Defaults for every run. Each UPPER_CASE name below is a config key in lowercase
# (SGM_P1 -> sgm_p1) and can be overridden from a key=value file (--config) or
# from the command line (--set sgm_p1=0.01). See docs/CONFIGURATION.md.

# --- Run Settings ---
SEED = 0
OUT_DIR = "runs/default"
DATASET_DIR = "data/synth"
# Where infer/refine outputs are read from; empty = the run's own output dir
PREDICTION_DIR = ""
# Checkpoint root used by train (written) and infer (read); empty = <out_dir>/checkpoints
CHECKPOINT_DIR = ""

# --- Synthetic Scenes ---
SYNTH_COUNT = 20
SYNTH_HEIGHT = 64
SYNTH_WIDTH = 64
SYNTH_D_MAX = 8
SYNTH_LAYERS = 3
SYNTH_WORKERS = 1

# --- Raw Matching Cost (census + SGM) ---
CENSUS_WINDOW = 5
SGM_P1 = 0.008
SGM_P2 = 0.126
SGM_PATHS = 4

# --- Generative Cost Aggregation ---
GEN_BASE_CHANNELS = 16  # 64 for full-size runs
GEN_SIGMA = 0.05        # flatness on [0,1]-normalised costs
GEN_TOP_K = 5

# --- Adversarial Confidence Estimation ---
DISC_FEAT_CHANNELS = 16
DISC_FUSION = "dynamic"  # or "concat"
DISC_HEAD_DEPTH = 3
DISC_USE_COLOR = True

# --- Training ---
TRAIN_LR = 1e-5
TRAIN_BATCH = 20
TRAIN_MOMENTUM = 0.9
TRAIN_LAMBDA = 1.0
TRAIN_RHO = 0.9
TRAIN_RECON_WEIGHT = 1.0
TRAIN_GATE_RECON = False
TRAIN_WARMUP_EPOCHS = 5
TRAIN_EPOCHS = 20
TRAIN_CROP = 64
TRAIN_RESUME = False
# Last N dataset samples are held out and evaluated after every epoch (0 = off)
TRAIN_VALIDATION_COUNT = 0
TRAIN_COST_WORKERS = 1

# --- AGCP Refinement ---
AGCP_TAU = 0.7
AGCP_GAMMA = 1.0
AGCP_RADIUS_M = 2
AGCP_SIGMA_COLOR = 0.1
AGCP_SIGMA_SPACE = 2.0
AGCP_CG_TOL = 1e-8
AGCP_CG_MAX_ITER = 2000

# --- Inference ---
INFER_DUMP_FUSION = False

# --- Evaluation ---
EVAL_THRESHOLD_PX = 1.0
EVAL_N_POINTS = 100
EVAL_CONFIDENCE = "learned"  # or "ground_truth"
EVAL_PLOTS = True

# --- Gradient Check ---
GRADCHECK_STEP = 1e-5
GRADCHECK_SEED = 7
