NUM_SCORES = 5
NUM_ATTRIBUTES = 5
NUM_BINS = 4
ALL_PATTERNS = (1, 2, 3, 4, 5, 6, 7, 8)
PARTITION_COUNTS = {1: 2, 2: 2, 3: 2, 4: 2, 5: 2, 6: 4, 7: 4, 8: 9}

ATTRIBUTE_NAMES = (
    'rule_of_thirds', 'balancing_elements', 'object_emphasis', 'symmetry', 'repetition',
)

SALIENCY_SCALE = 8
SALIENCY_WORKING_SIZE = 64
SALIENCY_EPS = 1e-8
SALIENCY_SIGMA = 3.0
SALIENCY_RADIUS = 8

FEATURE_MAGIC = b"SAMPFEAT"
CHECKPOINT_MAGIC = b"SAMPCKPT"

ENTROPY_THRESHOLD = 0.1
RATIO_THRESHOLD = 1.5

ANNOTATIONS_FILENAME = "annotations.tsv"
BETAS_FILENAME = "betas.csv"
FEATURE_SUFFIX = ".feat"
SALIENCY_SUFFIX = ".sal.feat"

STEM_WIDTHS = (8, 16, 16, 16)

# Categorical score laws over ratings 1..5 for the synthetic scene families.
FAMILY_SCORE_LAWS = {
    'thirds-aligned': (0.00, 0.00, 0.10, 0.40, 0.50),
    'symmetric-pair': (0.00, 0.10, 0.30, 0.40, 0.20),
    'centered': (0.05, 0.20, 0.50, 0.20, 0.05),
    'off-balance': (0.50, 0.40, 0.10, 0.00, 0.00),
}
# Attribute centers per family, in ATTRIBUTE_NAMES order.
FAMILY_ATTRIBUTES = {
    'thirds-aligned': (0.9, 0.3, 0.2, -0.5, -0.6),
    'symmetric-pair': (-0.4, 0.7, -0.2, 0.9, 0.6),
    'centered': (-0.5, 0.2, 0.8, 0.3, -0.6),
    'off-balance': (-0.6, -0.8, -0.5, -0.7, -0.6),
}
SCENE_FAMILIES = tuple(FAMILY_SCORE_LAWS)
