"""
サイクルカオスGANラボの設定

このモジュールには全てのデフォルト値と定数が含まれており、
メインロジックから分離してクリーンなコード構造を維持するためのものです。
CLIの設定ファイルで上書きされない値はここから読まれます。
"""

# 画素値の範囲 I = [-1, 1]
PIXEL_MIN = -1.0
PIXEL_MAX = 1.0

# IDXファイルのマジックナンバー（ビッグエンディアン）
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# IDXデータセットのファイル名（MNISTの配布名に合わせる）
IDX_FILENAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

# MNIST: 0 -> X, 1 -> Y, 2 -> Z
MNIST_TRIDOMAIN_LABELS = (0, 1, 2)

# Fashion-MNIST公開ラベル表: T-shirt/top=0, Sneaker=7, Bag=8
FASHION_MNIST_TRIDOMAIN_LABELS = (0, 7, 8)

# 合成図形データセット
SHAPE_CATEGORIES = ("disk", "cross", "stripes")
SYNTH_IMAGE_SIZE = 16
SYNTH_MIN_SIZE = 8
SYNTH_TRAIN_PER_CATEGORY = 1000
SYNTH_TEST_PER_CATEGORY = 200
SYNTH_NOISE_STD = 0.05

# ネットワーク構成のデフォルト
DEFAULT_BASE_CHANNELS = 16
DEFAULT_N_RESBLOCKS = 4
DEFAULT_N_DOWNSAMPLES = 2
DEFAULT_DROPOUT_RATE = 0.3
DEFAULT_LEAKY_SLOPE = 0.2
DEFAULT_KERNEL_SIZE = 3

# チェックポイント形式
CHECKPOINT_MAGIC = b"CCGN"
CHECKPOINT_VERSION = 1
NETWORK_NAMES = ("G", "F", "D_X", "D_Y", "D_Z")

# 学習設定のデフォルト
DEFAULT_LAMBDA = 10.0
DEFAULT_EPOCHS = 300
DEFAULT_BATCH_SIZE = 32
DEFAULT_LEARNING_RATE = 2e-4
DEFAULT_BETA1 = 0.5
DEFAULT_BETA2 = 0.999
DEFAULT_ADAM_EPSILON = 1e-7
DEFAULT_LOG_EPSILON = 1e-7
MAX_LOG_EPSILON = 1e-3
DEFAULT_SEED = 1
DEFAULT_CHECKPOINT_EVERY = 50

# F: X -> Z の敵対項で判定に使う識別器
CLOSING_DISCRIMINATORS = ("D_X", "D_Z")
DEFAULT_CLOSING_DISCRIMINATOR = "D_X"

# ヤコビ行列のメモリ上限（行 x 列）
JACOBIAN_MAX_ELEMENTS = 4096 * 4096
JACOBIAN_CHUNK_ROWS = 64

# 力学系解析のデフォルト（デスクスケール）
DEFAULT_N_TRAJECTORIES = 100
DEFAULT_TRANSIENT = 500
DEFAULT_SPECTRUM_STEPS = 500
MAX_DEFAULT_EXPONENTS = 32
DEFAULT_HISTOGRAM_EXPONENTS = 5
DEFAULT_HISTOGRAM_BINS = 20
DEFAULT_DIVERGENCE_EPSILON = 1e-5
DEFAULT_DIVERGENCE_STEPS = 50
DIVERGENCE_SATURATION_FRACTION = 0.1
ORTHONORMALITY_TOLERANCE = 1e-4

# ベンチマーク写像のパラメータ
HENON_A = 1.4
HENON_B = 0.3
LOGISTIC_R = 4.0

# 精度・再現率
DEFAULT_K = 7
DEFAULT_K_RANGE = tuple(range(1, 11))
DEFAULT_PR_STEPS = 20

# カテゴリ判定プローブ
PROBE_HIDDEN_UNITS = 32
PROBE_EPOCHS = 30
PROBE_BATCH_SIZE = 32
PROBE_LEARNING_RATE = 1e-3
PROBE_HELDOUT_FRACTION = 0.2
PROBE_MIN_ACCURACY = 0.95
DOMAIN_NAMES = ("X", "Y", "Z")

# 出力
MANIFEST_FILENAME = "manifest.json"
SVG_HASH_SALT = "cycle-chaos-lab"

# ログ設定
LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"
