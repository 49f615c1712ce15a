"""Joint-space open-vocabulary detection head.

Text embeddings pass through a small MLP adaptor into the detector's region
feature space; the adapted vocabulary is then folded into a 1x1 convolution
kernel so inference runs like a closed-set classifier.
"""

__version__ = "0.1.0"

from .adaptor import AdaptorConfig, AdaptorParams, backward, forward, init_params, load_params, save_params
from .boxes import Detection, GridSpec, decode_boxes, dfl_decode, make_anchor_centers, nms
from .embedding_io import EmbeddingMatrix, l2_normalize_rows, read_embeddings, write_embeddings
from .head import FeatureMap, ScoreMap, VocabularyPack, classify_conv, reparameterize, score_online
from .loss import GtInstance, LossConfig, cls_loss, dfl_loss, iou_loss, tal_assign, total_loss
from .pipeline import detect
from .quant import QuantizedKernel, classify_quantized, dequantize, drift_report, quantize_kernel
from .synth import SynthScene, SynthSpec, evaluate, gen_class_embeddings, gen_scene
from .training import train_adaptor
from .vocab import add_class, build_vocab, load_pack, remove_class, save_pack
