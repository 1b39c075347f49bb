"""Token-sparsified multimodal transformer fusion, from scratch on float64
numpy: unimodal encoders, strided sparse attention with block pooling, a
dense cross-modal stage, latent mixup, baselines, an analytical flop model,
and a synthetic-data experiment harness."""

from .autodiff import Tensor, backward, no_grad
from .cost import CostReport, flops_mha, flops_mlp, flops_pipeline
from .data import (Dataset, ModalitySpec, SyntheticSpec, generate_synthetic,
                   load_dataset, save_dataset, split_dataset)
from .encoder import (EncoderParams, TokenSet, encoder_layer, project_and_embed,
                      unimodal_encode)
from .fusion import (PoolSpec, StridedMask, build_strided_mask, fuse, merge_cls,
                     pool_tokens, strided_sparse_attention, token_significance)
from .metrics import average_precision, mean_average_precision, top1
from .mixup import MixupConfig, MixupDraw, mix_labels, mix_latent, sample_mixup_draw
from .model import (ModalityConfig, ModelConfig, Prediction, build_params,
                    forward, load_checkpoint, save_checkpoint)
from .sweep import reduction_sweep, summarize
from .training import MetricsRow, TrainConfig, evaluate, train

__version__ = "0.1.0"
