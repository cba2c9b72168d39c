"""Point transformer with dynamic token aggregating for LiDAR point cloud segmentation."""
from .dta import DTA, WCAMap, aggregate, project_qkv, wca_map
from .gfe import GFE, channelwise_attention, gfe_fuse, pointwise_attention
from .itr import reconstruct
from .lts import LTS, DecisionScores, SparsifiedSelection, TokenSet, sparsify
from .numerics import LBR, PositionBias, gumbel_top_h, make_generator, stable_softmax
from .wnet import DTAFormer, ModelConfig, SegmentationOutput, StageConfig, multi_loss

__version__ = "0.1.0"
