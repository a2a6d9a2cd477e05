from .decoder import DualContextDecoder
from .encoders import AgentEncoder, LaneEncoder, SceneEncoder, TargetEncoder
from .layers import AttentionBlock, MaskedAttention, PoseEmbedding, two_layer_head
from .predictor import (Prediction, StreamingPredictor, build_target_frames,
                        gather_target_context)

__all__ = [
    "AgentEncoder", "AttentionBlock", "DualContextDecoder", "LaneEncoder",
    "MaskedAttention", "PoseEmbedding", "Prediction", "SceneEncoder",
    "StreamingPredictor", "TargetEncoder", "build_target_frames",
    "gather_target_context", "two_layer_head",
]
