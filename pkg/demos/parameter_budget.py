"""
Parameter budget at ViT-B scale
===============================

Count frozen and trainable parameters from shapes alone, then see how the
embedder widths move the trainable share.
"""

from appt.backbone import BackboneConfig
from appt.embed import PAPER_WIDTHS, PointEmbedConfig
from appt.model import ModelConfig, trainable_param_count

vit_b = BackboneConfig.vit_b()
frozen = vit_b.param_count()
print(f"frozen backbone: {frozen:,}")

for widths in [(64, 128), (128, 512), PAPER_WIDTHS, (384, 1536)]:
    cfg = ModelConfig(PointEmbedConfig(widths=widths), vit_b, n_classes=15)
    n = trainable_param_count(cfg)
    print(f"widths {str(widths):<12} trainable {n:>10,}  share {n / (n + frozen):.2%}")
