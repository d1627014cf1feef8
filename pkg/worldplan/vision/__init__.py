"""Per-frame multi-view perception."""

from worldplan.vision.encoder import VisionEncoder, VisionTokenSet  # noqa
from worldplan.vision.heads import PerceptionHeads, pretrain_losses  # noqa
