"""Language-model planning core."""

from worldplan.lm.core import (  # noqa
    ActionHead,
    LanguageCore,
    PlanOutput,
    SequenceContext,
)
from worldplan.lm.qformer import QFormer  # noqa
from worldplan.lm.tokenizer import Vocabulary  # noqa
