"""Motion generation pipeline: discrete motion tokenizer, instruction-tuned
language model with low-rank adapters, and a generation-quality metric suite."""

from .io_utils import VERSION as __version__  # noqa: F401
