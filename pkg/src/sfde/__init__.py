"""SFDE: three-branch cross-view geo-localization network (global semantic,
local geometric, frequency stability) with its own numpy-based reverse-mode
autodiff, trainable and fully testable on a CPU at desk scale."""

__version__ = "0.1.0"

from .autodiff import Parameter, Tape, Tensor  # noqa: F401
