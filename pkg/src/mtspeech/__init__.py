"""Multitask speech representation learning: CTC plus contrastive pretraining
over a Gumbel-softmax quantiser, on a small numpy autodiff engine."""

__version__ = "0.1.0"
