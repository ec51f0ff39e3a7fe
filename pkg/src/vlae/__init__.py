"""Desk-scale lab for lossy variational autoencoding.

A numpy-only research codebase: a small reverse-mode autodiff engine,
masked convolutions and MADE-style conditioners, autoregressive flow
priors, a variational autoencoder with locally-autoregressive decoders,
and the measurement tools (importance-sampled NLL, bits-back accounting,
exhaustive normalization checks) needed to study where such models put
their information.
"""

from .autodiff import (
    DomainError,
    NumericError,
    Parameter,
    Tensor,
    grad_check,
    load_tensor,
    save_tensor,
)
from .data import Dataset, SynthSpec, binarize, load_idx, split, synth
from .evaluation import (
    bits_per_dim,
    bits_to_nats,
    bitsback_accounting,
    enumerate_model_mass,
    is_nll,
    kl_usage_meter,
    nats_to_bits,
)
from .flows import FlowStack, FlowStep, Made, elbo_equivalence, identity_stack
from .masks import (
    ConvMask,
    ReceptiveField,
    assert_causality,
    build_conv_mask,
    build_made_masks,
    grayscale,
    receptive_field_of,
)
from .model import VLAE, FreeBitsState, UnconditionalAR, build_decoder, update_gamma
from .optim import Adam, Adamax, make_optimizer
from .train import build_dataset, build_model, load_model, run_training

__version__ = "0.1.0"
