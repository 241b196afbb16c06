"""Bayesian autoencoders with sparse Gaussian process latent priors."""

from .autoencoder import (DecoderNet, EncoderNet, ModelConfig, PosteriorSample, decode, encode,
                          energy_bae, energy_sgpbae, generate, impute, train)
from .datasets import Dataset, MovingBallConfig, generate_moving_ball, load_csv, save_csv
from .diagnostics import metrics, rhat
from .sghmc import SamplerState, SghmcConfig, run_chain, sghmc_step

__all__ = [
    "DecoderNet", "EncoderNet", "ModelConfig", "PosteriorSample", "decode", "encode",
    "energy_bae", "energy_sgpbae", "generate", "impute", "train",
    "Dataset", "MovingBallConfig", "generate_moving_ball", "load_csv", "save_csv",
    "metrics", "rhat", "SamplerState", "SghmcConfig", "run_chain", "sghmc_step",
]
