"""Generative models for 1 Hz vehicle speed trajectories."""

from .aegan import (
    AeGanModel,
    AeGanSpeedGenerator,
    TrainConfig,
    ae_loss,
    augment_3d,
    gan_losses,
    generate,
    generate_batch,
    init_model,
    load_model,
    save_model,
    train,
)
from .autodiff import AdamState, Gradients, Tape, Tensor, adam_step, clip_by_global_norm
from .data import Corpus, Trip, context, export_csv, ingest_csv, synth_corpus
from .evaluation import (
    ComparisonReport,
    DensityHistogram,
    accel_series,
    compare_corpora,
    constraint_check,
    density,
    distance,
)
from .markov import MarkovSpeedGenerator
from .nflow import AffineLayer, FlowEnsembleGenerator, ScalarFlow, SinhArcsinhLayer
from .seqnets import (
    EncoderDecoder,
    LstmCellParams,
    MlpParams,
    RnnCellParams,
    decode,
    encode,
    lstm_step,
    mlp_forward,
    rnn_step,
)

__version__ = "0.1.0"
