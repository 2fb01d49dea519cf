"""stcnet: spiking neural networks with autaptic spatio-temporal circuits.

Spiking neuron layers (IF/LIF/PLIF/LM-H and their circuit-enhanced STC
variants) on a small reverse-mode autodiff tape, a recurrent frame-prediction
network trained with BPTT, synthetic bouncing-squares data, evaluation
metrics, and an analysis lab that checks the closed-form dynamics and cost
claims of the circuit construction.
"""

from .autodiff import NonFiniteError, SurrogateConfig, Tape, Tensor
from .circuits import CircuitParams, compute_modulation, init_circuit
from .config import ConfigError, RunConfig, load_config, parse_config, to_toml
from .data import BlobSpec, SequenceBatch, generate_moving_blobs, load_npy, save_npy
from .network import (
    NetworkParams,
    RolloutPlan,
    build_network,
    forward_step,
    parameters,
    patchify,
    rollout,
    unpatchify,
)
from .neurons import NeuronParams, NeuronState, neuron_step
from .optim import OptimizerState, ScheduleConfig, lr_at, optimizer_step
from .train import DivergenceError, TrainResult, train

__version__ = "0.1.0"
