"""Speech super-resolution and bone-conduction enhancement with a hybrid attention / state-space U-Net."""

from .dsp import (AudioSignal, FilterSpec, TriAxialSignal, WindowingPlan, decimate,
                  lowpass_decimate, movement_highpass, preprocess_accel, upsample_to_grid,
                  window_signal)
from .estimator import (AccelPreprocessor, GridUpsampler, LowRateSimulator, MovementHighpass,
                        SuperResolver)
from .model import HybridUNet, ModelConfig, build_ablation, count_parameters
from .objectives import LossReport, StftResolution, training_loss
from .metrics import MetricReport, lsd, snr, stoi
from .training import TrainConfig, TrainState, enhance, finetune, pretrain

__version__ = "0.1.0"
