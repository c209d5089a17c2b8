"""Time-interleaved ADC simulation and neural post-calibration toolkit.

The package covers the full experiment chain: QAM-OFDM test-signal
generation, a behavioral 8-channel interleaved ADC with per-channel
impairments, a cross-correlation time-shift baseline, a from-scratch
convolutional-LSTM regression engine that reconstructs the ideal ADC
output, dynamic-performance metrics (SNDR/ENOB, spectra, SER, PAPR),
and post-training fixed-point inference emulation.
"""

from adccal.signals import QamConstellation, OfdmConfig, WaveformRecord
from adccal.adc import AdcConfig, AdcCapture, ChannelImpairments, default_adc_config
from adccal.calibrate import WindowConfig, WindowDataset, build_network

__all__ = [
    "QamConstellation",
    "OfdmConfig",
    "WaveformRecord",
    "AdcConfig",
    "AdcCapture",
    "ChannelImpairments",
    "default_adc_config",
    "WindowConfig",
    "WindowDataset",
    "build_network",
]

__version__ = "0.1.0"
