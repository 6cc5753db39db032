"""Networked in-air imaging sonar: emulated sensors, a central processing
node and application subscribers around a PDM beamforming pipeline."""

from .dsp import ChirpParams, SignalMatrix, fft_convolve, pdm_demodulate
from .errors import ConfigError, DecodeError, ProtocolError, SonarNetError
from .geometry import ArrayGeometry, DirectionSet, default_array, direction_grid, steering_delays
from .pipeline import AcousticImage, PipelineConfig, Workspace, new_workspace, process
from .synth import Reflector, Scene, synthesize_measurement
from .wire import MsgType, Packet, RawMeasurement, decode_packet, encode_packet

__version__ = "0.1.0"
