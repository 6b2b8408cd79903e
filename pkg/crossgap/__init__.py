"""Init file for crossgap."""
from . import activity, const, detector, evaluate, frame_io, influx, optflow, peer, simgen
from .__version__ import VERSION
from .const import State
from .detector import CrossingState, Detector
from .model import Model, load_model, save_model
from .runtime import OnlinePipeline, run_detection, train
