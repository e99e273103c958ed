"""Backpropagation-free training of real-quantized INT8 networks."""
from qzo.model import LayerSpec, QModel, forward, make_batch
from qzo.quant import QTensor, q_layer_forward, quantize
from qzo.zo import PerturbConfig, choose_mode, train_step

__all__ = ["LayerSpec", "QModel", "QTensor", "PerturbConfig", "choose_mode", "forward",
           "make_batch", "q_layer_forward", "quantize", "train_step"]
__version__ = "0.1.0"
