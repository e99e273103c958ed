import numpy as np
import pytest

from qzo.model import LayerSpec, QModel, ptq_calibrate
from qzo.quant import QTensor
from qzo.toy import conv_net, image_task, mlp, separable_task


def fc_layer(w, b, s_w=1.0, s_x=1.0, s_z=1.0, activation="identity"):
    w = np.asarray(w)
    return LayerSpec(
        "fc", (w.shape[1],), s_x=s_x, s_z=s_z, s_w=s_w,
        weight=QTensor(w.astype(np.int32), s_w, 8),
        bias=QTensor(np.asarray(b, dtype=np.int32), s_w * s_x, 32),
        activation=activation,
    )


def small_mlp(seed=0, sizes=(6, 8, 5, 2)):
    x, _ = separable_task(64, dim=sizes[0], seed=seed)
    return ptq_calibrate(mlp(list(sizes), seed=seed), x)


def small_cnn(seed=0, hw=6):
    px, _ = image_task(16, hw=hw, seed=seed)
    return ptq_calibrate(conv_net(seed=seed, hw=hw), px / 255.0)


@pytest.fixture
def mlp_model() -> QModel:
    return small_mlp()


@pytest.fixture
def cnn_model() -> QModel:
    return small_cnn()
